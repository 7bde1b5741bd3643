import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from stvpr.aggregation import (
    aggregate,
    aggregate_batch,
    gem_exponent,
    init_gem,
    init_vlad,
    l2_normalize,
    pca_apply,
    pca_fit,
    reset_vlad_centers,
    seq_gem,
    seq_vlad,
    soft_assign,
)
from stvpr.errors import ConfigError, DimensionError, InputError
from stvpr.numerics import ParameterRegistry, Tensor, grad_check, rng, tsum, mul


def vlad_params(C, D, seed, alpha=1.0):
    p = ParameterRegistry(np.float64)
    init_vlad(p, C, D, rng.stream(seed, "vlad"), alpha)
    r = np.random.default_rng(seed)
    for _, t in p.items():
        t.data = t.data + r.normal(0, 0.2, size=t.shape)
    return p


def vlad_case(seed):
    r = np.random.default_rng(seed)
    C, D, n = int(r.integers(1, 6)), int(r.integers(1, 7)), int(r.integers(1, 10))
    p = vlad_params(C, D, seed)
    x = r.normal(size=(n, D))
    out = seq_vlad(Tensor(x), p).data.reshape(-1)
    ref = oracles.vlad(x.tolist(), p["vlad.centers"].data.tolist(), p["vlad.assign.weight"].data.tolist(),
                       p["vlad.assign.bias"].data.tolist())
    return float(np.max(np.abs(out - np.array(ref))))


def gem_case(seed):
    r = np.random.default_rng(seed)
    L, n, D = int(r.integers(1, 6)), int(r.integers(1, 5)), int(r.integers(1, 5))
    F = r.normal(size=(L, n, D))
    pv = float(r.uniform(0.5, 6.0))
    out = seq_gem(Tensor(F), pv).data[0]
    return float(np.max(np.abs(out - np.array(oracles.gem(F.tolist(), pv)))))


@given(st.integers(0, 100_000))
def test_vlad_matches_oracle(seed):
    assert vlad_case(seed) < 1e-10


@given(st.integers(0, 100_000))
def test_gem_matches_oracle(seed):
    assert gem_case(seed) < 1e-10


def test_hundred_instances_each_fast():
    t0 = time.perf_counter()
    assert max(vlad_case(s) for s in range(100)) < 1e-10
    assert max(gem_case(s) for s in range(100)) < 1e-10
    assert time.perf_counter() - t0 < 5


def test_gem_special_cases(rs):
    F = rs.uniform(0.1, 2.0, size=(4, 3, 2))
    np.testing.assert_allclose(seq_gem(Tensor(F), 1.0).data[0], F.mean(axis=0), atol=1e-12)
    big = seq_gem(Tensor(F), 200.0).data[0]
    assert np.all(big <= F.max(axis=0) + 1e-12) and np.allclose(big, F.max(axis=0), rtol=0.01)
    # constant over time -> the constant, whatever p
    const = np.broadcast_to(F[:1], F.shape)
    np.testing.assert_allclose(seq_gem(Tensor(const.copy()), 3.7).data[0], F[0], rtol=1e-12)


def test_gem_clamps_nonpositive():
    out = seq_gem(Tensor(-np.ones((3, 1, 2))), 3.0).data
    np.testing.assert_allclose(out, 1e-6, rtol=1e-9)


def test_gem_rejects_bad_shapes_and_p():
    with pytest.raises(InputError):
        seq_gem(Tensor(np.ones(3)), 3.0)
    with pytest.raises(ConfigError):
        init_gem(ParameterRegistry(), -1.0)


def test_gem_parameter_is_positive():
    p = ParameterRegistry()
    init_gem(p, 3.0)
    assert gem_exponent(p).data == pytest.approx(3.0)
    p["gem.log_p"].data = np.array(-50.0)
    assert gem_exponent(p).data > 0


def test_vlad_unit_norm_and_shape(rs):
    p = vlad_params(4, 3, 0)
    V = seq_vlad(Tensor(rs.normal(size=(2, 7, 3))), p).data
    assert V.shape == (2, 4, 3)
    np.testing.assert_allclose(np.linalg.norm(V.reshape(2, -1), axis=1), 1.0)


def test_soft_assign_rows_sum_to_one(rs):
    p = vlad_params(5, 3, 1, alpha=100.0)
    a = soft_assign(Tensor(rs.normal(size=(4, 3))), p).data
    np.testing.assert_allclose(a.sum(axis=-1), 1.0)


def test_netvlad_init_assigns_to_nearest_center(rs):
    p = ParameterRegistry(np.float64)
    init_vlad(p, 4, 3, rng.stream(0, "v"), alpha=50.0)
    c = p["vlad.centers"].data
    x = c + rs.normal(0, 0.05, size=c.shape)
    a = soft_assign(Tensor(x), p).data
    np.testing.assert_array_equal(a.argmax(axis=1), np.arange(4))


def test_l2_normalize_zero_row_stays_zero():
    out = l2_normalize(Tensor(np.zeros((2, 3)))).data
    assert np.all(out == 0)


def test_aggregation_gradients(rs):
    p = vlad_params(3, 4, 2)
    init_gem(p, 2.5)
    p.add("F", rs.uniform(0.2, 1.5, size=(3, 5, 4)))
    w = rs.normal(size=(12,))

    def f():
        d = aggregate([p["F"][t] for t in range(3)], p).flat
        return tsum(mul(d.reshape(12), Tensor(w)))

    assert grad_check(f, p) < 1e-7


def test_aggregate_batch_matches_single(rs):
    p = vlad_params(3, 4, 3)
    init_gem(p)
    F = rs.normal(size=(2, 3, 5, 4))
    batch = aggregate_batch([Tensor(F[:, t]) for t in range(3)], p).data
    single = aggregate([Tensor(F[1, t]) for t in range(3)], p).flat.data
    np.testing.assert_allclose(batch[1], single, atol=1e-13)
    with pytest.raises(InputError):
        aggregate([], p)
    with pytest.raises(DimensionError):
        aggregate([Tensor(F[0, 0]), Tensor(F[0, 0, :4])], p)


def test_reset_vlad_centers_kmeans(rs):
    p = ParameterRegistry(np.float64)
    init_vlad(p, 2, 2, rng.stream(0, "v"))
    blobs = np.concatenate([rs.normal(0, 0.1, (50, 2)) + 5, rs.normal(0, 0.1, (50, 2)) - 5])
    reset_vlad_centers(p, blobs, rng.stream(0, "k"), alpha=1.0)
    c = np.sort(p["vlad.centers"].data[:, 0])
    np.testing.assert_allclose(c, [-5, 5], atol=0.1)
    with pytest.raises(InputError):
        reset_vlad_centers(p, blobs[:1], rng.stream(0, "k"))


# -- PCA ------------------------------------------------------------------------
def test_pca_full_rank_is_isometry(rs):
    X = rs.normal(size=(40, 6))
    proj = pca_fit(X, 6)
    Z = pca_apply(proj, X, renormalize=False)
    d0 = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d1 = np.linalg.norm(Z[:, None] - Z[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-10)
    np.testing.assert_allclose(proj.basis @ proj.basis.T, np.eye(6), atol=1e-12)


def test_pca_recovers_dominant_axis(rs):
    X = rs.normal(size=(200, 3)) * np.array([0.1, 5.0, 0.2])
    proj = pca_fit(X, 1)
    assert abs(proj.basis[0, 1]) > 0.99 and proj.basis[0, 1] > 0
    assert np.all(np.diff(pca_fit(X, 3).explained_variance) <= 0)


def test_pca_renormalizes(rs):
    proj = pca_fit(rs.normal(size=(30, 5)), 2)
    z = pca_apply(proj, rs.normal(size=(4, 5)))
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0)


def test_pca_errors(rs):
    X = rs.normal(size=(10, 4))
    for k in (0, 5):
        with pytest.raises(ConfigError):
            pca_fit(X, k)
    with pytest.raises(ConfigError):
        pca_fit(rs.normal(size=(3, 8)), 3)  # k >= N
