import csv
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from stvpr.deform_attn import (
    DeformAttnConfig,
    bilinear_point,
    deform_attn,
    dump_sampling_csv,
    flops_deform_attn,
    flops_dense_attn,
    init_deform_attn,
    reference_grid,
    sampling_plan,
)
from stvpr.encoder import TokenFeatureMap
from stvpr.errors import ConfigError, DimensionError
from stvpr.numerics import ParameterRegistry, Tensor, grad_check, rng, tsum, mul


def random_instance(seed, h, w, D, M, K):
    r = np.random.default_rng(seed)
    cfg = DeformAttnConfig(dim=D, heads=M, points=K, levels=1, dropout=0.0)
    p = ParameterRegistry(np.float64)
    init_deform_attn(p, "attn", cfg, rng.stream(seed, "attn"))
    for _, t in p.items():  # move off the zero init so every term matters
        t.data = t.data + r.normal(0, 0.3, size=t.shape)
    q = r.normal(size=(h * w, D))
    kv = r.normal(size=(h * w, D))
    return cfg, p, q, kv


def oracle_params(p):
    return {k: v.data.tolist() for k, v in p.scoped("attn").items()}


def run_oracle_case(seed, h, w, D, M, K):
    cfg, p, q, kv = random_instance(seed, h, w, D, M, K)
    out = deform_attn(Tensor(q), Tensor(kv), (h, w), cfg, p).data
    ref = oracles.deform_attn(q.tolist(), kv.tolist(), h, w, oracle_params(p), M, K)
    return float(np.max(np.abs(out - np.array(ref))))


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.sampled_from([(2, 1), (4, 2), (8, 2), (6, 1)]),
       st.integers(1, 4))
def test_matches_scalar_oracle(seed, h, w, DM, K):
    D, M = DM
    assert run_oracle_case(seed, h, w, D, M, K) < 1e-10


def test_reference_grid_centers():
    g = reference_grid(2, 4)
    np.testing.assert_allclose(g[0], [0.125, 0.25])
    np.testing.assert_allclose(g[5], [0.375, 0.75])


def test_init_ring_and_uniform_weights():
    cfg = DeformAttnConfig(dim=8, heads=2, points=3, levels=1, dropout=0.0)
    p = ParameterRegistry(np.float64)
    init_deform_attn(p, "attn", cfg, rng.stream(0, "a"))
    loc, weights = sampling_plan(Tensor(np.random.default_rng(0).normal(size=(1, 4, 8))), (2, 2), cfg, p)
    # offsets sit on a ring of one cell around each reference point
    ref = reference_grid(2, 2)
    d = (loc.data[0] - ref[:, None, None, :]) * np.array([2, 2])
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0)
    np.testing.assert_allclose(weights.data, 1.0 / 3)


def test_k_total_counts_only_input_levels():
    cfg = DeformAttnConfig(dim=8, heads=8, points=8, levels=2)
    assert cfg.k_total == 8 and cfg.head_dim == 1


def test_config_errors():
    with pytest.raises(ConfigError):
        DeformAttnConfig(dim=6, heads=4)
    with pytest.raises(ConfigError):
        DeformAttnConfig(dim=8, heads=2, points=0)
    with pytest.raises(ConfigError):
        DeformAttnConfig(dim=8, heads=2, levels=1, input_levels=2)


def test_shape_errors():
    cfg, p, q, kv = random_instance(0, 2, 2, 4, 2, 2)
    with pytest.raises(DimensionError):
        deform_attn(Tensor(q), Tensor(kv), (3, 2), cfg, p)
    with pytest.raises(DimensionError):
        deform_attn(Tensor(q[:, :2]), Tensor(kv[:, :2]), (2, 2), cfg, p)


def test_batched_equals_per_item():
    cfg, p, q, kv = random_instance(3, 3, 3, 4, 2, 2)
    q2 = np.stack([q, q[::-1]])
    kv2 = np.stack([kv, kv * 2])
    out = deform_attn(Tensor(q2), Tensor(kv2), (3, 3), cfg, p).data
    np.testing.assert_allclose(out[1], deform_attn(Tensor(q[::-1]), Tensor(kv * 2), (3, 3), cfg, p).data,
                               atol=1e-13)


def test_token_feature_map_kv():
    cfg, p, q, kv = random_instance(1, 2, 3, 4, 2, 2)
    a = deform_attn(Tensor(q), TokenFeatureMap(Tensor(kv), (2, 3)), None, cfg, p).data
    b = deform_attn(Tensor(q), Tensor(kv), (2, 3), cfg, p).data
    np.testing.assert_array_equal(a, b)


def test_gradients_reach_offsets_and_values():
    cfg, p, q, kv = random_instance(5, 3, 3, 4, 2, 2)
    w = np.random.default_rng(0).normal(size=(9, 4))
    p.add("q", q)
    p.add("kv", kv)
    err = grad_check(lambda: tsum(mul(deform_attn(p["q"], p["kv"], (3, 3), cfg, p), Tensor(w))), p)
    assert err < 1e-7


def test_bilinear_point():
    tokens = Tensor(np.arange(8.0).reshape(4, 2))
    fmap = TokenFeatureMap(tokens, (2, 2))
    np.testing.assert_allclose(bilinear_point(fmap, [0.25, 0.25]).data, [0.0, 1.0])
    np.testing.assert_allclose(bilinear_point(fmap, [0.5, 0.5]).data, tokens.data.mean(axis=0))


def test_flops_closed_form():
    for n, D, M, K in [(16, 32, 2, 2), (256, 32, 8, 8), (7, 12, 3, 5)]:
        cfg = DeformAttnConfig(dim=D, heads=M, points=K, levels=1)
        assert flops_deform_attn(n, cfg) == n * (4 * D * D + 6 * D * M * K + 10 * D * K)


def test_deformable_cheaper_than_dense_for_large_n():
    cfg = DeformAttnConfig(dim=32, heads=2, points=2, levels=1)
    for n in (256, 1024):
        assert flops_deform_attn(n, cfg) < flops_dense_attn(n, n, 32, 2)


def test_dump_sampling_csv(tmp_path):
    cfg, p, q, _ = random_instance(2, 2, 2, 4, 2, 3)
    dump_sampling_csv(tmp_path / "s.csv", Tensor(q), (2, 2), cfg, p)
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 4 * 2 * 3
    total = sum(float(r["weight"]) for r in rows if r["query"] == "0" and r["head"] == "1")
    assert total == pytest.approx(1.0)


def test_hundred_instances_fast():
    t0 = time.perf_counter()
    r = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        h, w = r.integers(1, 5, size=2)
        D, M = [(2, 1), (4, 2), (8, 2), (8, 1)][r.integers(4)]
        worst = max(worst, run_oracle_case(i, int(h), int(w), D, M, int(r.integers(1, 5))))
    assert worst < 1e-10
    assert time.perf_counter() - t0 < 10
