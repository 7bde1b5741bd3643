import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from stvpr.dataset import (
    DataConfig,
    GroundTruth,
    SequenceSample,
    generate,
    load_dataset,
    make_dataset,
    positive_mask,
    positives_for,
    save_dataset,
    trajectory,
)
from stvpr.errors import ConfigError, InputError
from stvpr.numerics import rng


def sample(anchor, pos=(0.0, 0.0)):
    return SequenceSample(np.zeros((1, 1, 1)), [anchor], "A", pos)


def test_generate_sequences():
    db, q = generate(0, 20, L=4)
    assert len(db) == len(q) == 17
    assert db[0].place_ids == [0, 1, 2, 3] and db[0].condition == "A" and q[0].condition == "B"
    assert db[0].frames.shape == (4, 16, 32)
    assert db[5].place_ids == q[5].place_ids and db[5].anchor_id == 8


def test_generate_needs_enough_places():
    with pytest.raises(ConfigError):
        generate(0, 3, L=5)


def test_separable_limit():
    db, q = generate(0, 30, conditions="identity", noise=0.0)
    for a, b in zip(db, q):
        np.testing.assert_array_equal(a.frames, b.frames)
    # a plain mean-token descriptor already retrieves perfectly
    d_db = [s.frames.mean(axis=(0, 1)) for s in db]
    d_q = [s.frames.mean(axis=(0, 1)) for s in q]
    gt = GroundTruth("frame")
    pos = [positives_for(s, db, gt) for s in q]
    assert oracles.recall_at_k([list(x) for x in d_q], [list(x) for x in d_db], pos, 1) == 1.0


def test_deterministic_regeneration():
    a = make_dataset(DataConfig(train_places=0), 11)
    b = make_dataset(DataConfig(train_places=0), 11)
    for name in a.splits:
        for c in ("A", "B"):
            assert a.splits[name].frames[c].tobytes() == b.splits[name].frames[c].tobytes()
    c = make_dataset(DataConfig(train_places=0), 12)
    assert not np.array_equal(a.splits["test"].frames["A"], c.splits["test"].frames["A"])


def test_random_descriptors_hit_chance_level():
    # with random descriptors a query's top-1 lands on one of ~3 frame-mode positives
    # out of 46 candidates; the bound below is measured against 1/50
    gt = GroundTruth("frame")
    vals = []
    for seed in range(20):
        db, q = generate(seed, 50, noise=5.0)
        r = rng.stream(seed, "test.random")
        d_db, d_q = r.normal(size=(len(db), 8)), r.normal(size=(len(q), 8))
        mask = positive_mask([s.anchor_id for s in q], [s.anchor_id for s in db], gt)
        top = np.argmin(((d_q[:, None] - d_db[None]) ** 2).sum(-1), axis=1)
        vals.append(mask[np.arange(len(q)), top].mean())
    assert abs(np.mean(vals) - 1 / 50) <= 0.05


def test_condition_b_differs_only_in_appearance():
    cfg = DataConfig(noise=0.0, train_places=0)
    data = make_dataset(cfg, 0, splits=("test",))
    A, B = data.splits["test"].frames["A"], data.splits["test"].frames["B"]
    assert not np.allclose(A, B)
    ident = make_dataset(DataConfig(noise=0.0, identity_conditions=True, train_places=0), 0, splits=("test",))
    np.testing.assert_array_equal(ident.splits["test"].frames["A"], ident.splits["test"].frames["B"])


def test_trajectory_fixed_step():
    pos = trajectory(40, 2.0, rng.stream(0, "t"))
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    np.testing.assert_allclose(steps, 2.0)
    np.testing.assert_array_equal(pos[0], [0, 0])


def test_train_split_size():
    data = make_dataset(DataConfig(n_places=20, train_places=60), 0)
    assert data.splits["train"].n_places == 60 and data.splits["test"].n_places == 20


# -- ground truth -----------------------------------------------------------------
def test_radius_boundary_straddle():
    gt = GroundTruth("radius", positive_radius=10.0)
    db = [sample(0, (0.0, 9.9)), sample(1, (0.0, 10.1))]
    assert positives_for(sample(5, (0.0, 0.0)), db, gt) == {0}


def test_frame_window():
    gt = GroundTruth("frame", frame_tolerance=1)
    db = [sample(i) for i in range(10)]
    assert positives_for(sample(5), db, gt) == {4, 5, 6}
    assert positives_for(sample(0), db, gt) == {0, 1}


def test_empty_database():
    with pytest.raises(InputError):
        positives_for(sample(0), [], GroundTruth())


def test_bad_mode():
    with pytest.raises(ConfigError):
        GroundTruth("both")


@given(st.integers(0, 10_000))
def test_radius_mode_matches_scan_and_is_symmetric(seed):
    r = np.random.default_rng(seed)
    pts = r.uniform(0, 30, size=(12, 2))
    gt = GroundTruth("radius", positive_radius=float(r.uniform(1, 15)))
    mask = positive_mask(np.arange(12), np.arange(12), gt, pts, pts)
    for i in range(12):
        for j in range(12):
            d = ((pts[i][0] - pts[j][0]) ** 2 + (pts[i][1] - pts[j][1]) ** 2) ** 0.5
            assert mask[i, j] == (d <= gt.positive_radius)
    np.testing.assert_array_equal(mask, mask.T)


# -- persistence ----------------------------------------------------------------
def test_save_load_round_trip(tmp_path):
    data = make_dataset(DataConfig(n_places=12, train_places=15), 3)
    save_dataset(data, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.seed == 3 and back.config == data.config
    for name, split in data.splits.items():
        np.testing.assert_array_equal(back.splits[name].positions, split.positions)
        for c in ("A", "B"):
            assert back.splits[name].frames[c].tobytes() == split.frames[c].tobytes()
    header = (tmp_path / "d" / "test" / "positions.csv").read_text().splitlines()[0]
    assert header == "id,x,y,condition"


def test_image_mode():
    cfg = DataConfig(n_places=8, train_places=0, images=True, image_size=(16, 16), dim=8)
    data = make_dataset(cfg, 0, splits=("test",))
    frames = data.splits["test"].frames["A"]
    assert frames.shape == (8, 16, 16, 3) and frames.min() >= 0 and frames.max() <= 1


def test_config_validation():
    with pytest.raises(ConfigError):
        DataConfig(n_places=3, seq_len=5)
    with pytest.raises(ConfigError):
        DataConfig(content_dim=40)
    with pytest.raises(ConfigError):
        DataConfig.from_dict({"nonsense": 1})
