import json

import numpy as np
import pytest

from edmcast.grid import Field, read_tensor_file
from edmcast.toy_data import (
    BlobWorldConfig, PatchFilter, apply_filter, build_dataset, generate_sequence, make_split, windows,
)


def test_static_world_is_constant():
    cfg = BlobWorldConfig(fixed_velocity=(0.0, 0.0), growth_range=(0.0, 0.0), spawn_rate=0.0, seed=3)
    seq = generate_sequence(cfg, 5)
    assert all(np.array_equal(seq[0], f) for f in seq[1:])


def test_unit_advection_is_circular_shift():
    cfg = BlobWorldConfig(grid=32, fixed_velocity=(1.0, 1.0), growth_range=(0.0, 0.0), spawn_rate=0.0,
                          amplitude_range=(20.0, 30.0), seed=4)
    seq = generate_sequence(cfg, 6)
    for k in range(1, 6):
        np.testing.assert_allclose(seq[k], np.roll(seq[0], (k, k), axis=(-2, -1)), atol=1e-4)


def test_values_stay_physical():
    cfg = BlobWorldConfig(n_blobs=(7, 7), amplitude_range=(100.0, 120.0), seed=1)
    seq = generate_sequence(cfg, 10)
    assert seq.min() >= 180 and seq.max() <= 330


def test_persistence_error_grows_with_lead():
    cfg = BlobWorldConfig(grid=32, seed=9)
    seqs, _ = make_split(cfg, None, 200, "train", 6)
    rmse = [np.sqrt(((seqs[:, k] - seqs[:, 0]) ** 2).mean()) for k in range(1, 6)]
    assert rmse[0] > 0 and np.all(np.diff(rmse) > 0)


def test_config_domain_errors():
    with pytest.raises(ValueError):
        BlobWorldConfig(grid=8)
    with pytest.raises(ValueError):
        BlobWorldConfig(velocity="shear")
    with pytest.raises(ValueError):
        BlobWorldConfig(background=400.0)
    with pytest.raises(ValueError):
        generate_sequence(BlobWorldConfig(), 2)


def test_filter_cases():
    filt = PatchFilter()
    warm = np.full((1, 8, 8), 290.0, np.float32)
    r = apply_filter(Field(warm, "kelvin"), filt)
    assert not r.accepted and r.cloud_fraction == 0 and r.failed == ["cloud_fraction"]
    assert apply_filter(np.full((1, 8, 8), 220.0), filt).accepted
    board = np.where((np.indices((8, 8)).sum(0) % 2) == 0, 272.0, 273.0)[None]
    assert apply_filter(board, filt).cloud_fraction == 0.5
    assert apply_filter(np.full((1, 8, 8), 220.0), filt, viewing_zenith=70.0).failed == ["viewing_zenith"]
    with pytest.raises(ValueError):
        PatchFilter(min_cloud_fraction=1.5)


def test_filter_monotone_in_fraction():
    filt = PatchFilter(min_cloud_fraction=0.3)
    accepted = []
    for k in range(0, 65, 4):
        f = np.full(64, 290.0)
        f[:k] = 200.0
        accepted.append(apply_filter(f.reshape(1, 8, 8), filt).accepted)
    assert accepted == sorted(accepted)


def test_windows_layout():
    seqs = np.arange(2 * 4 * 1 * 2 * 2, dtype=np.float32).reshape(2, 4, 1, 2, 2)
    cond, tgt = windows(seqs)
    assert cond.shape == (4, 2, 2, 2) and tgt.shape == (4, 1, 2, 2)
    assert np.array_equal(cond[1], seqs[0, 1:3, 0]) and np.array_equal(tgt[1], seqs[0, 3])
    assert np.array_equal(tgt[2], seqs[1, 2])


def test_build_dataset(tmp_path):
    cfg = BlobWorldConfig(grid=16, width_range=(2.0, 4.0), seed=2)
    mans = build_dataset(cfg, PatchFilter(), {"train": 20, "val": 6, "test": 6}, tmp_path)
    assert {k: m.count for k, m in mans.items()} == {"train": 20, "val": 6, "test": 6}
    train = read_tensor_file(tmp_path / "train.edmt")
    val = read_tensor_file(tmp_path / "val.edmt")
    assert train.shape == (20, 3, 16, 16)
    assert mans["val"].stats == mans["train"].stats
    assert mans["train"].stats.mean == pytest.approx(train.astype(np.float64).mean(), rel=1e-6)
    assert abs(val.mean() - mans["val"].stats.mean) > 1e-6
    assert not np.array_equal(train[:6], val)
    side = json.loads((tmp_path / "train.json").read_text())
    assert side["count"] == 20

    again = tmp_path / "again"
    mans2 = build_dataset(cfg, PatchFilter(), {"train": 20, "val": 6, "test": 6}, again)
    assert np.array_equal(read_tensor_file(again / "train.edmt"), train)
    assert mans2["train"].extra["rejected"] == mans["train"].extra["rejected"]
