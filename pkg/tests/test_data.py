import gzip

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mmrobust.data import (
    ImagePreset,
    IdxFormatError,
    array_digest,
    encode_idx,
    load_fmnist,
    parse_idx,
    pool_images,
    read_idx,
    split,
    synth_ecg,
    synth_fmnist_arrays,
    synth_spike,
    write_synth_fmnist,
)
from mmrobust.diffcore import RngStream

GOOD = bytes([0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3, 1, 2, 3, 4, 5, 6])
# first generated sequence at seed 0, length 80, unit gain
ECG_GOLDEN = "28ac3d0db302732f43a4df17e777379c8c9e348fa3c1073b3e21f5f82fedd927"


def test_idx_example():
    assert parse_idx(GOOD).tolist() == [[1, 2, 3], [4, 5, 6]]
    assert parse_idx(GOOD).dtype == np.uint8


def test_idx_element_type():
    bad = bytearray(GOOD)
    bad[2] = 0x09
    with pytest.raises(IdxFormatError, match="unsupported element type"):
        parse_idx(bytes(bad))


@pytest.mark.parametrize("buf", [GOOD[:-1], GOOD[:3], GOOD[:9]])
def test_idx_truncated(buf):
    with pytest.raises(IdxFormatError, match="truncated"):
        parse_idx(buf)


def test_idx_bad_magic_and_rank():
    with pytest.raises(IdxFormatError, match="magic"):
        parse_idx(b"\x01" + GOOD[1:])
    with pytest.raises(IdxFormatError, match="rank"):
        parse_idx(bytes([0, 0, 8, 4]) + bytes(16))
    with pytest.raises(IdxFormatError, match="rank"):
        parse_idx(bytes([0, 0, 8, 0]))


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)))
def test_idx_round_trip(arr):
    assert np.array_equal(parse_idx(encode_idx(arr)), arr)


def test_read_idx_gzip(tmp_path):
    (tmp_path / "a.gz").write_bytes(gzip.compress(GOOD))
    (tmp_path / "b").write_bytes(GOOD)
    assert np.array_equal(read_idx(tmp_path / "a.gz"), read_idx(tmp_path / "b"))


def test_pool_images():
    img = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    assert pool_images(img, 2).tolist() == [[[5, 7], [13, 15]]]


def test_load_fmnist_splits(tmp_path):
    write_synth_fmnist(tmp_path, n_train=60, n_test=20)
    pr = ImagePreset("tiny", 2, 40, 10, 20)
    ds = load_fmnist(tmp_path, pr)
    assert ds["train"].x.shape == (40, 14, 14) and len(ds["val"]) == 10 and len(ds["test"]) == 20
    assert ds["train"].x.max() <= 1.0 and ds["train"].x.min() >= 0.0
    with pytest.raises(ValueError, match="more examples"):
        load_fmnist(tmp_path, ImagePreset("big", 2, 100, 10, 20))


def test_load_fmnist_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_fmnist(tmp_path)


def test_synth_images_balanced_and_deterministic():
    x, y = synth_fmnist_arrays(50, RngStream(1))
    assert x.shape == (50, 28, 28) and x.dtype == np.uint8
    assert np.bincount(y).tolist() == [5] * 10
    x2, _ = synth_fmnist_arrays(50, RngStream(1))
    assert np.array_equal(x, x2)


def test_ecg_golden_and_balanced():
    ds = synth_ecg(8, 80, RngStream(0))
    assert array_digest(ds.x[:1]) == ECG_GOLDEN
    big = synth_ecg(200, 60, RngStream(3))
    assert np.bincount(big.y).tolist() == [50] * 4
    assert big.x.shape == (200, 60, 2)
    np.testing.assert_array_equal(big.x[..., 1], -big.x[..., 0])


def test_ecg_gain_and_length():
    a = synth_ecg(4, 60, RngStream(0))
    b = synth_ecg(4, 60, RngStream(0), gain=2.0)
    np.testing.assert_allclose(b.x, 2 * a.x, rtol=1e-6)
    with pytest.raises(ValueError):
        synth_ecg(4, 49, RngStream(0))


def test_ecg_classes_differ_in_beat_count():
    ds = synth_ecg(400, 80, RngStream(0))
    # threshold crossings of the clean channel track the number of beats
    peaks = ((ds.x[:, 1:, 0] > 0.6) & (ds.x[:, :-1, 0] <= 0.6)).sum(axis=1)
    mean = [peaks[ds.y == c].mean() for c in range(3)]
    assert mean[2] < mean[0]


@given(st.integers(1, 60), st.integers(0, 2**16))
def test_spike_task_is_binary(n, seed):
    ds = synth_spike(n, 20, RngStream(seed), n_channels=4)
    assert set(np.unique(ds.x)) <= {0.0, 1.0}
    assert ds.x.shape == (n, 20, 4)


def test_split_fractions():
    ds = synth_ecg(100, 60, RngStream(0))
    s = split(ds)
    assert [len(s[k]) for k in ("train", "val", "test")] == [70, 15, 15]
    assert np.array_equal(np.concatenate([s[k].y for k in ("train", "val", "test")]), ds.y)
