"""Checkpoint container: round trip, byte stability, corruption handling."""

import numpy as np
import pytest

from ccaps.checkpoint import (
    CheckpointError,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "conv1.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "norm.mean": rng.normal(size=3),
        "steps": np.array([17], dtype=np.int64),
    }


def test_round_trip_preserves_dtype_shape_values(tmp_path):
    arrays = _arrays()
    meta = {"epoch": 3, "config": {"seed": 1}}
    path = save_checkpoint(tmp_path / "a.ckpt", arrays, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(loaded[k], arrays[k])


def test_identical_state_gives_identical_bytes(tmp_path):
    arrays = _arrays()
    meta = {"epoch": 1}
    a = save_checkpoint(tmp_path / "a.ckpt", arrays, meta)
    b = save_checkpoint(tmp_path / "b.ckpt", arrays, meta)
    assert a.read_bytes() == b.read_bytes()


def test_no_partial_file_left_behind(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", _arrays(), {})
    assert path.exists()
    assert not list(tmp_path.glob("*.partial"))


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_payload_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", _arrays(), {"epoch": 2})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_missing_file_raises_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_config_hash_is_order_insensitive_and_value_sensitive():
    a = config_hash({"x": 1, "y": [1, 2]})
    b = config_hash({"y": [1, 2], "x": 1})
    c = config_hash({"x": 2, "y": [1, 2]})
    assert a == b
    assert a != c
