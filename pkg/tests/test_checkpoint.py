from collections import OrderedDict

import numpy as np
import pytest

from ebsal.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from ebsal.tensor import Tensor


def test_roundtrip_preserves_values_and_order(tmp_path, rng):
    params = OrderedDict(
        [
            ("net.w1", rng.normal(size=(4, 3))),
            ("net.b1", rng.normal(size=4)),
            ("head.scalar", np.array(2.5)),
        ]
    )
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
        assert loaded[name].dtype == np.float64


def test_tensor_values_accepted(tmp_path, rng):
    params = OrderedDict([("w", Tensor(rng.normal(size=(2, 2))))])
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, params)
    np.testing.assert_array_equal(load_checkpoint(path)["w"], params["w"].data)


def test_float32_stored_as_float64(tmp_path):
    params = OrderedDict([("w", np.ones(3, dtype=np.float32) / 3)])
    path = tmp_path / "f32.ckpt"
    save_checkpoint(path, params)
    out = load_checkpoint(path)["w"]
    assert out.dtype == np.float64
    np.testing.assert_array_equal(out, params["w"].astype(np.float64))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path, rng):
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(path, OrderedDict([("w", rng.normal(size=(8, 8)))]))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path, rng):
    path = tmp_path / "extra.ckpt"
    save_checkpoint(path, OrderedDict([("w", rng.normal(size=2))]))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_save_is_byte_deterministic(tmp_path, rng):
    params = OrderedDict([("a", rng.normal(size=(5, 5))), ("b", rng.normal(size=7))])
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, params)
    save_checkpoint(p2, params)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:8] == MAGIC
