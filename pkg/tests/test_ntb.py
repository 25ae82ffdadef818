import numpy as np
import pytest

from hypersynth.errors import ContainerError
from hypersynth.ntb import read_ntb, write_ntb


def test_roundtrip_mixed_dtypes(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(7),
        "scalar": np.float32(2.5).reshape(()),
    }
    path = tmp_path / "t.ntb"
    write_ntb(path, tensors, {"k": 1})
    back, meta = read_ntb(path)
    assert meta == {"k": 1}
    for name, arr in tensors.items():
        assert back[name].dtype == arr.dtype
        assert np.array_equal(back[name], np.asarray(arr))


def test_integer_tensors_stored_as_f32(tmp_path):
    path = tmp_path / "t.ntb"
    write_ntb(path, {"i": np.arange(5)}, None)
    back, _ = read_ntb(path)
    assert back["i"].dtype == np.float32
    assert np.array_equal(back["i"], np.arange(5, dtype=np.float32))


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ntb"
    path.write_bytes(b"HSC1\n{}\n")
    with pytest.raises(ContainerError, match="magic"):
        read_ntb(path)


def test_truncated_payload(tmp_path, rng):
    path = tmp_path / "t.ntb"
    write_ntb(path, {"a": rng.standard_normal(8).astype(np.float32)}, None)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ContainerError, match="overruns"):
        read_ntb(path)


def test_unwritable_path(rng):
    with pytest.raises(ContainerError):
        write_ntb("/nonexistent-dir/sub/t.ntb",
                  {"a": np.zeros(2, dtype=np.float32)}, None)
