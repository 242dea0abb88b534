import numpy as np
import pytest

from mgfuse.containers import ContainerError, load_arrays, save_arrays


def test_roundtrip_arrays_and_meta(tmp_path):
    path = tmp_path / "box.npz"
    arrays = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1, -2, 3], dtype=np.int64),
        "nested/name": np.ones((2, 2, 2), dtype=np.float64),
    }
    save_arrays(path, arrays, meta={"version": 1, "tag": "x"})
    back, meta = load_arrays(path)
    assert meta == {"version": 1, "tag": "x"}
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype


def test_big_endian_normalized(tmp_path):
    path = tmp_path / "be.npz"
    save_arrays(path, {"x": np.arange(4, dtype=">f8")})
    back, _ = load_arrays(path)
    assert back["x"].dtype.byteorder in ("<", "=")
    np.testing.assert_array_equal(back["x"], [0.0, 1.0, 2.0, 3.0])


def test_reserved_name_rejected(tmp_path):
    with pytest.raises(ValueError, match="reserved"):
        save_arrays(tmp_path / "x.npz", {"__meta__": np.zeros(1)})


def test_corrupt_file_rejected(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"this is not a container")
    with pytest.raises(ContainerError, match="corrupt"):
        load_arrays(path)


def test_empty_meta_default(tmp_path):
    save_arrays(tmp_path / "m.npz", {"x": np.zeros(2)})
    _, meta = load_arrays(tmp_path / "m.npz")
    assert meta == {}
