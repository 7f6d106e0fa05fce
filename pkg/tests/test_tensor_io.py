import numpy as np
import pytest

from clusteralign.tensor_io import (
    TensorFormatError,
    export_csv,
    import_csv,
    load_tensor,
    save_tensor,
)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (4, 3, 2), ()]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.catn"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)  # bit-exact payload


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.catn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(TensorFormatError, match="offset 0"):
        load_tensor(path)


def test_truncated_payload_reports_offset(tmp_path):
    path = tmp_path / "t.catn"
    save_tensor(path, np.ones((4, 4)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(TensorFormatError) as err:
        load_tensor(path)
    assert err.value.offset > 0


def test_truncated_header(tmp_path):
    path = tmp_path / "t.catn"
    save_tensor(path, np.ones((2, 3)))
    blob = path.read_bytes()
    path.write_bytes(blob[:9])
    with pytest.raises(TensorFormatError):
        load_tensor(path)


def test_csv_round_trip(tmp_path):
    arr = np.random.default_rng(1).normal(size=(5, 3))
    path = tmp_path / "t.csv"
    export_csv(path, arr)
    back = import_csv(path)
    assert np.array_equal(back, arr)


def test_csv_ragged_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,2.0\n3.0\n")
    with pytest.raises(ValueError, match="ragged"):
        import_csv(path)
