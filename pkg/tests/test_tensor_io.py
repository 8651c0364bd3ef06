import numpy as np
import pytest

from salmask.errors import FormatError
from salmask.tensor import read_smt1, write_smt1


class TestSmt1RoundTrip:
    def test_f32(self, tmp_path):
        arr = np.random.default_rng(0).random((3, 5, 2)).astype(np.float32)
        p = tmp_path / "a.smt1"
        write_smt1(p, arr)
        back = read_smt1(p)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_u8(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        p = tmp_path / "b.smt1"
        write_smt1(p, arr)
        back = read_smt1(p)
        assert back.dtype == np.uint8
        assert np.array_equal(back, arr)

    def test_scalar_rank0(self, tmp_path):
        arr = np.float32(3.5).reshape(())
        p = tmp_path / "s.smt1"
        write_smt1(p, arr)
        assert read_smt1(p).shape == ()


class TestSmt1Errors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.smt1"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            read_smt1(p)

    def test_payload_size_mismatch(self, tmp_path):
        arr = np.zeros((4, 4), dtype=np.float32)
        p = tmp_path / "t.smt1"
        write_smt1(p, arr)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_smt1(p)

    def test_unsupported_dtype(self, tmp_path):
        p = tmp_path / "d.smt1"
        with pytest.raises(FormatError):
            write_smt1(p, np.zeros(3, dtype=np.float64))
