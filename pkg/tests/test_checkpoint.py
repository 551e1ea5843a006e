"""Container format tests: golden bytes, round-trips, corruption handling."""

import struct

import numpy as np
import pytest

from tcsm.autodiff import Tensor
from tcsm.checkpoint import load_tensors, save_tensors
from tcsm.errors import CorruptFileError, NumericError


def golden_bytes(entries):
    """Independently constructed expected file image for (name, array) pairs."""
    out = b"TCSM" + struct.pack("<II", 1, len(entries))
    for name, arr in entries:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<Q", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.astype("<f8").tobytes()
    return out


class TestRoundTrip:
    def test_values_names_and_order_preserved(self, tmp_path):
        rng = np.random.default_rng(60)
        original = {
            "b.weight": Tensor(rng.normal(size=(3, 2, 3, 3))),
            "a.bias": Tensor(rng.normal(size=3)),
            "scalar": Tensor(1.25),
        }
        path = tmp_path / "params.tcsm"
        save_tensors(path, original)
        loaded = load_tensors(path)
        assert list(loaded) == list(original)  # insertion order, not sorted
        for name, t in original.items():
            np.testing.assert_array_equal(loaded[name].data, t.data)
            assert loaded[name].requires_grad

    def test_same_mapping_same_bytes(self, tmp_path):
        rng = np.random.default_rng(61)
        params = {"w": Tensor(rng.normal(size=(4, 4))), "b": Tensor(np.zeros(4))}
        p1, p2 = tmp_path / "one.tcsm", tmp_path / "two.tcsm"
        save_tensors(p1, params)
        save_tensors(p2, params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_accepts_plain_ndarrays(self, tmp_path):
        path = tmp_path / "arr.tcsm"
        save_tensors(path, {"x": np.arange(6.0).reshape(2, 3)})
        np.testing.assert_array_equal(load_tensors(path)["x"].data,
                                      np.arange(6.0).reshape(2, 3))

    def test_rank_zero_tensor(self, tmp_path):
        path = tmp_path / "s.tcsm"
        save_tensors(path, {"s": Tensor(3.5)})
        loaded = load_tensors(path)["s"]
        assert loaded.data.shape == ()
        assert loaded.item() == 3.5


class TestGoldenFormat:
    def test_file_matches_hand_packed_bytes(self, tmp_path):
        arr = np.array([[1.0, -2.0], [0.5, 8.0]])
        vec = np.array([7.0])
        path = tmp_path / "golden.tcsm"
        save_tensors(path, {"mat": Tensor(arr), "v": Tensor(vec)})
        assert path.read_bytes() == golden_bytes([("mat", arr), ("v", vec)])

    def test_header_fields(self, tmp_path):
        path = tmp_path / "h.tcsm"
        save_tensors(path, {"x": np.zeros(2)})
        raw = path.read_bytes()
        assert raw[:4] == b"TCSM"
        assert struct.unpack("<I", raw[4:8])[0] == 1  # version
        assert struct.unpack("<I", raw[8:12])[0] == 1  # tensor count


class TestCorruption:
    def _valid_file(self, tmp_path):
        path = tmp_path / "ok.tcsm"
        save_tensors(path, {"w": Tensor(np.arange(4.0).reshape(2, 2)), "b": Tensor(np.ones(2))})
        return path

    def test_every_truncation_detected(self, tmp_path):
        path = self._valid_file(tmp_path)
        raw = path.read_bytes()
        bad = tmp_path / "bad.tcsm"
        for cut in range(len(raw)):
            bad.write_bytes(raw[:cut])
            with pytest.raises(CorruptFileError):
                load_tensors(bad)

    def test_trailing_bytes_detected(self, tmp_path):
        path = self._valid_file(tmp_path)
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_bad_magic(self, tmp_path):
        path = self._valid_file(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_bad_version(self, tmp_path):
        path = self._valid_file(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_duplicate_name(self, tmp_path):
        arr = np.zeros(1)
        raw = golden_bytes([("x", arr), ("x", arr)])
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(raw)
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_non_utf8_name(self, tmp_path):
        out = b"TCSM" + struct.pack("<II", 1, 1)
        out += struct.pack("<I", 2) + b"\xff\xfe"
        out += struct.pack("<Q", 0)
        out += struct.pack("<d", 1.0)
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(out)
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_implausible_rank(self, tmp_path):
        out = b"TCSM" + struct.pack("<II", 1, 1)
        out += struct.pack("<I", 1) + b"x"
        out += struct.pack("<Q", 1000)
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(out)
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_nonfinite_payload_rejected_on_load(self, tmp_path):
        raw = golden_bytes([("x", np.array([np.nan]))])
        bad = tmp_path / "bad.tcsm"
        bad.write_bytes(raw)
        with pytest.raises(CorruptFileError):
            load_tensors(bad)

    def test_nonfinite_payload_rejected_on_save(self, tmp_path):
        with pytest.raises(NumericError):
            save_tensors(tmp_path / "x.tcsm", {"x": np.array([np.inf])})

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_tensors(tmp_path / "nope.tcsm")
