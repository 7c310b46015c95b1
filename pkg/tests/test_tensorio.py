import hashlib
import struct

import numpy as np
import pytest

from dynalign import tensorio
from dynalign.tensorio import FormatError, IntegrityError, TruncatedFileError


def sample_records(rng):
    return [("a", rng.normal(size=(2, 3)).astype(np.float32)),
            ("b.scalar", np.array(3.5, dtype=np.float32)),
            ("c", rng.normal(size=(4,)).astype(np.float32))]


def test_round_trip_is_bit_exact(rng, tmp_path):
    records = sample_records(rng)
    path = tmp_path / "x.bin"
    tensorio.save(path, "demo", {"k": "v", "n": "3"}, records, footer=b"tail")
    kind, meta, got, footer = tensorio.load(path)
    assert kind == "demo" and meta == {"k": "v", "n": "3"} and footer == b"tail"
    for name, arr in records:
        assert got[name].tobytes() == arr.tobytes()
        assert got[name].shape == arr.shape
    assert tensorio.dumps("demo", meta, records, b"tail") == path.read_bytes()


def test_layout_matches_hand_encoding():
    arr = np.array([1.0, -2.0], dtype=np.float32)
    body = b"A3LN" + struct.pack("<I", 1)
    body += struct.pack("<I", 1) + b"k"
    body += struct.pack("<I", 0)
    body += struct.pack("<I", 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 1)
    body += struct.pack("<Q", 2) + arr.astype("<f4").tobytes()
    body += struct.pack("<I", 0)
    expected = body + hashlib.sha256(body).digest()
    assert tensorio.dumps("k", {}, [("w", arr)]) == expected


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        tensorio.loads(b"NOPE" + b"\0" * 40)


def test_unsupported_version(rng):
    data = bytearray(tensorio.dumps("k", {}, sample_records(rng)))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(FormatError, match="version"):
        tensorio.loads(bytes(data))


@pytest.mark.parametrize("cut", [10, 30, 60])
def test_truncation(rng, cut):
    data = tensorio.dumps("k", {"m": "1"}, sample_records(rng))
    with pytest.raises(TruncatedFileError):
        tensorio.loads(data[:cut])


def test_corrupted_record_fails_integrity(rng):
    data = bytearray(tensorio.dumps("k", {}, sample_records(rng)))
    data[-40] ^= 0xFF
    with pytest.raises(IntegrityError):
        tensorio.loads(bytes(data))


def test_error_classes_share_a_base():
    for cls in (FormatError, TruncatedFileError, IntegrityError):
        assert issubclass(cls, tensorio.TensorFileError)
