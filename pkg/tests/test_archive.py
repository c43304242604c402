import struct
import zlib

import numpy as np
import pytest

from selfensemble.archive import MAGIC, ArchiveError, WeightArchive


def _archive():
    rng = np.random.default_rng(0)
    return WeightArchive("demo", {"depth": 2, "note": "x"},
                         {"a.weight": rng.standard_normal((2, 3, 3, 3)), "a.bias": np.arange(2.0),
                          "scalar": np.array(1.5)},
                         {"seed": 3})


def test_round_trip_preserves_everything():
    arc = _archive()
    back = WeightArchive.from_bytes(arc.to_bytes())
    assert back.kind == "demo" and back.spec == arc.spec and back.metadata == {"seed": 3}
    assert list(back.params) == list(arc.params)
    for name in arc.params:
        assert back.params[name].dtype == np.float32
        assert back.params[name].tobytes() == arc.params[name].tobytes()
    assert back.to_bytes() == arc.to_bytes()


def test_layout_starts_with_magic_version_and_header():
    raw = _archive().to_bytes()
    assert raw[:8] == MAGIC
    version, header_len = struct.unpack("<II", raw[8:16])
    assert version == 1
    assert raw[16:16 + header_len].startswith(b"{")


def test_first_blob_checksum_is_crc32_of_data():
    arc = _archive()
    raw = arc.to_bytes()
    data = arc.params["a.weight"].astype("<f4").tobytes()
    start = raw.index(data)
    assert struct.unpack("<I", raw[start + len(data):start + len(data) + 4])[0] == zlib.crc32(data)


def test_save_and_load(tmp_path):
    arc = _archive()
    path = tmp_path / "w.sear"
    arc.save(path)
    assert WeightArchive.load(path).to_bytes() == arc.to_bytes()


def test_corrupted_payload_is_detected():
    arc = _archive()
    raw = bytearray(arc.to_bytes())
    data = arc.params["a.bias"].astype("<f4").tobytes()
    raw[raw.index(data)] ^= 0xFF
    with pytest.raises(ArchiveError, match="checksum"):
        WeightArchive.from_bytes(bytes(raw))


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:8] + struct.pack("<I", 99) + b[12:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_malformed_archives_are_rejected(mutate, message):
    with pytest.raises(ArchiveError, match=message):
        WeightArchive.from_bytes(mutate(_archive().to_bytes()))


def test_copy_is_independent():
    arc = _archive()
    dup = arc.copy()
    dup.params["a.bias"][0] = 42.0
    dup.metadata["seed"] = 7
    assert arc.params["a.bias"][0] == 0.0 and arc.metadata["seed"] == 3
