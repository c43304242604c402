"""Versioned binary container for named float32 parameter blobs.

Layout (all integers little-endian)::

    magic        8 bytes   b"SELFENS\\x00"
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (kind, spec, metadata)
    blob_count   uint32
    blob_count times:
        name_len uint16, name (UTF-8)
        ndim     uint8,  shape (ndim x uint32)
        nbytes   uint64, raw float32 data (row-major)
        crc32    uint32 of the raw data

Used for both backbone and fusion weights.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SELFENS\x00"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    """Malformed, corrupted, or mismatched archive."""


@dataclass(eq=False)
class WeightArchive:
    kind: str
    spec: dict
    params: dict
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.params = {name: np.ascontiguousarray(value, dtype=np.float32)
                       for name, value in self.params.items()}

    def to_bytes(self):
        header = json.dumps({"kind": self.kind, "spec": self.spec, "metadata": self.metadata},
                            sort_keys=True).encode("utf-8")
        out = [MAGIC, struct.pack("<II", self.format_version, len(header)), header,
               struct.pack("<I", len(self.params))]
        for name, value in self.params.items():
            raw = value.astype("<f4").tobytes()
            encoded = name.encode("utf-8")
            out.append(struct.pack("<H", len(encoded)) + encoded)
            out.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
            out.append(struct.pack("<Q", len(raw)) + raw + struct.pack("<I", zlib.crc32(raw)))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        view = memoryview(buf)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise ArchiveError("archive truncated")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        if take(len(MAGIC)) != MAGIC:
            raise ArchiveError("not a weight archive (bad magic bytes)")
        version, header_len = struct.unpack("<II", take(8))
        if version != FORMAT_VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        header = json.loads(take(header_len).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = take(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            (nbytes,) = struct.unpack("<Q", take(8))
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise ArchiveError(f"blob {name!r}: {nbytes} bytes do not fit shape {shape}")
            raw = take(nbytes)
            (crc,) = struct.unpack("<I", take(4))
            if zlib.crc32(raw) != crc:
                raise ArchiveError(f"checksum mismatch for blob {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        if pos != len(view):
            raise ArchiveError("trailing bytes after last blob")
        return cls(header["kind"], header["spec"], params, header.get("metadata", {}), version)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def copy(self):
        return WeightArchive(self.kind, json.loads(json.dumps(self.spec)),
                             {k: v.copy() for k, v in self.params.items()},
                             dict(self.metadata), self.format_version)
