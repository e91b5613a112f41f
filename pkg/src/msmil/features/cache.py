"""Binary feature-cache file: lossless interchange between CLI stages.

Layout (all integers little-endian):

    magic   4 bytes  "MSML"
    version u16      currently 1
    count   u32      number of bags
    per bag:
        id_len  u16, then UTF-8 slide id
        label   u8   0 = FN, 1 = PC
        n       u32  patches per scale
        three matrices in scale order 1, 1/2, 1/4, each n x 512
        float32 values, least-significant byte first, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..slide import SCALES
from .core import FEATURE_DIM, FeatureBag

MAGIC = b"MSML"
VERSION = 1
_LABEL_BYTE = {"FN": 0, "PC": 1}
_BYTE_LABEL = {0: "FN", 1: "PC"}


def write_cache(path: str | Path, bags: list[FeatureBag]) -> None:
    """Serialize bags; the round trip through :func:`read_cache` is exact."""
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(bags))]
    for bag in bags:
        if bag.label not in _LABEL_BYTE:
            raise FormatError(
                f"bag {bag.slide_id!r}: cache entries need an FN/PC label, "
                f"got {bag.label!r}"
            )
        encoded = bag.slide_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", _LABEL_BYTE[bag.label], bag.n_patches))
        for scale in SCALES:
            matrix = np.ascontiguousarray(bag.per_scale[scale], dtype="<f4")
            chunks.append(matrix.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.source}: truncated while reading {what}", offset=self.pos
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_cache(path: str | Path) -> list[FeatureBag]:
    """Parse a cache file; format violations carry the failing byte offset."""
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a feature cache", offset=0)
    version, count = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}", offset=4)
    bags = []
    for b in range(count):
        (id_len,) = r.unpack("<H", f"bag {b} id length")
        slide_id = r.take(id_len, f"bag {b} id").decode("utf-8")
        label_byte, n = r.unpack("<BI", f"bag {b} header")
        if label_byte not in _BYTE_LABEL:
            raise FormatError(
                f"{path}: bag {slide_id!r} has unknown label byte {label_byte}",
                offset=r.pos - 5,
            )
        per_scale = {}
        for scale in SCALES:
            offset = r.pos
            raw = r.take(n * FEATURE_DIM * 4, f"bag {slide_id!r} scale {scale}")
            matrix = np.frombuffer(raw, dtype="<f4").reshape(n, FEATURE_DIM)
            if not np.all(np.isfinite(matrix)):
                raise FormatError(
                    f"{path}: non-finite feature values in bag {slide_id!r} "
                    f"scale {scale}", offset=offset,
                )
            per_scale[scale] = matrix.astype(np.float32)
        bags.append(FeatureBag(slide_id=slide_id, label=_BYTE_LABEL[label_byte],
                               per_scale=per_scale))
    if r.pos != len(data):
        raise FormatError(
            f"{path}: {len(data) - r.pos} trailing bytes after last bag",
            offset=r.pos,
        )
    return bags
