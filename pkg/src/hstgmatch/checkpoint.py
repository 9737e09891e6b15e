"""Binary checkpoint container: named float64 arrays, bit-exact round trip.

Layout: magic "HSTG", format version u32, then per array:
name length u32, UTF-8 name, rank u32, one u32 extent per axis,
row-major little-endian f64 payload. All integers little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"HSTG"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            if a.ndim == 0:
                a = a.reshape(1)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", a.ndim))
            for extent in a.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(a.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValidationError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version} in {path}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = arr.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValidationError(f"truncated or corrupt checkpoint {path}: {exc}") from exc
    if pos != len(blob):
        raise ValidationError(f"trailing bytes in checkpoint {path}")
    return out
