"""Versioned binary weight checkpoints.

Layout: magic "SPW2", version u32, flags u8 (bit 0: optimizer moments
present), adam step u64, entry count u32; then per entry a u16 name length,
UTF-8 name, u8 rank, u32 dims, and the little-endian float64 payload.
Entry names are prefixed by role: "p:" parameters, "b:" buffers, and
"m:" / "v:" first and second Adam moments keyed by parameter name.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"SPW2"
_VERSION = 1


def _write_entry(f, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    arr = np.asarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f8").tobytes())


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray] | None = None,
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray], int] | None = None,
) -> Path:
    path = Path(path)
    buffers = buffers or {}
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(params):
        entries.append((f"p:{name}", params[name]))
    for name in sorted(buffers):
        entries.append((f"b:{name}", buffers[name]))
    adam_t = 0
    if moments is not None:
        m, v, adam_t = moments
        for name in sorted(m):
            entries.append((f"m:{name}", m[name]))
        for name in sorted(v):
            entries.append((f"v:{name}", v[name]))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IBQ", _VERSION, 1 if moments is not None else 0, adam_t))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)
    return path


def load_checkpoint(path: str | Path):
    """Returns (params, buffers, moments-or-None)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, flags, adam_t = struct.unpack("<IBQ", raw[4:17])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", raw[17:21])
    pos = 21
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
        role, key = name.split(":", 1)
        {"p": params, "b": buffers, "m": m, "v": v}[role][key] = arr
    moments = (m, v, adam_t) if flags & 1 else None
    return params, buffers, moments
