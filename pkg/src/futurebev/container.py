"""Checksummed named-array container files.

Samples and checkpoints are stored as uncompressed ``.npz`` archives (one
named numpy array per entry, dtype and shape carried by the npy headers)
plus one reserved ``__checksum__`` entry holding a sha256 digest of all
payload entries.  Writing the same arrays twice produces byte-identical
files, which is what makes dataset generation reproducible at the file
level, and the digest lets the loader reject silently corrupted files.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import DataError

CHECKSUM_KEY = "__checksum__"


def _digest(arrays: dict[str, np.ndarray]) -> bytes:
    """sha256 over (name, dtype, shape, raw bytes) of every entry, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(str(arr.dtype).encode("ascii"))
        h.update(b"\x00")
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(arr.tobytes())
    return h.digest()


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` to ``path`` with an embedded checksum entry.

    Object-dtype arrays are rejected: every entry must have a fixed binary
    layout so the checksum is well defined.
    """
    clean: dict[str, np.ndarray] = {}
    for name, value in arrays.items():
        arr = np.asarray(value)
        if arr.dtype == object:
            raise DataError(f"refusing to store object-dtype entry {name!r}")
        if name == CHECKSUM_KEY:
            raise DataError(f"entry name {CHECKSUM_KEY!r} is reserved")
        clean[name] = arr
    checksum = np.frombuffer(_digest(clean), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **clean, **{CHECKSUM_KEY: checksum})


def load_arrays(path: str | Path, verify: bool = True) -> dict[str, np.ndarray]:
    """Load a container written by :func:`save_arrays`.

    Raises :class:`DataError` if the file is missing, has no checksum
    entry, or the stored digest does not match the recomputed one.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"container file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except Exception as exc:  # zipfile / npy header corruption
        raise DataError(f"unreadable container {path}: {exc}") from exc
    if verify:
        if CHECKSUM_KEY not in arrays:
            raise DataError(f"container {path} has no checksum entry")
        stored = arrays.pop(CHECKSUM_KEY).tobytes()
        if stored != _digest(arrays):
            raise DataError(f"checksum mismatch in {path}")
    else:
        arrays.pop(CHECKSUM_KEY, None)
    return arrays
