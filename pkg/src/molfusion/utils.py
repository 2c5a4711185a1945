"""Seeded random streams, worker caps and atomic file writes."""
from __future__ import annotations

import os
import tempfile
import zlib
from pathlib import Path

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (init, shuffle, mask, ...).

    Streams are keyed by name, so drawing more from one never shifts another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def worker_count() -> int:
    n = os.cpu_count() or 1
    cap = os.environ.get("MOLFUSION_THREADS")
    return max(1, min(n, int(cap))) if cap else n


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
