"""Perturbation cache with a periodic refresh schedule and EMA blending."""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ARCHCACH"


def should_refresh(epoch: int, gap: float) -> bool:
    """True on epochs 0, gap, 2*gap, ...; an infinite gap refreshes only at epoch 0."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if gap == math.inf:
        return epoch == 0
    if gap < 1 or int(gap) != gap:
        raise ValueError(f"caching gap must be a positive integer or inf, got {gap!r}")
    return epoch % int(gap) == 0


def ema_update(old: np.ndarray | None, fresh: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * old + (1 - alpha) * fresh; with no previous entry, ``fresh`` as is."""
    if old is None:
        return fresh.copy()
    if old.shape != fresh.shape:
        raise ValueError(f"cached shape {old.shape} != fresh shape {fresh.shape}")
    return alpha * old + (1.0 - alpha) * fresh


class PerturbationCache:
    """Maps sample id to its stored perturbation.

    With ``memory_saving`` on, only a subset of ids is ever stored and a miss
    is a normal event (the caller reconstructs from neighbors). Otherwise a
    miss means the refresh schedule was violated and raises ``KeyError``.
    """

    def __init__(self, alpha: float, gap: float = 1, memory_saving: bool = False):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.alpha = alpha
        self.gap = gap
        self.memory_saving = memory_saving
        self.entries: dict[int, np.ndarray] = {}

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def put(self, sample_id: int, fresh: np.ndarray) -> np.ndarray:
        """EMA-blend ``fresh`` into the entry and return the stored value."""
        value = ema_update(self.entries.get(sample_id), fresh, self.alpha)
        self.entries[sample_id] = value
        return value

    def get(self, sample_id: int) -> np.ndarray | None:
        value = self.entries.get(sample_id)
        if value is None and not self.memory_saving and self.entries:
            raise KeyError(f"no cached perturbation for sample {sample_id}")
        return value

    def memory_footprint(self) -> tuple[int, int]:
        """(number of entries, number of stored scalars)."""
        return len(self.entries), int(sum(v.size for v in self.entries.values()))

    def dump(self, path: str | Path) -> None:
        """Write entries in id order as little-endian binary records."""
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(self.entries)))
            for sample_id in sorted(self.entries):
                value = self.entries[sample_id]
                rows, cols = value.shape
                fh.write(struct.pack("<QII", sample_id, rows, cols))
                fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_cache(path: str | Path) -> dict[int, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a cache snapshot")
    (count,) = struct.unpack_from("<I", data, 8)
    offset = 12
    entries = {}
    for _ in range(count):
        sample_id, rows, cols = struct.unpack_from("<QII", data, offset)
        offset += 16
        nbytes = rows * cols * 8
        entries[sample_id] = np.frombuffer(data, "<f8", rows * cols, offset).reshape(rows, cols).copy()
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return entries
