"""Random-k sparsification with scaled (index, value) uplink messages."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigurationError

HEADER = struct.Struct("<III")  # client_id, round, k
ENTRY = struct.Struct("<Id")  # index, value


@dataclass(frozen=True)
class CoordinateMask:
    selected: np.ndarray
    d: int

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64)
        if sel.ndim != 1 or not 1 <= sel.size <= self.d:
            raise ConfigurationError(f"mask needs 1 <= k <= d={self.d}, got k={sel.size}")
        if np.any(sel < 0) or np.any(sel >= self.d):
            raise ConfigurationError("mask index out of range")
        sel = np.sort(sel)
        if np.any(np.diff(sel) == 0):
            raise ConfigurationError("mask indices must be distinct")
        object.__setattr__(self, "selected", sel)

    @property
    def k(self) -> int:
        return int(self.selected.size)


@dataclass(frozen=True)
class SparseUpdate:
    mask: CoordinateMask
    values: np.ndarray
    round: int = 0
    client_id: int = 0

    @property
    def k(self) -> int:
        return self.mask.k

    @property
    def d(self) -> int:
        return self.mask.d


def sample_mask(d: int, k: int, rng: np.random.Generator) -> CoordinateMask:
    """Uniform k-subset of ``range(d)`` by a partial Fisher-Yates shuffle.

    Consumes exactly ``k`` integer draws from ``rng``.
    """
    if not 1 <= k <= d:
        raise ConfigurationError(f"need 1 <= k <= d, got k={k}, d={d}")
    idx = np.arange(d)
    for j in range(k):
        r = int(rng.integers(j, d))
        idx[j], idx[r] = idx[r], idx[j]
    return CoordinateMask(idx[:k], d)


def apply(x, mask: CoordinateMask, round: int = 0, client_id: int = 0) -> SparseUpdate:
    x = np.asarray(x, dtype=float)
    if x.shape != (mask.d,):
        raise ConfigurationError(f"vector of shape {x.shape} for a {mask.d}-dim mask")
    scale = mask.d / mask.k
    return SparseUpdate(mask, scale * x[mask.selected], round, client_id)


def expand(u: SparseUpdate) -> np.ndarray:
    out = np.zeros(u.d)
    out[u.mask.selected] = u.values
    return out


def sparsify(x, k: int, rng: np.random.Generator) -> np.ndarray:
    """Dense ``S(x)`` with a freshly sampled mask."""
    x = np.asarray(x, dtype=float)
    return expand(apply(x, sample_mask(x.shape[0], k, rng)))


def all_masks(d: int, k: int):
    """Every k-subset of ``range(d)``, for exact-enumeration checks."""
    for c in combinations(range(d), k):
        yield CoordinateMask(np.array(c), d)


def message_size(k: int) -> int:
    return HEADER.size + k * ENTRY.size


def serialize(u: SparseUpdate) -> bytes:
    parts = [HEADER.pack(u.client_id, u.round, u.k)]
    parts.extend(ENTRY.pack(int(i), float(v)) for i, v in zip(u.mask.selected, u.values))
    return b"".join(parts)


def deserialize(buf: bytes, d: int) -> SparseUpdate:
    client_id, rnd, k = HEADER.unpack_from(buf, 0)
    if len(buf) != message_size(k):
        raise ConfigurationError(f"record of {len(buf)} bytes does not hold {k} entries")
    idx = np.empty(k, dtype=np.int64)
    vals = np.empty(k)
    for j in range(k):
        idx[j], vals[j] = ENTRY.unpack_from(buf, HEADER.size + j * ENTRY.size)
    order = np.argsort(idx)
    return SparseUpdate(CoordinateMask(idx, d), vals[order], rnd, client_id)
