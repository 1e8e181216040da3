"""LIBSVM parsing, synthetic logistic data, and even client partitioning."""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ParseError
from .model import ClientDataset
from .rng import PARTITION, SYNTH, make_rng


@dataclass(frozen=True)
class RawDataset:
    features: np.ndarray
    labels: np.ndarray
    source: str = ""

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RawDataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<f8").tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {"source": self.source, "N": self.N, "d": self.d, "checksum": self.checksum()}


_LABELS = {0.0: -1.0, 1.0: 1.0, -1.0: -1.0}


def _parse_label(tok, lineno):
    try:
        raw = float(tok)
    except ValueError:
        raise ParseError(lineno, tok, "non-numeric label") from None
    if raw not in _LABELS:
        raise ParseError(lineno, tok, "label must be one of 0, 1, -1, +1")
    return _LABELS[raw]


def parse_libsvm(stream: TextIO | Iterable[str] | str, n_features: int | None = None,
                 source: str = "") -> RawDataset:
    """Read ``label idx:val ...`` lines into a dense dataset.

    Indices are 1-based and strictly ascending; labels 0/1 map to -1/+1.
    Blank lines and ``#`` comments are skipped.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    labels = []
    rows = []
    d = 0
    for lineno, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        labels.append(_parse_label(toks[0], lineno))
        entries = {}
        last = 0
        for tok in toks[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(lineno, tok, "expected index:value")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(lineno, tok, "malformed index:value pair") from None
            if not math.isfinite(val):
                raise ParseError(lineno, tok, "non-finite value")
            if idx < 1:
                raise ParseError(lineno, tok, "indices are 1-based")
            if idx <= last:
                raise ParseError(lineno, tok, "indices must be strictly ascending")
            last = idx
            entries[idx - 1] = val
        d = max(d, last)
        rows.append(entries)
    if n_features is not None:
        if n_features < d:
            raise ConfigurationError(f"data has index {d} beyond n_features={n_features}")
        d = n_features
    features = np.zeros((len(rows), d))
    for i, entries in enumerate(rows):
        for j, v in entries.items():
            features[i, j] = v
    return RawDataset(features, np.array(labels, dtype=float), source)


def load_libsvm(path, n_features=None) -> RawDataset:
    with open(path) as fh:
        return parse_libsvm(fh, n_features=n_features, source=str(path))


def format_libsvm(ds: RawDataset) -> str:
    """Inverse of :func:`parse_libsvm`.

    Every line carries its last coordinate explicitly so the dimension survives
    a round trip even when trailing features are zero.
    """
    out = []
    for a, b in zip(ds.features, ds.labels):
        parts = ["+1" if b > 0 else "-1"]
        nz = np.flatnonzero(a)
        if ds.d and (nz.size == 0 or nz[-1] != ds.d - 1):
            nz = np.append(nz, ds.d - 1)
        parts.extend(f"{j + 1}:{float(a[j])!r}" for j in nz)
        out.append(" ".join(parts))
    return "\n".join(out) + ("\n" if out else "")


def normalize_rows(ds: RawDataset, max_norm: float = 1.0) -> RawDataset:
    """Scale all features by one factor so the largest row norm is ``max_norm``."""
    top = float(np.max(np.linalg.norm(ds.features, axis=1))) if ds.N else 0.0
    if top <= max_norm:
        return ds
    return RawDataset(ds.features * (max_norm / top), ds.labels, ds.source)


def generate_synthetic(d: int, n_samples: int, margin: float = 10.0, seed: int = 0,
                       feature_scale: float = 1.0, half_width: float = 0.5) -> RawDataset:
    """Noisy linearly separable logistic data.

    Features have coordinates in ``[-feature_scale/sqrt(d), feature_scale/sqrt(d)]``,
    so ``||a|| <= feature_scale`` with mass spread across coordinates.  Labels
    follow ``sign(a.w*)`` for a ground truth ``w*`` drawn in the box, flipped
    with probability ``sigmoid(-margin |a.w*| sqrt(d))``; ``margin=inf`` means no flips.
    """
    if d < 1 or n_samples < 1:
        raise ConfigurationError("need d >= 1 and n_samples >= 1")
    rng = make_rng(seed, SYNTH)
    w_star = rng.uniform(-half_width, half_width, size=d)
    a = rng.uniform(-1.0, 1.0, size=(n_samples, d)) * (feature_scale / math.sqrt(d))
    z = a @ w_star
    clean = np.where(z >= 0, 1.0, -1.0)
    u = rng.uniform(size=n_samples)
    if math.isinf(margin):
        flip = np.zeros(n_samples, dtype=bool)
    else:
        flip = u < expit(-margin * np.abs(z) * math.sqrt(d))
    labels = np.where(flip, -clean, clean)
    return RawDataset(a, labels, f"synthetic(d={d},N={n_samples},margin={margin},seed={seed})")


@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int
    per_client_m: int
    blocks: tuple
    dropped: tuple

    @property
    def assignment(self) -> dict:
        return {int(j): i for i, block in enumerate(self.blocks) for j in block}

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


def partition(ds: RawDataset, n: int, seed: int = 0) -> PartitionPlan:
    """Random even split into ``n`` blocks of ``floor(N/n)``; the remainder is dropped."""
    if n < 1:
        raise ConfigurationError("need at least one client")
    if ds.N == 0:
        raise ConfigurationError("cannot partition an empty dataset")
    if n > ds.N:
        raise ConfigurationError(f"{n} clients for {ds.N} samples")
    perm = make_rng(seed, PARTITION).permutation(ds.N)
    m = ds.N // n
    blocks = tuple(tuple(int(j) for j in perm[i * m:(i + 1) * m]) for i in range(n))
    return PartitionPlan(n, m, blocks, tuple(int(j) for j in perm[n * m:]))


def client_datasets(ds: RawDataset, plan: PartitionPlan) -> list[ClientDataset]:
    return [ClientDataset(ds.features[list(b)], ds.labels[list(b)]) for b in plan.blocks]
