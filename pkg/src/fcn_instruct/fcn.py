"""Functional connectivity construction, windowing and graph structure.

Everything here is a pure function of its inputs. Arrays handed out by the
dataclasses are marked read-only so they can be shared between workers.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FCN_MAGIC = b"FCN1"


class InvalidInputError(ValueError):
    """Raised when an operation receives data that violates its contract."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BoldSeries:
    """T x D block of BOLD samples (rows are time points, columns ROIs)."""

    subject_id: str
    samples: np.ndarray
    window_origin: tuple[str, int] | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2:
            raise InvalidInputError(f"samples must be 2-D (T x D), got shape {s.shape}")
        if s.shape[0] < 2:
            raise InvalidInputError(f"need at least 2 time points, got {s.shape[0]}")
        if not np.all(np.isfinite(s)):
            raise InvalidInputError(f"series {self.subject_id!r} has non-finite samples")
        object.__setattr__(self, "samples", _frozen(s))

    @property
    def n_timepoints(self) -> int:
        return self.samples.shape[0]

    @property
    def n_rois(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class FcnMatrix:
    values: np.ndarray
    degenerate_rows: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise InvalidInputError(f"FCN must be square, got shape {v.shape}")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "degenerate_rows", frozenset(int(i) for i in self.degenerate_rows))

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class AdjacencyMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise InvalidInputError(f"adjacency must be square, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise InvalidInputError("adjacency entries must be 0 or 1")
        if np.any(np.diag(v)) or not np.array_equal(v, v.T):
            raise InvalidInputError("adjacency must be symmetric with a zero diagonal")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class NormalizedAdjacency:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


def pearson_fcn(series: BoldSeries) -> FcnMatrix:
    """Pearson correlation between every pair of ROI columns.

    Zero-variance columns have no defined correlation; they get 0 off the
    diagonal, 1 on it, and are listed in ``degenerate_rows``.
    """
    x = series.samples
    if x.shape[0] < 2:
        raise InvalidInputError("need at least 2 time points")
    xc = x - x.mean(axis=0, keepdims=True)
    c = xc.T @ xc
    ss = np.diag(c).copy()
    # relative tolerance: a column of identical floats can leave rounding residue
    flat = np.sqrt(ss) <= 1e-12 * np.maximum(np.abs(x).max(axis=0), 1.0) * np.sqrt(x.shape[0])
    ss[flat] = 1.0
    r = c / np.sqrt(np.outer(ss, ss))
    r[flat, :] = 0.0
    r[:, flat] = 0.0
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    _exact_duplicates(xc, flat, r)
    np.fill_diagonal(r, 1.0)
    return FcnMatrix(r, frozenset(np.flatnonzero(flat).tolist()))


def _exact_duplicates(xc: np.ndarray, flat: np.ndarray, r: np.ndarray) -> None:
    """Columns equal up to sign after centering correlate at exactly +-1 (BLAS rounding may miss it)."""
    groups: dict[bytes, list[tuple[int, float]]] = {}
    for d in np.flatnonzero(~flat):
        col = xc[:, d]
        sign = 1.0 if col[np.flatnonzero(col)[0]] > 0 else -1.0
        groups.setdefault((sign * col).tobytes(), []).append((int(d), sign))
    for members in groups.values():
        for i, si in members:
            for j, sj in members:
                if i != j:
                    r[i, j] = si * sj


def n_windows(T: int, L: int, P: int) -> int:
    """Number of complete windows of length L stepped by P over T samples."""
    return (T - L) // P + 1


def sliding_windows(series: BoldSeries, L: int = 100, P: int = 20) -> list[BoldSeries]:
    T = series.n_timepoints
    if L < 2:
        raise InvalidInputError(f"window length must be >= 2, got {L}")
    if L > T:
        raise InvalidInputError(f"window length {L} exceeds series length {T}")
    if P < 1:
        raise InvalidInputError(f"step must be >= 1, got {P}")
    out = []
    for k in range(n_windows(T, L, P)):
        start = k * P
        out.append(_window(f"{series.subject_id}_w{k:03d}", series.samples[start : start + L],
                           (series.subject_id, start)))
    return out


def _window(subject_id: str, view: np.ndarray, origin: tuple[str, int]) -> BoldSeries:
    # a slice of a validated read-only parent needs neither checks nor a copy
    w = object.__new__(BoldSeries)
    object.__setattr__(w, "subject_id", subject_id)
    object.__setattr__(w, "samples", view)
    object.__setattr__(w, "window_origin", origin)
    return w


def threshold_adjacency(fcn: FcnMatrix, tau: float = 0.5) -> AdjacencyMatrix:
    if not 0.0 <= tau <= 1.0:
        raise InvalidInputError(f"threshold must lie in [0, 1], got {tau}")
    a = (np.abs(fcn.values) >= tau).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return AdjacencyMatrix(a)


def normalize_adjacency(adj: AdjacencyMatrix) -> NormalizedAdjacency:
    """Symmetric renormalization D^-1/2 (A + I) D^-1/2, degrees taken from A + I."""
    a_hat = adj.values + np.eye(adj.values.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    out = inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]
    return NormalizedAdjacency((out + out.T) / 2.0)


# --- persistence -----------------------------------------------------------


def write_fcn_binary(fcn: FcnMatrix, path: str | Path) -> None:
    d = fcn.size
    payload = FCN_MAGIC + struct.pack("<I", d) + fcn.values.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(payload)


def read_fcn_binary(path: str | Path) -> FcnMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != FCN_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {raw[:4]!r}")
    (d,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != 8 * d * d:
        raise InvalidInputError(f"{path}: expected {8 * d * d} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").reshape(d, d)
    # degenerate rows are recoverable from the stored values: all-zero off-diagonal
    off = values - np.diag(np.diag(values))
    degenerate = np.flatnonzero(~off.any(axis=1)) if d > 1 else np.array([], dtype=int)
    return FcnMatrix(values, frozenset(degenerate.tolist()))


def _matrix_csv(values: np.ndarray, labels: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(labels))
    for lab, row in zip(labels, values):
        w.writerow([lab] + [repr(float(v)) for v in row])
    return buf.getvalue()


def write_fcn_csv(fcn: FcnMatrix, path: str | Path, labels: list[str] | None = None) -> None:
    labels = labels or [f"roi_{i:03d}" for i in range(fcn.size)]
    Path(path).write_text(_matrix_csv(fcn.values, labels))


def read_fcn_csv(path: str | Path) -> FcnMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return FcnMatrix(values)


def write_bold_csv(series: BoldSeries, path: str | Path, labels: list[str] | None = None) -> None:
    labels = labels or [f"roi_{i:03d}" for i in range(series.n_rois)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(labels)
    for row in series.samples:
        w.writerow([repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def read_bold_csv(path: str | Path, subject_id: str | None = None) -> BoldSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    samples = np.array([[float(v) for v in r] for r in rows[1:]])
    return BoldSeries(subject_id or Path(path).stem, samples)
