"""Sparse tensor storage, factor models, and evaluation metrics.

An N-dimensional partially observed tensor is kept in coordinate form: one
shared entry list (sorted lexicographically by index tuple, the *canonical
order*) plus, for every mode, a grouped index that lists the positions of
each row's entries.  All mode/row/column indices are 0-based inside the
library; the only 1-based surface is :class:`TensorEntry`, which mirrors
the conventional notation used in data files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class TensorEntry(NamedTuple):
    """One observed cell: 1-based indices (index n in [1, I_n]) and a value."""

    indices: tuple[int, ...]
    value: float


@dataclass(frozen=True)
class SparseTensorStore:
    """Immutable observed-entry set with per-mode row indexes.

    ``idx`` holds 0-based indices, shape (nnz, n_modes), canonical order.
    ``mode_perm[n]`` lists entry positions sorted by (row in mode n,
    canonical order) and ``mode_ptr[n]`` delimits each row's slice, so the
    bucket of row ``i`` in mode ``n`` is
    ``mode_perm[n][mode_ptr[n][i]:mode_ptr[n][i+1]]``.  Bucket positions are
    ascending, which keeps every accumulation in canonical entry order.
    """

    mode_lengths: tuple[int, ...]
    idx: np.ndarray
    values: np.ndarray
    mode_perm: tuple[np.ndarray, ...] = field(repr=False)
    mode_ptr: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def n_modes(self) -> int:
        return len(self.mode_lengths)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def bucket(self, mode: int, row: int) -> np.ndarray:
        """Positions (into the entry list) of row ``row``'s entries in ``mode``."""
        ptr = self.mode_ptr[mode]
        return self.mode_perm[mode][ptr[row]:ptr[row + 1]]

    def bucket_sizes(self, mode: int) -> np.ndarray:
        """|Omega^(n)_i| for every row i of ``mode``."""
        return np.diff(self.mode_ptr[mode])

    def entries(self) -> list[TensorEntry]:
        """Entries as 1-based :class:`TensorEntry` records, canonical order."""
        return [
            TensorEntry(tuple(int(i) + 1 for i in row), float(v))
            for row, v in zip(self.idx, self.values)
        ]


def _index_mode(idx: np.ndarray, length: int, mode: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.argsort(idx[:, mode], kind="stable")
    rows_sorted = idx[perm, mode]
    ptr = np.searchsorted(rows_sorted, np.arange(length + 1))
    return perm, ptr


def store_from_arrays(
    idx: np.ndarray, values: np.ndarray, mode_lengths: Sequence[int]
) -> SparseTensorStore:
    """Build a store from 0-based index/value arrays.

    Sorts into canonical order, rejects out-of-range indices and duplicate
    tuples, and builds the per-mode grouped indexes.
    """
    mode_lengths = tuple(int(length) for length in mode_lengths)
    n_modes = len(mode_lengths)
    if any(length < 0 for length in mode_lengths):
        raise ValueError("mode lengths must be nonnegative")
    idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64).reshape(-1, n_modes))
    values = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(-1))
    if idx.shape[0] != values.shape[0]:
        raise ValueError("index and value counts differ")

    for n, length in enumerate(mode_lengths):
        bad = np.flatnonzero((idx[:, n] < 0) | (idx[:, n] >= length))
        if bad.size:
            p = int(bad[0])
            raise ValueError(
                f"entry {p}: mode {n} index {int(idx[p, n]) + 1} outside [1, {length}]"
            )

    if idx.shape[0]:
        order = np.lexsort(tuple(idx[:, n] for n in range(n_modes - 1, -1, -1)))
        idx = np.ascontiguousarray(idx[order])
        values = values[order]
        dup = np.flatnonzero((np.diff(idx, axis=0) == 0).all(axis=1))
        if dup.size:
            tup = tuple(int(i) + 1 for i in idx[int(dup[0])])
            raise ValueError(f"duplicate index tuple {tup}")

    perms, ptrs = [], []
    for n, length in enumerate(mode_lengths):
        perm, ptr = _index_mode(idx, length, n)
        perms.append(perm)
        ptrs.append(ptr)
    return SparseTensorStore(mode_lengths, idx, values, tuple(perms), tuple(ptrs))


def build_store(
    entries: Iterable[TensorEntry], mode_lengths: Sequence[int]
) -> SparseTensorStore:
    """Build a :class:`SparseTensorStore` from 1-based entries."""
    mode_lengths = tuple(int(length) for length in mode_lengths)
    n_modes = len(mode_lengths)
    rows = []
    vals = []
    for p, entry in enumerate(entries):
        if len(entry.indices) != n_modes:
            raise ValueError(
                f"entry {p}: expected {n_modes} indices, got {len(entry.indices)}"
            )
        rows.append(entry.indices)
        vals.append(entry.value)
    idx = np.asarray(rows, dtype=np.int64).reshape(-1, n_modes) - 1
    values = np.asarray(vals, dtype=np.float64)
    return store_from_arrays(idx, values, mode_lengths)


@dataclass
class FactorModel:
    """Rank-K factor matrices, one (I_n, K) matrix per mode."""

    rank: int
    lam: float
    matrices: list[np.ndarray]

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        for n, mat in enumerate(self.matrices):
            if mat.ndim != 2 or mat.shape[1] != self.rank:
                raise ValueError(f"factor {n} is not (I_n, {self.rank})")
            if not np.isfinite(mat).all():
                raise ValueError(f"factor {n} has non-finite entries")

    @property
    def n_modes(self) -> int:
        return len(self.matrices)

    def copy(self) -> "FactorModel":
        return FactorModel(self.rank, self.lam, [m.copy() for m in self.matrices])


RESIDUAL = "residual"
AUGMENTED = "augmented"


@dataclass
class ResidualState:
    """Per-entry residual values aligned with a store's entry list.

    ``kind`` is either :data:`RESIDUAL` (r = x - reconstruction) or
    :data:`AUGMENTED` (r-hat, the residual with the contribution of
    ``columns`` added back).
    """

    values: np.ndarray
    kind: str = RESIDUAL
    columns: tuple[int, ...] | None = None


def predict_entries(model: FactorModel, idx: np.ndarray) -> np.ndarray:
    """Model reconstruction for a batch of 0-based index rows."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, model.n_modes)
    prod = model.matrices[0][idx[:, 0]].copy()
    for n in range(1, model.n_modes):
        prod *= model.matrices[n][idx[:, n]]
    return prod.sum(axis=1)


def reconstruct(model: FactorModel, indices: Sequence[int]) -> float:
    """Reconstruction at one cell; ``indices`` are 1-based like TensorEntry."""
    idx0 = np.asarray(indices, dtype=np.int64) - 1
    if idx0.shape != (model.n_modes,):
        raise ValueError(f"expected {model.n_modes} indices, got {idx0.shape}")
    for n, length in enumerate(m.shape[0] for m in model.matrices):
        if not 0 <= idx0[n] < length:
            raise ValueError(f"mode {n} index {indices[n]} outside [1, {length}]")
    return float(predict_entries(model, idx0[np.newaxis, :])[0])


def regularization_penalty(
    model: FactorModel, store: SparseTensorStore | None = None,
    regularization: str = "plain",
) -> float:
    """lambda * sum of squared factor norms, plain or row-weighted by |Omega^(n)_i|."""
    if regularization == "plain":
        return model.lam * float(sum((m * m).sum() for m in model.matrices))
    if regularization == "weighted":
        if store is None:
            raise ValueError("weighted regularization needs the store's row counts")
        total = 0.0
        for n, mat in enumerate(model.matrices):
            total += float(((mat * mat).sum(axis=1) * store.bucket_sizes(n)).sum())
        return model.lam * total
    raise ValueError(f"unknown regularization {regularization!r}")


def loss(
    model: FactorModel, store: SparseTensorStore, regularization: str = "plain"
) -> float:
    """Squared error over the observed set plus the regularization penalty."""
    if model.n_modes != store.n_modes:
        raise ValueError("model and store dimensions differ")
    err = store.values - predict_entries(model, store.idx)
    return float(err @ err) + regularization_penalty(model, store, regularization)


def rmse(model: FactorModel, test_entries: Sequence[TensorEntry]) -> float:
    """Root mean square error of the model on held-out entries."""
    if len(test_entries) == 0:
        raise ValueError("empty test set")
    idx = np.asarray([e.indices for e in test_entries], dtype=np.int64) - 1
    vals = np.asarray([e.value for e in test_entries], dtype=np.float64)
    err = vals - predict_entries(model, idx)
    return float(np.sqrt((err @ err) / err.size))


def rmse_arrays(model: FactorModel, idx: np.ndarray, vals: np.ndarray) -> float:
    """RMSE over 0-based index/value arrays (internal fast path)."""
    if vals.size == 0:
        raise ValueError("empty test set")
    err = vals - predict_entries(model, idx)
    return float(np.sqrt((err @ err) / err.size))


def verify_residual(
    residual: ResidualState, store: SparseTensorStore, model: FactorModel
) -> float:
    """Max absolute deviation of ``residual`` from x - reconstruction."""
    if residual.kind != RESIDUAL:
        raise ValueError("verify_residual expects a plain residual state")
    expected = store.values - predict_entries(model, store.idx)
    if residual.values.size == 0:
        return 0.0
    return float(np.max(np.abs(residual.values - expected)))
