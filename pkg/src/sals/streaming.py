"""Out-of-core execution of the subset-ALS schedule.

Residual entries live in per-mode binary caches on disk (grouped by the
mode's rows) and factor matrices live in a column-addressable store; only
the active C columns of each factor are held in memory at a time.  Per
column subset the engine streams each mode's residual cache to materialize
the augmented residual on disk, streams that cache once per (inner
iteration, mode) to refit rows, and streams it again to write the residual
back.  A residency meter counts live factor-matrix values; its peak stays
at C * sum(I_n) during the loop (plus a transient of one full factor per
mode while the initial model is written out).

The row updates reuse the serial kernel on identically ordered arrays, so
a streaming run reproduces the in-memory model bit for bit.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accounting import ResidencyMeter, SolveStats
from .dataio import CacheManifest, CacheWriter, cache_name, write_residual_caches
from .solver import (
    IterationRecord,
    ProgressHook,
    SolverParams,
    WEIGHTED,
    _test_arrays,
    choose_columns,
    normal_eq_arrays,
    rng_streams,
    solve_row,
    subset_products,
)
from .tensor import FactorModel, SparseTensorStore


class ColumnStore:
    """Factor matrices on disk, one column-major file per mode.

    Columns are contiguous on disk, so loading or storing the active subset
    touches exactly C * I_n values per mode.  All loads and releases run
    through one :class:`ResidencyMeter`.
    """

    def __init__(self, directory, mode_lengths, rank: int, meter: ResidencyMeter):
        self.directory = Path(directory)
        self.mode_lengths = tuple(mode_lengths)
        self.rank = rank
        self.meter = meter
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, mode: int) -> Path:
        return self.directory / f"factor_{mode}.bin"

    def write_full(self, mode: int, matrix: np.ndarray) -> None:
        """Write one full factor matrix (init only; metered transiently)."""
        length = self.mode_lengths[mode]
        self.meter.add(length * self.rank)
        with open(self._path(mode), "wb") as fh:
            fh.write(np.asfortranarray(matrix, dtype="<f8").tobytes(order="F"))
        self.meter.release(length * self.rank)

    def load_columns(self, mode: int, columns: np.ndarray) -> np.ndarray:
        length = self.mode_lengths[mode]
        slab = np.empty((length, columns.size))
        with open(self._path(mode), "rb") as fh:
            for j, k in enumerate(columns):
                fh.seek(int(k) * length * 8)
                slab[:, j] = np.frombuffer(fh.read(length * 8), dtype="<f8")
        self.meter.add(slab.size)
        return slab

    def store_columns(self, mode: int, columns: np.ndarray, slab: np.ndarray) -> None:
        length = self.mode_lengths[mode]
        with open(self._path(mode), "r+b") as fh:
            for j, k in enumerate(columns):
                fh.seek(int(k) * length * 8)
                fh.write(np.ascontiguousarray(slab[:, j], dtype="<f8").tobytes())

    def release(self, slab: np.ndarray) -> None:
        self.meter.release(slab.size)

    def read_model(self, lam: float) -> FactorModel:
        """Materialize the full model; meant for use after the metered loop."""
        mats = []
        for n, length in enumerate(self.mode_lengths):
            raw = np.frombuffer(self._path(n).read_bytes(), dtype="<f8")
            mats.append(np.ascontiguousarray(raw.reshape(length, self.rank, order="F")))
        return FactorModel(self.rank, lam, mats)


@dataclass
class StreamingRun:
    """Handle to a finished streaming run; the model stays on disk."""

    workdir: Path
    column_store: ColumnStore
    lam: float
    peak_resident_values: int
    stats: SolveStats
    records: list[IterationRecord] = field(default_factory=list)
    _tmp: tempfile.TemporaryDirectory | None = None

    def load_model(self) -> FactorModel:
        return self.column_store.read_model(self.lam)

    def cleanup(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


def _value_pass(
    manifest: CacheManifest,
    src: str,
    dst: str,
    slabs: list[np.ndarray],
    sign: float,
    worker: int,
    mode: int,
    stats: SolveStats,
    chunk_records: int,
) -> None:
    """Stream src, add/subtract the active-column reconstruction, write dst."""
    n_modes = len(slabs)
    writer = CacheWriter(manifest.path(dst), n_modes)

    def visit(idx, values, acc):
        out = values + sign * subset_products(slabs, idx)
        stats.flops += idx.shape[0] * slabs[0].shape[1] * n_modes
        writer.append(idx, out)
        return acc

    manifest.stream(src, visit, chunk_records=chunk_records)
    manifest.register(dst, writer.close(), worker, mode)
    manifest.save()


def _update_mode_streaming(
    manifest: CacheManifest,
    name: str,
    slabs: list[np.ndarray],
    mode: int,
    length: int,
    lam: float,
    weighted: bool,
    stats: SolveStats,
    chunk_records: int,
) -> None:
    """One row-refit pass over a mode-grouped r-hat cache."""
    n_modes = len(slabs)
    seen = np.zeros(length, dtype=bool)
    carry: list[tuple[np.ndarray, np.ndarray] | None] = [None]

    def refit(idx_rows: np.ndarray, vals: np.ndarray) -> None:
        idx_rows = np.ascontiguousarray(idx_rows)
        vals = np.ascontiguousarray(vals)
        row = int(idx_rows[0, mode])
        seen[row] = True
        lam_eff = lam * idx_rows.shape[0] if weighted else lam
        neq = normal_eq_arrays(slabs, idx_rows, vals, mode, stats)
        x, ok = solve_row(neq, lam_eff, stats)
        if ok:
            slabs[mode][row] = x
            stats.rows_updated += 1
        else:
            stats.rows_skipped += 1

    def visit(idx, values, acc):
        if carry[0] is not None:
            idx = np.concatenate([carry[0][0], idx])
            values = np.concatenate([carry[0][1], values])
            carry[0] = None
        rows = idx[:, mode]
        starts = np.flatnonzero(np.diff(rows)) + 1
        bounds = np.concatenate([[0], starts, [rows.size]])
        for g in range(bounds.size - 2):
            refit(idx[bounds[g]:bounds[g + 1]], values[bounds[g]:bounds[g + 1]])
        carry[0] = (idx[bounds[-2]:].copy(), values[bounds[-2]:].copy())
        return acc

    manifest.stream(name, visit, chunk_records=chunk_records)
    if carry[0] is not None:
        refit(*carry[0])
    empty_idx = np.empty((0, n_modes), dtype=np.int64)
    empty_vals = np.empty(0)
    for row in np.flatnonzero(~seen):
        lam_eff = 0.0 if weighted else lam
        neq = normal_eq_arrays(slabs, empty_idx, empty_vals, mode, stats)
        x, ok = solve_row(neq, lam_eff, stats)
        if ok:
            slabs[mode][int(row)] = x
            stats.rows_updated += 1
        else:
            stats.rows_skipped += 1


def _iteration_stats(
    colstore: ColumnStore,
    manifest: CacheManifest,
    store: SparseTensorStore,
    params: SolverParams,
    test: tuple[np.ndarray, np.ndarray] | None,
    chunk_records: int,
) -> tuple[float, float | None]:
    """Regularized loss and test RMSE, streaming columns C at a time."""

    def sq(idx, values, acc):
        return (0.0 if acc is None else acc) + float(values @ values)

    resid_sq = manifest.stream(cache_name("r", 0, 0), sq, chunk_records=chunk_records) or 0.0
    penalty = 0.0
    pred = None if test is None else np.zeros(test[1].size)
    weighted = params.regularization == WEIGHTED
    for start in range(0, params.rank, params.n_columns):
        cols = np.arange(start, min(start + params.n_columns, params.rank))
        slabs = [colstore.load_columns(n, cols) for n in range(store.n_modes)]
        for n, slab in enumerate(slabs):
            if weighted:
                penalty += float(((slab * slab).sum(axis=1) * store.bucket_sizes(n)).sum())
            else:
                penalty += float((slab * slab).sum())
        if pred is not None:
            pred += subset_products(slabs, test[0])
        for slab in slabs:
            colstore.release(slab)
    total = resid_sq + params.lam * penalty
    if test is None:
        return total, None
    err = test[1] - pred
    return total, float(np.sqrt((err @ err) / err.size))


def stream_factorize(
    store: SparseTensorStore,
    params: SolverParams,
    *,
    workdir=None,
    test_entries=None,
    on_iteration: ProgressHook | None = None,
    stats: SolveStats | None = None,
    chunk_records: int = 1 << 16,
) -> StreamingRun:
    """Run the full schedule out of core and leave the model on disk.

    Matches :func:`sals.solver.factorize` exactly for the same parameters
    and seed.  Use ``StreamingRun.load_model`` to materialize the result
    (that load happens outside the metered loop).
    """
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="sals-stream-")
        workdir = tmp.name
    workdir = Path(workdir)
    meter = ResidencyMeter()
    stats = stats if stats is not None else SolveStats()
    colstore = ColumnStore(workdir / "factors", store.mode_lengths, params.rank, meter)

    init_rng, order_rng = rng_streams(params.seed)
    colstore.write_full(0, np.zeros((store.mode_lengths[0], params.rank)))
    for n in range(1, store.n_modes):
        colstore.write_full(n, init_rng.random((store.mode_lengths[n], params.rank)))

    manifest = CacheManifest.create(workdir / "cache", store.n_modes)
    write_residual_caches(store, manifest, worker=0, chunk_records=chunk_records)

    test = _test_arrays(test_entries)
    weighted = params.regularization == WEIGHTED
    run = StreamingRun(workdir, colstore, params.lam, 0, stats, _tmp=tmp)
    t0 = time.perf_counter()
    for it in range(1, params.outer_iters + 1):
        for columns in choose_columns(params, order_rng):
            slabs = [colstore.load_columns(n, columns) for n in range(store.n_modes)]
            for n in range(store.n_modes):
                _value_pass(
                    manifest, cache_name("r", 0, n), cache_name("rhat", 0, n),
                    slabs, +1.0, 0, n, stats, chunk_records,
                )
            for _ in range(params.inner_iters):
                for n in range(store.n_modes):
                    _update_mode_streaming(
                        manifest, cache_name("rhat", 0, n), slabs, n,
                        store.mode_lengths[n], params.lam, weighted, stats, chunk_records,
                    )
            for n in range(store.n_modes):
                _value_pass(
                    manifest, cache_name("rhat", 0, n), cache_name("r", 0, n),
                    slabs, -1.0, 0, n, stats, chunk_records,
                )
            for n in range(store.n_modes):
                colstore.store_columns(n, columns, slabs[n])
                colstore.release(slabs[n])
        if on_iteration is not None:
            total, test_rmse = _iteration_stats(
                colstore, manifest, store, params, test, chunk_records
            )
            record = IterationRecord(it, time.perf_counter() - t0, total, test_rmse)
            run.records.append(record)
            on_iteration(record)
    run.peak_resident_values = meter.peak
    return run
