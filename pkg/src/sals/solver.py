"""Serial subset-ALS solver.

One outer iteration sweeps the K factor columns in subsets of C.  For each
subset the augmented residual r-hat is materialized, every mode's rows are
refit T_in times by solving small regularized normal equations, and the
residual is written back.  C=1 with a fixed column order is the
coordinate-descent specialization (see :func:`factorize_cdtf`); C=K with
T_in=1 is classic ALS.

Row updates gather per-bucket arrays and push them through one shared
kernel (:func:`normal_eq_arrays` + :func:`solve_row`).  The multi-worker
simulation reuses the same kernel on identically ordered arrays, which is
what makes distributed runs reproduce serial results bitwise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .accounting import SolveStats, note_rhat_allocation
from .tensor import (
    AUGMENTED,
    RESIDUAL,
    FactorModel,
    ResidualState,
    SparseTensorStore,
    regularization_penalty,
    rmse_arrays,
)

PLAIN = "plain"
WEIGHTED = "weighted"
FIXED = "fixed"
RANDOM_PER_OUTER = "random_per_outer"

_CHUNK = 1 << 16


@dataclass(frozen=True)
class SolverParams:
    """Configuration of one factorization run."""

    rank: int
    n_columns: int = 1          # C: columns updated jointly, 1 <= C <= rank
    outer_iters: int = 10       # T_out
    inner_iters: int = 1        # T_in
    lam: float = 0.0
    regularization: str = PLAIN
    column_order: str = RANDOM_PER_OUTER
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 1 <= self.n_columns <= self.rank:
            raise ValueError("n_columns must satisfy 1 <= C <= rank")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.regularization not in (PLAIN, WEIGHTED):
            raise ValueError(f"unknown regularization {self.regularization!r}")
        if self.column_order not in (FIXED, RANDOM_PER_OUTER):
            raise ValueError(f"unknown column order {self.column_order!r}")


@dataclass
class NormalEq:
    """The C x C system (B + lambda' I) a = c of one row update."""

    B: np.ndarray
    c: np.ndarray


@dataclass
class IterationRecord:
    """Progress snapshot emitted after each outer iteration."""

    iteration: int
    seconds: float
    loss: float
    test_rmse: float | None = None
    params_sent: int = 0
    params_received: int = 0
    flops: int = 0


ProgressHook = Callable[[IterationRecord], None]


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for model init and column-order draws.

    Serial, distributed, and streaming runs all derive their randomness
    through this one function, so equal seeds give equal schedules.
    """
    init_ss, order_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(order_ss)


def init_model(
    store: SparseTensorStore, params: SolverParams
) -> tuple[FactorModel, ResidualState]:
    """Zero first factor, uniform [0,1) others; residual starts equal to x."""
    init_rng, _ = rng_streams(params.seed)
    mats = [np.zeros((store.mode_lengths[0], params.rank))]
    for n in range(1, store.n_modes):
        mats.append(init_rng.random((store.mode_lengths[n], params.rank)))
    model = FactorModel(params.rank, params.lam, mats)
    residual = ResidualState(store.values.copy(), RESIDUAL)
    return model, residual


def choose_columns(
    params: SolverParams, rng: np.random.Generator | None = None
) -> list[np.ndarray]:
    """Disjoint column subsets covering 0..K-1, each of size C (last may be K mod C).

    Fixed order chunks the identity; the random policy chunks a fresh
    permutation drawn from ``rng``.
    """
    if params.column_order == FIXED:
        cols = np.arange(params.rank)
    else:
        if rng is None:
            raise ValueError("random column order needs a generator")
        cols = rng.permutation(params.rank)
    c = params.n_columns
    return [cols[s:s + c] for s in range(0, params.rank, c)]


def _chunks(n: int) -> Iterable[tuple[int, int]]:
    for start in range(0, n, _CHUNK):
        yield start, min(start + _CHUNK, n)


def subset_products(
    slabs: Sequence[np.ndarray], idx: np.ndarray, out_sum: np.ndarray | None = None
) -> np.ndarray:
    """Sum over the subset columns of the full mode product, per entry.

    ``slabs[n]`` is the (I_n, C) slice of factor n restricted to the active
    columns.  Products multiply modes left to right so every execution path
    produces identical floating-point results.
    """
    prod = slabs[0][idx[:, 0]]  # fancy indexing copies, safe to mutate
    for n in range(1, len(slabs)):
        prod *= slabs[n][idx[:, n]]
    s = prod.sum(axis=1)
    if out_sum is not None:
        out_sum[...] = s
        return out_sum
    return s


def compute_rhat(
    store: SparseTensorStore,
    residual: ResidualState,
    model: FactorModel,
    columns: np.ndarray,
    stats: SolveStats | None = None,
) -> ResidualState:
    """Augmented residual: r-hat = r + active-column reconstruction.

    Allocates a fresh buffer (counted by the allocation instrumentation);
    the input residual is left untouched.
    """
    if residual.kind != RESIDUAL:
        raise ValueError("compute_rhat expects a plain residual")
    columns = np.asarray(columns, dtype=np.int64)
    slabs = [m[:, columns] for m in model.matrices]
    note_rhat_allocation()
    vals = residual.values + subset_products(slabs, store.idx)
    if stats is not None:
        stats.flops += store.nnz * columns.size * store.n_modes
    return ResidualState(vals, AUGMENTED, tuple(int(k) for k in columns))


def update_residual(
    store: SparseTensorStore,
    rhat: ResidualState,
    model: FactorModel,
    columns: np.ndarray,
    stats: SolveStats | None = None,
) -> ResidualState:
    """Write the residual back: r = r-hat - updated-column reconstruction.

    Reuses the r-hat buffer in place; the input state is consumed.
    """
    if rhat.kind != AUGMENTED:
        raise ValueError("update_residual expects an augmented residual")
    columns = np.asarray(columns, dtype=np.int64)
    slabs = [m[:, columns] for m in model.matrices]
    rhat.values -= subset_products(slabs, store.idx)
    if stats is not None:
        stats.flops += store.nnz * columns.size * store.n_modes
    return ResidualState(rhat.values, RESIDUAL)


def normal_eq_arrays(
    slabs: Sequence[np.ndarray],
    idx_rows: np.ndarray,
    rhat_vals: np.ndarray,
    mode: int,
    stats: SolveStats | None = None,
) -> NormalEq:
    """Normal equations of one row from its gathered bucket arrays.

    ``idx_rows`` is the (P, N) block of entry indices of the bucket in
    canonical order, ``rhat_vals`` the matching r-hat values.  B and c
    accumulate over that order; empty buckets give zero systems.
    """
    n_modes = len(slabs)
    c_cols = slabs[mode].shape[1]
    G: np.ndarray | None = None
    for n in range(n_modes):
        if n == mode:
            continue
        g = slabs[n][idx_rows[:, n]]
        if G is None:
            G = g
        else:
            G *= g
    if G is None:  # 1-dimensional tensor: empty product
        G = np.ones((idx_rows.shape[0], c_cols))
    B = G.T @ G
    c = G.T @ rhat_vals
    if stats is not None:
        p = idx_rows.shape[0]
        stats.flops += p * c_cols * max(n_modes - 2, 0) + p * c_cols * c_cols + p * c_cols
    return NormalEq(B, c)


def build_normal_eq(
    store: SparseTensorStore,
    rhat: ResidualState,
    model: FactorModel,
    mode: int,
    row: int,
    columns: np.ndarray,
    stats: SolveStats | None = None,
) -> NormalEq:
    """Normal equations for one row of one mode over the active columns."""
    if rhat.kind != AUGMENTED or rhat.columns != tuple(int(k) for k in columns):
        raise ValueError("r-hat state does not match the requested columns")
    columns = np.asarray(columns, dtype=np.int64)
    slabs = [m[:, columns] for m in model.matrices]
    pos = store.bucket(mode, row)
    return normal_eq_arrays(slabs, store.idx[pos], rhat.values[pos], mode, stats)


def solve_row(
    neq: NormalEq, lam_eff: float, stats: SolveStats | None = None
) -> tuple[np.ndarray, bool]:
    """Solve (B + lambda' I) a = c by Cholesky factorization.

    Returns ``(solution, True)`` on success.  A singular system (possible
    only when lambda' = 0) returns ``(zeros, False)`` so the caller can keep
    the row's previous values.
    """
    if lam_eff < 0:
        raise ValueError("lam_eff must be nonnegative")
    if not (np.isfinite(neq.B).all() and np.isfinite(neq.c).all()):
        raise ValueError("non-finite normal equations")
    c_cols = neq.c.shape[0]
    A = neq.B + lam_eff * np.eye(c_cols)
    try:
        chol = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        x = scipy.linalg.cho_solve(chol, neq.c, check_finite=False)
    except scipy.linalg.LinAlgError:
        return np.zeros(c_cols), False
    if stats is not None:
        stats.flops += c_cols ** 3
    return x, True


def update_rows(
    slabs: list[np.ndarray],
    idx: np.ndarray,
    rhat_vals: np.ndarray,
    mode: int,
    rows: Iterable[int],
    bucket_of: Callable[[int], np.ndarray],
    lam: float,
    weighted: bool,
    stats: SolveStats | None = None,
) -> int:
    """Refit the given rows of ``slabs[mode]`` in place; returns skip count.

    Rows are independent; each solve reads only the other modes' slabs, so
    processing order does not affect the values.
    """
    skipped = 0
    slab = slabs[mode]
    for i in rows:
        pos = bucket_of(i)
        lam_eff = lam * pos.size if weighted else lam
        neq = normal_eq_arrays(slabs, idx[pos], rhat_vals[pos], mode, stats)
        x, ok = solve_row(neq, lam_eff, stats)
        if ok:
            slab[i] = x
            if stats is not None:
                stats.rows_updated += 1
        else:
            skipped += 1
            if stats is not None:
                stats.rows_skipped += 1
    return skipped


def update_mode(
    store: SparseTensorStore,
    rhat: ResidualState,
    model: FactorModel,
    mode: int,
    columns: np.ndarray,
    params: SolverParams,
    stats: SolveStats | None = None,
) -> int:
    """Refit every row of one mode's active columns; returns rows skipped."""
    if rhat.kind != AUGMENTED or rhat.columns != tuple(int(k) for k in columns):
        raise ValueError("r-hat state does not match the requested columns")
    columns = np.asarray(columns, dtype=np.int64)
    slabs = [m[:, columns] for m in model.matrices]  # fancy indexing copies
    skipped = update_rows(
        slabs, store.idx, rhat.values, mode,
        range(store.mode_lengths[mode]), lambda i: store.bucket(mode, i),
        params.lam, params.regularization == WEIGHTED, stats,
    )
    model.matrices[mode][:, columns] = slabs[mode]
    return skipped


def _emit(
    hook: ProgressHook | None,
    iteration: int,
    t0: float,
    model: FactorModel,
    resid_sq: float,
    store: SparseTensorStore,
    params: SolverParams,
    test: tuple[np.ndarray, np.ndarray] | None,
    flops: int,
) -> None:
    if hook is None:
        return
    total = resid_sq + regularization_penalty(model, store, params.regularization)
    test_rmse = None if test is None else rmse_arrays(model, test[0], test[1])
    hook(IterationRecord(iteration, time.perf_counter() - t0, total, test_rmse, 0, 0, flops))


def _test_arrays(test_entries) -> tuple[np.ndarray, np.ndarray] | None:
    if test_entries is None:
        return None
    idx = np.asarray([e.indices for e in test_entries], dtype=np.int64) - 1
    vals = np.asarray([e.value for e in test_entries], dtype=np.float64)
    return idx, vals


def factorize(
    store: SparseTensorStore,
    params: SolverParams,
    *,
    test_entries=None,
    on_iteration: ProgressHook | None = None,
    stats: SolveStats | None = None,
) -> FactorModel:
    """Run T_out outer iterations of subset-ALS and return the model.

    Per column subset: materialize r-hat once, run T_in sweeps updating
    modes 0..N-1, then write the residual back.  The progress hook fires
    after each outer iteration with the regularized loss (and test RMSE
    when a test set is supplied).
    """
    model, residual = init_model(store, params)
    _, order_rng = rng_streams(params.seed)
    test = _test_arrays(test_entries)
    stats = stats if stats is not None else SolveStats()
    t0 = time.perf_counter()
    flops_before = stats.flops
    for it in range(1, params.outer_iters + 1):
        for columns in choose_columns(params, order_rng):
            rhat = compute_rhat(store, residual, model, columns, stats)
            slabs = [m[:, columns] for m in model.matrices]
            for _ in range(params.inner_iters):
                for n in range(store.n_modes):
                    update_rows(
                        slabs, store.idx, rhat.values, n,
                        range(store.mode_lengths[n]), lambda i, n=n: store.bucket(n, i),
                        params.lam, params.regularization == WEIGHTED, stats,
                    )
            for n in range(store.n_modes):
                model.matrices[n][:, columns] = slabs[n]
            residual = update_residual(store, rhat, model, columns, stats)
        _emit(
            on_iteration, it, t0, model, float(residual.values @ residual.values),
            store, params, test, stats.flops - flops_before,
        )
        flops_before = stats.flops
    return model


def factorize_cdtf(
    store: SparseTensorStore,
    params: SolverParams,
    *,
    test_entries=None,
    on_iteration: ProgressHook | None = None,
    stats: SolveStats | None = None,
) -> FactorModel:
    """Coordinate-descent specialization: C=1, fixed column order, fused r-hat.

    Produces the same model as :func:`factorize` with ``n_columns=1`` and
    fixed order, but turns the residual buffer into r-hat in place (and back)
    with chunked passes, so no augmented buffer is ever allocated.
    """
    if params.n_columns != 1:
        raise ValueError("coordinate descent requires n_columns == 1")
    params = replace(params, column_order=FIXED)
    model, residual = init_model(store, params)
    vals = residual.values
    test = _test_arrays(test_entries)
    stats = stats if stats is not None else SolveStats()
    weighted = params.regularization == WEIGHTED
    t0 = time.perf_counter()
    flops_before = stats.flops
    for it in range(1, params.outer_iters + 1):
        for columns in choose_columns(params):
            slabs = [m[:, columns] for m in model.matrices]
            for start, end in _chunks(store.nnz):
                vals[start:end] += subset_products(slabs, store.idx[start:end])
            stats.flops += store.nnz * store.n_modes
            for _ in range(params.inner_iters):
                for n in range(store.n_modes):
                    update_rows(
                        slabs, store.idx, vals, n,
                        range(store.mode_lengths[n]), lambda i, n=n: store.bucket(n, i),
                        params.lam, weighted, stats,
                    )
            for n in range(store.n_modes):
                model.matrices[n][:, columns] = slabs[n]
            for start, end in _chunks(store.nnz):
                vals[start:end] -= subset_products(slabs, store.idx[start:end])
            stats.flops += store.nnz * store.n_modes
        _emit(
            on_iteration, it, t0, model, float(vals @ vals),
            store, params, test, stats.flops - flops_before,
        )
        flops_before = stats.flops
    return model
