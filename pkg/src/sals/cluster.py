"""Deterministic multi-worker simulation of the distributed solver.

M long-lived worker threads each own a row partition, a private replica of
the residual values for the entries they hold, and the current column slabs
of every factor matrix.  Workers exchange updated rows only through a
broadcast bus; a barrier separates every step, and each broadcast carries a
(outer, subset, inner, mode) stamp that receivers verify.  The master model
plays the role of the shared file system: workers read the active columns
from it at the start of a subset and the lead worker writes them back at
the end; neither transfer counts as communication.

Because every worker owns the complete entry bucket of each row it updates
(in canonical order) and runs the same row kernel as the serial solver, the
final model is bitwise identical to a serial run with the same seed.
"""
from __future__ import annotations

import csv
import queue
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .accounting import SolveStats
from .partition import RowAssignment
from .solver import (
    IterationRecord,
    ProgressHook,
    SolverParams,
    WEIGHTED,
    _test_arrays,
    choose_columns,
    init_model,
    rng_streams,
    subset_products,
    update_rows,
)
from .tensor import (
    FactorModel,
    SparseTensorStore,
    regularization_penalty,
    rmse_arrays,
)


class ClusterError(RuntimeError):
    """A worker failed; carries per-worker diagnostics."""


class Stamp(NamedTuple):
    outer: int
    subset: int
    inner: int
    mode: int


class Message(NamedTuple):
    sender: int
    stamp: Stamp
    mode: int
    rows: np.ndarray
    values: np.ndarray


@dataclass
class WorkerState:
    """One machine's private shard of the problem."""

    machine: int
    positions: np.ndarray                 # global entry positions (canonical order)
    idx: np.ndarray                       # local copy of the index rows
    values: np.ndarray                    # local copy of the observed values
    residual: np.ndarray                  # private residual replica
    owned_rows: list[np.ndarray]          # per mode, rows this machine updates
    buckets: list[dict[int, np.ndarray]]  # per mode, row -> local bucket positions
    lead_global: np.ndarray               # global positions owned via mode 0
    lead_local: np.ndarray                # the same entries' local positions


def distribute(store: SparseTensorStore, assignment: RowAssignment) -> list[WorkerState]:
    """Replicate entries to every machine whose row sets touch them."""
    owners = [
        assignment.owner_map(n, store.mode_lengths[n]) for n in range(store.n_modes)
    ]
    workers = []
    for m in range(assignment.n_machines):
        mask = np.zeros(store.nnz, dtype=bool)
        for n in range(store.n_modes):
            mask |= owners[n][store.idx[:, n]] == m
        positions = np.flatnonzero(mask)
        idx_local = store.idx[positions]
        vals_local = store.values[positions]
        buckets: list[dict[int, np.ndarray]] = []
        for n in range(store.n_modes):
            per_row: dict[int, np.ndarray] = {}
            for row in assignment.sets[m][n]:
                g = store.bucket(n, int(row))
                per_row[int(row)] = np.searchsorted(positions, g)
            buckets.append(per_row)
        lead_global = (
            np.concatenate([store.bucket(0, int(r)) for r in assignment.sets[m][0]])
            if assignment.sets[m][0].size
            else np.empty(0, dtype=np.int64)
        )
        lead_local = np.searchsorted(positions, lead_global)
        workers.append(
            WorkerState(
                m, positions, idx_local, vals_local, vals_local.copy(),
                [np.asarray(assignment.sets[m][n]) for n in range(store.n_modes)],
                buckets, lead_global, lead_local,
            )
        )
    return workers


@dataclass
class CommLog:
    """Parameters sent/received and work done, per worker and per iteration."""

    n_workers: int
    rank: int
    inner_iters: int
    sum_lengths: int
    sent: np.ndarray
    received: np.ndarray
    events: np.ndarray
    flops: np.ndarray
    iterations: list[dict] = field(default_factory=list)

    @classmethod
    def empty(cls, n_workers: int, rank: int, inner_iters: int, sum_lengths: int) -> "CommLog":
        zeros = lambda: np.zeros(n_workers, dtype=np.int64)
        return cls(n_workers, rank, inner_iters, sum_lengths, zeros(), zeros(), zeros(), zeros())

    def predicted_exchange(self) -> int:
        """Closed-form per-worker parameters exchanged per outer iteration."""
        if self.n_workers == 1:
            return 0
        return self.rank * self.inner_iters * self.sum_lengths


def comm_report(log: CommLog) -> list[dict]:
    """Per-(iteration, worker) measured traffic beside the closed-form prediction."""
    predicted = log.predicted_exchange()
    rows = []
    for rec in log.iterations:
        for m in range(log.n_workers):
            sent = int(rec["sent"][m])
            received = int(rec["received"][m])
            rows.append(
                {
                    "iteration": rec["iteration"],
                    "worker": m,
                    "sent": sent,
                    "received": received,
                    "exchanged": sent + received,
                    "predicted_exchange": predicted,
                    "flops": int(rec["flops"][m]),
                }
            )
    return rows


def export_comm_csv(log: CommLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "worker", "sent", "received", "flops"])
        for rec in log.iterations:
            for m in range(log.n_workers):
                writer.writerow(
                    [rec["iteration"], m, int(rec["sent"][m]),
                     int(rec["received"][m]), int(rec["flops"][m])]
                )


class _Bus:
    """Broadcast mailboxes plus the shared barrier."""

    def __init__(self, n_workers: int):
        self.n_workers = n_workers
        self.queues = [queue.SimpleQueue() for _ in range(n_workers)]
        self.barrier = threading.Barrier(n_workers)

    def broadcast(self, msg: Message) -> None:
        for m in range(self.n_workers):
            if m != msg.sender:
                self.queues[m].put(msg)

    def drain(self, me: int, stamp: Stamp) -> list[Message]:
        got = []
        for _ in range(self.n_workers - 1):
            msg = self.queues[me].get_nowait()
            if msg.stamp != stamp:
                raise AssertionError(
                    f"worker {me}: stamp {msg.stamp} from {msg.sender}, expected {stamp}"
                )
            got.append(msg)
        return got


@dataclass
class _RunContext:
    store: SparseTensorStore
    params: SolverParams
    master: FactorModel
    master_residual: np.ndarray
    schedule: list[list[np.ndarray]]
    bus: _Bus
    log: CommLog
    worker_stats: list[SolveStats]
    iter_sent: np.ndarray
    iter_received: np.ndarray
    iter_flops: np.ndarray
    test: tuple[np.ndarray, np.ndarray] | None
    on_iteration: ProgressHook | None
    check_replicas: bool
    fault_hook: Callable[[int, Stamp], None] | None
    t0: float = 0.0
    errors: list[tuple[int, str]] = field(default_factory=list)
    error_lock: threading.Lock = field(default_factory=threading.Lock)


def _worker_loop(ctx: _RunContext, ws: WorkerState) -> None:
    m = ws.machine
    n_modes = ctx.store.n_modes
    n_workers = ctx.bus.n_workers
    params = ctx.params
    weighted = params.regularization == WEIGHTED
    stats = ctx.worker_stats[m]
    barrier = ctx.bus.barrier
    replica = ws.residual
    flops_mark = stats.flops
    for it, subsets in enumerate(ctx.schedule, start=1):
        for si, columns in enumerate(subsets):
            n_cols = columns.size
            slabs = [ctx.master.matrices[n][:, columns] for n in range(n_modes)]
            replica += subset_products(slabs, ws.idx)
            stats.flops += ws.idx.shape[0] * n_cols * n_modes
            barrier.wait()  # r-hat complete everywhere before any row update
            for inner in range(params.inner_iters):
                for n in range(n_modes):
                    stamp = Stamp(it, si, inner, n)
                    if ctx.fault_hook is not None:
                        ctx.fault_hook(m, stamp)
                    update_rows(
                        slabs, ws.idx, replica, n, ws.owned_rows[n],
                        lambda i, n=n: ws.buckets[n].get(int(i), _EMPTY),
                        params.lam, weighted, stats,
                    )
                    if n_workers > 1:
                        payload = slabs[n][ws.owned_rows[n]]
                        ctx.bus.broadcast(Message(m, stamp, n, ws.owned_rows[n], payload))
                        ctx.iter_sent[m] += payload.size
                        ctx.log.sent[m] += payload.size
                        ctx.log.events[m] += 1
                    barrier.wait()  # all broadcasts of this step are delivered
                    if n_workers > 1:
                        for msg in ctx.bus.drain(m, stamp):
                            slabs[msg.mode][msg.rows] = msg.values
                            ctx.iter_received[m] += msg.values.size
                            ctx.log.received[m] += msg.values.size
            replica -= subset_products(slabs, ws.idx)
            stats.flops += ws.idx.shape[0] * n_cols * n_modes
            ctx.master_residual[ws.lead_global] = replica[ws.lead_local]
            if m == 0:
                for n in range(n_modes):
                    ctx.master.matrices[n][:, columns] = slabs[n]
            barrier.wait()  # master model/residual now reflect this subset
            if ctx.check_replicas:
                for n in range(n_modes):
                    if not np.array_equal(slabs[n], ctx.master.matrices[n][:, columns]):
                        raise AssertionError(f"worker {m}: column replica diverged, mode {n}")
                if not np.array_equal(replica, ctx.master_residual[ws.positions]):
                    raise AssertionError(f"worker {m}: residual replica diverged")
                barrier.wait()
        ctx.iter_flops[m] = stats.flops - flops_mark
        flops_mark = stats.flops
        barrier.wait()  # iteration counters final
        if m == 0:
            resid_sq = float(ctx.master_residual @ ctx.master_residual)
            total = resid_sq + regularization_penalty(
                ctx.master, ctx.store, params.regularization
            )
            test_rmse = (
                None if ctx.test is None
                else rmse_arrays(ctx.master, ctx.test[0], ctx.test[1])
            )
            ctx.log.iterations.append(
                {
                    "iteration": it,
                    "sent": ctx.iter_sent.copy(),
                    "received": ctx.iter_received.copy(),
                    "flops": ctx.iter_flops.copy(),
                }
            )
            ctx.log.flops[:] += ctx.iter_flops
            if ctx.on_iteration is not None:
                ctx.on_iteration(
                    IterationRecord(
                        it, time.perf_counter() - ctx.t0, total, test_rmse,
                        int(ctx.iter_sent.sum()), int(ctx.iter_received.sum()),
                        int(ctx.iter_flops.sum()),
                    )
                )
            ctx.iter_sent[:] = 0
            ctx.iter_received[:] = 0
        barrier.wait()  # bookkeeping done; next iteration may start


_EMPTY = np.empty(0, dtype=np.int64)


def _worker_main(ctx: _RunContext, ws: WorkerState) -> None:
    try:
        _worker_loop(ctx, ws)
    except threading.BrokenBarrierError:
        pass  # another worker failed; its error is already recorded
    except BaseException as exc:  # noqa: BLE001 - full diagnostics wanted
        with ctx.error_lock:
            ctx.errors.append((ws.machine, f"{exc!r}\n{traceback.format_exc()}"))
        ctx.bus.barrier.abort()


def run_distributed(
    store: SparseTensorStore,
    params: SolverParams,
    assignment: RowAssignment,
    *,
    test_entries=None,
    on_iteration: ProgressHook | None = None,
    check_replicas: bool = False,
    fault_hook: Callable[[int, Stamp], None] | None = None,
) -> tuple[FactorModel, CommLog]:
    """Run the distributed schedule and return the model plus traffic log.

    The result is bitwise identical to :func:`sals.solver.factorize` with
    the same parameters and seed, for any machine count and assignment.
    """
    workers = distribute(store, assignment)
    master, residual = init_model(store, params)
    _, order_rng = rng_streams(params.seed)
    schedule = [
        choose_columns(params, order_rng) for _ in range(params.outer_iters)
    ]
    n_workers = assignment.n_machines
    log = CommLog.empty(
        n_workers, params.rank, params.inner_iters, sum(store.mode_lengths)
    )
    ctx = _RunContext(
        store=store,
        params=params,
        master=master,
        master_residual=residual.values,
        schedule=schedule,
        bus=_Bus(n_workers),
        log=log,
        worker_stats=[SolveStats() for _ in range(n_workers)],
        iter_sent=np.zeros(n_workers, dtype=np.int64),
        iter_received=np.zeros(n_workers, dtype=np.int64),
        iter_flops=np.zeros(n_workers, dtype=np.int64),
        test=_test_arrays(test_entries),
        on_iteration=on_iteration,
        check_replicas=check_replicas,
        fault_hook=fault_hook,
    )
    ctx.t0 = time.perf_counter()
    threads = [
        threading.Thread(
            target=_worker_main, args=(ctx, ws), name=f"sals-worker-{ws.machine}"
        )
        for ws in workers
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if ctx.errors:
        detail = "\n".join(f"worker {m}: {msg}" for m, msg in ctx.errors)
        raise ClusterError(f"distributed run aborted:\n{detail}")
    return master, log
