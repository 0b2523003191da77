"""Cross-path regression net: every execution path must agree bitwise.

Serial, distributed (any machine count / assignment), and streaming runs
share row kernels and consume identical seeded streams, so their final
models must match bit for bit; the fused coordinate-descent path must
match the general path at C=1 with fixed order.
"""
import numpy as np
import pytest

import sals
from sals.solver import SolverParams, factorize, factorize_cdtf
from conftest import random_store

CASES = [
    # (lengths, nnz, K, C, T_out, T_in, lam, reg, order, M, strategy, chunk)
    ((9, 7), 40, 3, 1, 2, 1, 0.0, "plain", "fixed", 2, "sequential", 11),
    ((8, 6, 5), 120, 5, 2, 2, 2, 0.05, "weighted", "random_per_outer", 3, "greedy", 23),
    ((5, 4, 6, 3), 150, 4, 3, 2, 1, 0.01, "plain", "random_per_outer", 4, "random", 64),
    ((12, 11, 10), 300, 6, 6, 2, 1, 0.1, "weighted", "fixed", 5, "greedy", 97),
    ((30, 30, 30), 50, 2, 2, 2, 1, 0.0, "plain", "fixed", 4, "sequential", 16),
    ((7, 7, 7), 200, 7, 3, 3, 2, 0.5, "plain", "random_per_outer", 6, "random", 31),
    ((10, 3), 25, 4, 1, 3, 2, 0.02, "weighted", "fixed", 3, "greedy", 7),
    ((6, 6, 6, 6), 400, 5, 5, 2, 1, 0.05, "weighted", "random_per_outer", 2, "sequential", 128),
]


@pytest.mark.parametrize("i, case", list(enumerate(CASES)), ids=[f"case{i}" for i in range(len(CASES))])
def test_all_paths_bitwise_identical(i, case, tmp_path):
    lengths, nnz, k, c, t_out, t_in, lam, reg, order, m, strategy, chunk = case
    rng = np.random.default_rng(900 + i)
    store = random_store(rng, lengths, nnz)
    params = SolverParams(
        rank=k, n_columns=c, outer_iters=t_out, inner_iters=t_in,
        lam=lam, regularization=reg, column_order=order, seed=nnz,
    )
    serial = factorize(store, params)

    assignment = sals.assign(store, strategy, m, seed=3)
    dist, _ = sals.run_distributed(store, params, assignment, check_replicas=True)
    for a, b in zip(serial.matrices, dist.matrices):
        assert np.array_equal(a, b)

    run = sals.stream_factorize(store, params, workdir=tmp_path, chunk_records=chunk)
    stream = run.load_model()
    for a, b in zip(serial.matrices, stream.matrices):
        assert np.array_equal(a, b)

    if c == 1 and order == "fixed":
        fused = factorize_cdtf(store, params)
        for a, b in zip(serial.matrices, fused.matrices):
            assert np.array_equal(a, b)
