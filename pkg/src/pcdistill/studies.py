"""Stand-alone studies: FPS position inconsistency and an OT solver benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .nets import derive_seed
from .ot import WeightedFeatureSet, emd_assignment, emd_bruteforce, remd, sinkhorn
from .ot import BRUTEFORCE_LIMIT
from .pointops import fps, pairwise_dist

HIST_RANGE = (0.0, 2.0)
SINKHORN_EPS_GRID = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)


@dataclass
class InconsistencyResult:
    edges: np.ndarray
    freq: np.ndarray  # normalized, sums to 1 when any pair was recorded
    n_pairs: int
    frac_above_1: float
    skipped: int
    max_distance: float


def paired_distances(positions, m, teacher_seed, student_seed, pairing="order"):
    """Distances between teacher and student FPS selections of one cloud.

    ``order`` pairs the i-th teacher pick with the i-th student pick;
    ``nearest`` pairs each teacher pick with its closest student pick.
    """
    t = positions[fps(positions, m, teacher_seed)]
    s = positions[fps(positions, m, student_seed)]
    if pairing == "order":
        return np.linalg.norm(t - s, axis=1)
    if pairing == "nearest":
        return pairwise_dist(t, s).min(axis=1)
    raise ValueError(f"unknown pairing {pairing!r}")


def inconsistency_hist(clouds, sample_m: int, n_bins: int, teacher_seed: int,
                       student_seed: int, pairing: str = "order") -> InconsistencyResult:
    """Normalized histogram over [0, 2] of paired teacher/student FPS distances.

    Cloud ``i`` is sampled with seeds derived from (role seed, i), so equal
    role seeds give identical selections. Clouds smaller than ``sample_m``
    are skipped and counted.
    """
    edges = np.linspace(*HIST_RANGE, n_bins + 1)
    counts = np.zeros(n_bins, dtype=np.int64)
    skipped, n_pairs, above, dmax = 0, 0, 0, 0.0
    for i, cloud in enumerate(clouds):
        pos = cloud.positions if hasattr(cloud, "positions") else np.asarray(cloud)
        if pos.shape[0] < sample_m:
            skipped += 1
            continue
        d = paired_distances(pos, sample_m, derive_seed(teacher_seed, i),
                             derive_seed(student_seed, i), pairing)
        c, _ = np.histogram(np.clip(d, *HIST_RANGE), bins=edges)
        counts += c
        n_pairs += d.size
        above += int(np.sum(d > 1.0))
        dmax = max(dmax, float(d.max()))
    freq = counts / n_pairs if n_pairs else counts.astype(np.float64)
    return InconsistencyResult(edges, freq, n_pairs, above / n_pairs if n_pairs else 0.0,
                               skipped, dmax)


def ot_bench(sizes, dims, repeats: int, seed: int, eps_grid=SINKHORN_EPS_GRID,
             timing: bool = True):
    """One row per (instance, method) on random uniform sets; see ``OT_BENCH_HEADER``."""
    rng = np.random.default_rng(seed)
    rows = []
    instance = 0
    for n in sizes:
        for d in dims:
            for _ in range(repeats):
                a = WeightedFeatureSet.uniform(rng.random((n, d)))
                b = WeightedFeatureSet.uniform(rng.random((n, d)))
                runs = []
                if n <= BRUTEFORCE_LIMIT:
                    runs.append(("emd_bruteforce", lambda: (emd_bruteforce(a, b), 0)))
                runs.append(("emd_assignment", lambda: (emd_assignment(a, b)[0], 0)))
                for eps in eps_grid:
                    def run(eps=eps):
                        cost, plan = sinkhorn(a, b, eps=eps, tol=1e-6)
                        return cost, plan.iters
                    runs.append((f"sinkhorn_eps={eps:g}", run))
                runs.append(("remd", lambda: (remd(a, b), 0)))
                for method, fn in runs:
                    t0 = time.perf_counter()
                    cost, iters = fn()
                    us = int(round((time.perf_counter() - t0) * 1e6)) if timing else 0
                    rows.append([instance, n, method, float(cost), int(iters), us])
                instance += 1
    return rows


OT_BENCH_HEADER = ["instance_id", "n", "method", "cost", "iters", "wall_time_us"]
