"""Optimal-transport distances between weighted feature sets.

EMD, REMD and Sinkhorn measure ground distance in feature space. The feature
mover's distance builds its transport plan from distances in position space
and then compares features; the two are kept as separate arguments.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from . import diffcore as dc
from .errors import ShapeError, SizeError, UnsupportedError
from .pointops import knn

BRUTEFORCE_LIMIT = 8


@dataclass
class WeightedFeatureSet:
    features: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if f.shape[0] != w.shape[0]:
            raise ShapeError(f"{f.shape[0]} features but {w.shape[0]} weights")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        self.features, self.weights = f, w

    @classmethod
    def uniform(cls, features) -> "WeightedFeatureSet":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        n = f.shape[0]
        return cls(f, np.full(n, 1.0 / n) if n else np.zeros(0))

    def __len__(self):
        return self.features.shape[0]

    def is_uniform(self) -> bool:
        n = len(self)
        return n > 0 and np.allclose(self.weights, 1.0 / n, rtol=0, atol=1e-12)


@dataclass
class TransportPlan:
    flow: np.ndarray
    cost: float
    iters: int = 0
    converged: bool = True
    marginal_error: float = 0.0


@dataclass
class KnnPlan:
    """Row-sparse plan: row i sends ``weights[i, k]`` to ``indices[i, k]``."""

    indices: np.ndarray
    weights: np.ndarray
    tau: float

    def dense(self, n_target: int) -> np.ndarray:
        out = np.zeros((self.indices.shape[0], n_target))
        np.put_along_axis(out, self.indices, self.weights, axis=1)
        return out


def feature_cost(a: WeightedFeatureSet, b: WeightedFeatureSet) -> np.ndarray:
    if a.features.shape[1] != b.features.shape[1]:
        raise ShapeError(
            f"feature dims differ: {a.features.shape[1]} vs {b.features.shape[1]}"
        )
    diff = a.features[:, None, :] - b.features[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _check_uniform_pair(a, b):
    if len(a) != len(b):
        raise UnsupportedError(f"exact EMD needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise ValueError("empty feature set")
    if not (a.is_uniform() and b.is_uniform()):
        raise UnsupportedError("exact EMD is limited to uniform weights")


def emd_bruteforce(a: WeightedFeatureSet, b: WeightedFeatureSet) -> float:
    """Exact uniform EMD by enumerating every matching (N <= 8)."""
    if len(a) > BRUTEFORCE_LIMIT or len(b) > BRUTEFORCE_LIMIT:
        raise SizeError(f"brute force limited to N <= {BRUTEFORCE_LIMIT}")
    _check_uniform_pair(a, b)
    d = feature_cost(a, b)
    n = len(a)
    rows = np.arange(n)
    best = min(d[rows, list(perm)].sum() for perm in itertools.permutations(range(n)))
    return float(best / n)


def emd_assignment(a: WeightedFeatureSet, b: WeightedFeatureSet):
    """Exact uniform EMD through a min-cost perfect matching."""
    _check_uniform_pair(a, b)
    d = feature_cost(a, b)
    n = len(a)
    rows, cols = linear_sum_assignment(d)
    flow = np.zeros((n, n))
    flow[rows, cols] = 1.0 / n
    cost = float(d[rows, cols].sum() / n)
    return cost, TransportPlan(flow, cost)


def _dual_objective(F, G, d, mu, nu, e):
    expo = (F[:, None] + G[None, :] - d) / e
    if expo.max() > 700:
        return -np.inf
    return float(mu @ F + nu @ G - e * np.exp(expo).sum())


def _newton_polish(F, G, d, mu, nu, e, tol, max_steps=60):
    """Damped Newton ascent on the entropic dual, for stalled scaling runs."""
    n, m = d.shape
    for _ in range(max_steps):
        plan = np.exp((F[:, None] + G[None, :] - d) / e)
        r, c = plan.sum(axis=1), plan.sum(axis=0)
        grad = np.concatenate([mu - r, nu - c])
        if np.abs(grad).sum() < tol:
            break
        hess = np.block([[np.diag(r), plan], [plan.T, np.diag(c)]]) / e
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        base = _dual_objective(F, G, d, mu, nu, e)
        t = 1.0
        while t > 1e-10:
            F_new, G_new = F + t * step[:n], G + t * step[n:]
            if _dual_objective(F_new, G_new, d, mu, nu, e) >= base:
                F, G = F_new, G_new
                break
            t *= 0.5
        else:
            break
    return F, G


def _marginal_error(F, G, d, mu, nu, e):
    log_plan = (F[:, None] + G[None, :] - d) / e
    row = np.exp(logsumexp(log_plan, axis=1))
    col = np.exp(logsumexp(log_plan, axis=0))
    return float(np.abs(row - mu).sum() + np.abs(col - nu).sum())


def sinkhorn(
    a: WeightedFeatureSet,
    b: WeightedFeatureSet,
    eps: float = 1e-2,
    max_iters: int = 100_000,
    tol: float = 1e-9,
    overrelax: float = 1.9,
    polish_after: int = 500,
):
    """Entropic OT by log-domain Sinkhorn scaling.

    The regularization is annealed geometrically from the cost scale down to
    ``eps`` with warm-started potentials; ``max_iters`` bounds the final stage.
    The final stage uses over-relaxed updates (factor ``overrelax``), dropping
    back to plain scaling if the marginal error grows. If the final stage has
    not met ``tol`` after ``polish_after`` iterations, Newton steps on the
    same dual finish the job.

    The reported cost is the transport cost of the final plan, without the
    entropy term. Running out of iterations is reported through
    ``plan.converged`` rather than raised.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(a.weights <= 0) or np.any(b.weights <= 0):
        raise ValueError("sinkhorn needs strictly positive weights")
    mu = a.weights / a.weights.sum()
    nu = b.weights / b.weights.sum()
    d = feature_cost(a, b)
    log_mu, log_nu = np.log(mu), np.log(nu)

    # potentials in cost units: plan = exp((F_i + G_j - d_ij) / e)
    F = np.zeros(len(mu))
    G = np.zeros(len(nu))
    schedule = []
    e = max(float(d.max()), eps)
    while e > eps:
        schedule.append(e)
        e *= 0.5
    schedule.append(eps)

    total = 0
    err = np.inf
    for stage, e in enumerate(schedule):
        final = stage == len(schedule) - 1
        budget = max_iters if final else 200
        stage_tol = tol if final else 1e-3
        w = overrelax if final else 1.0
        best = np.inf
        for it in range(budget):
            total += 1
            F = (1.0 - w) * F + w * e * (log_mu - logsumexp((G[None, :] - d) / e, axis=1))
            G = (1.0 - w) * G + w * e * (log_nu - logsumexp((F[:, None] - d) / e, axis=0))
            err = _marginal_error(F, G, d, mu, nu, e)
            if err < stage_tol:
                break
            if err > 10.0 * best:
                w = 1.0
            best = min(best, err)
            if final and it + 1 == polish_after:
                F, G = _newton_polish(F, G, d, mu, nu, e, tol)
                err = _marginal_error(F, G, d, mu, nu, e)
                if err < stage_tol:
                    break
    flow = np.exp((F[:, None] + G[None, :] - d) / eps)
    cost = float((flow * d).sum())
    return cost, TransportPlan(flow, cost, iters=total, converged=err < tol, marginal_error=err)


def remd(a: WeightedFeatureSet, b: WeightedFeatureSet) -> float:
    """Relaxed EMD: the larger of the two one-constraint relaxations."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty feature set")
    d = feature_cost(a, b)
    s = a.weights / a.weights.sum()
    t = b.weights / b.weights.sum()
    source_side = float(s @ d.min(axis=1))
    target_side = float(t @ d.min(axis=0))
    return max(source_side, target_side)


# --- feature mover's distance -----------------------------------------------


def fmd_plan(pos_s, pos_t, k: int, tau: float | None = None) -> KnnPlan:
    """Gaussian-kernel weights over each student point's k nearest teacher points.

    ``tau=None`` uses the mean of the k-NN distances, falling back to 1 when
    every neighbor coincides.
    """
    nb = knn(pos_s, pos_t, k)
    if tau is None:
        tau = float(nb.distances.mean())
        if tau <= 0.0:
            tau = 1.0
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = -(nb.distances**2) / (2.0 * tau * tau)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return KnnPlan(nb.indices, w, float(tau))


def teacher_barycenters(plan: KnnPlan, F_t: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkd->nd", plan.weights, np.asarray(F_t)[plan.indices])


def apc_weights(F_r: dc.Node, F_t, normalize: bool = False, grad: bool = True) -> dc.Node:
    """Clamped inner product of each student row with the teacher mean feature.

    ``grad=False`` returns the same values as a constant.
    """
    F_t = np.asarray(F_t.data if isinstance(F_t, dc.Node) else F_t, dtype=np.float64)
    if F_t.ndim != 2 or F_t.shape[1] != F_r.shape[1]:
        raise ShapeError(f"apc_weights: student dim {F_r.shape[1]}, teacher {F_t.shape}")
    mean = F_t.mean(axis=0)[:, None]
    s = dc.relu(dc.linear(F_r if grad else dc.const(F_r.data), dc.const(mean)))
    if normalize:
        total = float(s.data.sum())
        if total > 0:
            s = dc.scale(s, 1.0 / total)
    return s


def fmd_loss(
    F_r: dc.Node,
    pos_s,
    F_t,
    pos_t,
    k: int = 5,
    tau: float | None = None,
    normalize_apc: bool = False,
    plan: KnnPlan | None = None,
    apc_grad: bool = True,
) -> dc.Node:
    """APC-weighted distance from each student feature to its teacher barycenter.

    Teacher features enter as constants. With ``apc_grad=False`` the APC
    weights are held constant, so the gradient only pulls features toward
    their barycenters.
    """
    F_t = np.asarray(F_t.data if isinstance(F_t, dc.Node) else F_t, dtype=np.float64)
    if F_t.shape[1] != F_r.shape[1]:
        raise ShapeError(f"fmd_loss: student dim {F_r.shape[1]}, teacher dim {F_t.shape[1]}")
    if np.asarray(pos_s).shape[0] != F_r.shape[0]:
        raise ShapeError("fmd_loss: student positions and features disagree in length")
    if np.asarray(pos_t).shape[0] != F_t.shape[0]:
        raise ShapeError("fmd_loss: teacher positions and features disagree in length")
    if plan is None:
        plan = fmd_plan(pos_s, pos_t, k, tau)
    target = dc.const(teacher_barycenters(plan, F_t))
    resid = dc.row_norms(dc.sub(F_r, target))
    s = apc_weights(F_r, F_t, normalize_apc, apc_grad)
    return dc.sum_all(dc.hadamard(s, resid))


def remd_loss(F_r: dc.Node, F_t) -> dc.Node:
    """Differentiable uniform-weight REMD between student rows and constant teacher rows."""
    F_t = np.asarray(F_t.data if isinstance(F_t, dc.Node) else F_t, dtype=np.float64)
    if F_t.shape[1] != F_r.shape[1]:
        raise ShapeError(f"remd_loss: student dim {F_r.shape[1]}, teacher dim {F_t.shape[1]}")
    d = feature_cost(WeightedFeatureSet.uniform(F_r.data), WeightedFeatureSet.uniform(F_t))
    n_s, n_t = d.shape
    nearest_t = np.argmin(d, axis=1)
    nearest_s = np.argmin(d, axis=0)
    source_side = dc.scale(
        dc.sum_all(dc.row_norms(dc.sub(F_r, dc.const(F_t[nearest_t])))), 1.0 / n_s
    )
    target_side = dc.scale(
        dc.sum_all(dc.row_norms(dc.sub(dc.gather_rows(F_r, nearest_s), dc.const(F_t)))),
        1.0 / n_t,
    )
    return dc.maximum(source_side, target_side)


def fl2_loss(F_s: dc.Node, F_t, W: dc.Node, b: dc.Node | None = None) -> dc.Node:
    """Index-aligned mean squared distance after a pointwise adapter."""
    F_t = np.asarray(F_t.data if isinstance(F_t, dc.Node) else F_t, dtype=np.float64)
    if F_t.shape[0] != F_s.shape[0]:
        raise ShapeError(f"fl2_loss: {F_s.shape[0]} student rows vs {F_t.shape[0]} teacher rows")
    adapted = dc.linear(F_s, W, b)
    if adapted.shape != F_t.shape:
        raise ShapeError(f"fl2_loss: adapted {adapted.shape} vs teacher {F_t.shape}")
    return dc.scale(dc.sum_squares(dc.sub(adapted, dc.const(F_t))), 1.0 / F_t.shape[0])
