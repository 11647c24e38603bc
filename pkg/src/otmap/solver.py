"""Shared machinery for the consensus-ADMM solvers.

Per-sample updates are embarrassingly parallel; samples are split into
contiguous shards processed by a thread pool (numpy kernels release the
GIL). The only cross-sample coupling is the consensus reduction, whose
summation order is fixed: shard order by default, exact global sample
order in strict mode, which makes results independent of the worker
count at the cost of materializing per-sample contributions.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basis import Family, Structure
from .density import TargetDensity
from .errors import OtmapError


def default_workers() -> int:
    env = os.environ.get("OTMAP_WORKERS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


@dataclass(frozen=True)
class BasisSpec:
    structure: Structure = Structure.DENSE
    order: int = 2
    family: Family = Family.HERMITE

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        object.__setattr__(self, "family", Family(self.family))


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.0
    max_iters: int = 5000
    tol_primal: float = 1e-5
    tol_dual: float = 1e-5
    p_tol: float = 1e-10
    p_max_iters: int = 100
    init: str = "identity"
    workers: int = 1
    strict_reduction: bool = False
    seed: int | None = None
    # When the fitted triangular map fails the post-fit monotonicity
    # check on the training samples, push it back into the feasible set.
    postfit_projection: bool = False
    projection_margin: float = 1e-3

    def __post_init__(self):
        if self.rho <= 0:
            raise OtmapError(f"rho must be > 0, got {self.rho}")
        if self.tol_primal <= 0 or self.tol_dual <= 0:
            raise OtmapError("tolerances must be > 0")
        if self.workers < 1:
            raise OtmapError("workers must be >= 1")


@dataclass
class FitDiagnostics:
    converged: bool = False
    iterations: int = 0
    primal_residuals: list = field(default_factory=list)
    dual_residuals: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    final_objective: float = float("nan")
    warnings: list = field(default_factory=list)

    def history_rows(self):
        """Rows (iter, objective, primal_res, dual_res) for CSV export."""
        return [
            (k + 1, self.objectives[k], self.primal_residuals[k], self.dual_residuals[k])
            for k in range(self.iterations)
        ]


def make_shards(n: int, workers: int) -> list[slice]:
    workers = min(max(1, workers), n) if n else 1
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [slice(bounds[i], bounds[i + 1]) for i in range(workers)]


def run_shards(fn, shards: list[slice], workers: int, pool=None) -> list:
    """Run fn over shards, returning results in shard order.

    Passing a persistent pool avoids re-spawning threads on every call;
    the fit loops create one per solve.
    """
    if workers <= 1 or len(shards) <= 1:
        return [fn(sl) for sl in shards]
    if pool is not None:
        return list(pool.map(fn, shards))
    with ThreadPoolExecutor(max_workers=workers) as tmp:
        return list(tmp.map(fn, shards))


class worker_pool:
    """Thread pool + single-threaded BLAS for the lifetime of a solve.

    BLAS pools are pinned to one thread regardless of the worker count:
    the per-iteration kernels are small batched operations where BLAS
    threading only adds spin-wait overhead, and nesting it under shard
    workers oversubscribes the machine badly. Parallelism across
    samples is this library's own sharding.
    """

    def __init__(self, workers: int):
        self.workers = workers
        self.pool = None
        self._limits = None

    def __enter__(self):
        from threadpoolctl import threadpool_limits

        self._limits = threadpool_limits(limits=1)
        if self.workers > 1:
            self.pool = ThreadPoolExecutor(max_workers=self.workers)
        return self.pool

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown(wait=True)
        self._limits.unregister()
        return False


def rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(a)))) if a.size else 0.0


def solve_p_batch(
    target: TargetDensity,
    v: np.ndarray,
    gamma: np.ndarray,
    p0: np.ndarray,
    rho: float,
    tol: float = 1e-10,
    max_iters: int = 100,
):
    """Minimize -log q(p) + rho/2 ||v - p||^2 + gamma^T (p - v) per row.

    Uses the target's exact prox when available (Gaussian); otherwise a
    damped Newton iteration with backtracking, run simultaneously on all
    rows and warm-started at p0. Targets with kinks supply a smoothed
    surrogate carrying a consistent gradient/Hessian pair.

    A row is converged when its gradient norm falls below tol or the
    Newton decrement drops below tol; the decrement bounds the remaining
    objective improvement, which stays meaningful even where Huber
    smoothing makes the curvature huge and a raw gradient tolerance
    would demand sub-machine position accuracy.

    Returns (p, failed); failed lists rows that hit the iteration cap.
    Their final iterates are kept: the line search only ever accepts
    decreases of the subproblem objective, so they are no worse than the
    warm start.
    """
    if target.prox is not None:
        return target.prox(v, gamma, rho), []

    den = target.smoothed or target
    if den.hess_log_q is None:
        raise OtmapError(
            "target density needs hess_log_q (or a prox) for the p-update"
        )
    P = np.array(p0, dtype=float)
    N, D = P.shape
    eye = np.eye(D)

    def fval(P_, rows):
        diff = P_ - v[rows]
        return (
            -den.log_q(P_)
            + 0.5 * rho * np.sum(diff * diff, axis=-1)
            + np.sum(gamma[rows] * diff, axis=-1)
        )

    def gval(P_, rows):
        return -den.grad_log_q(P_) + rho * (P_ - v[rows]) + gamma[rows]

    active = np.ones(N, dtype=bool)
    for _ in range(max_iters):
        rows = np.nonzero(active)[0]
        if rows.size == 0:
            break
        Pa = P[rows]
        ga = gval(Pa, rows)
        # cheap first: most warm-started rows pass the gradient test
        # right after one step, so don't build Hessians for them
        small = np.linalg.norm(ga, axis=1) <= tol
        active[rows[small]] = False
        rows = rows[~small]
        if rows.size == 0:
            break
        Pa, ga = Pa[~small], ga[~small]
        H = -den.hess_log_q(Pa) + rho * eye
        step = np.linalg.solve(H, -ga[..., None])[..., 0]
        decrement = np.einsum("md,md->m", -ga, step)  # g^T H^{-1} g >= 0
        done = 0.5 * decrement <= tol
        active[rows[done]] = False
        rows = rows[~done]
        if rows.size == 0:
            break
        Pa, ga, step = Pa[~done], ga[~done], step[~done]
        slope = np.einsum("md,md->m", ga, step)
        fa = fval(Pa, rows)
        alpha = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        Pn = Pa.copy()
        for _ in range(40):
            todo = ~accepted
            trial = Pa[todo] + alpha[todo, None] * step[todo]
            ok = fval(trial, rows[todo]) <= fa[todo] + 1e-4 * alpha[todo] * slope[todo]
            sel = np.nonzero(todo)[0]
            Pn[sel[ok]] = trial[ok]
            accepted[sel[ok]] = True
            if accepted.all():
                break
            alpha[sel[~ok]] *= 0.5
        P[rows] = Pn
        # a failed line search cannot improve this row any further
        active[rows[~accepted]] = False
    failed = np.nonzero(active)[0].tolist()
    return P, failed


def spd_floor(mats: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Project symmetric matrices to SPD by flooring eigenvalues."""
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, floor)
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)
