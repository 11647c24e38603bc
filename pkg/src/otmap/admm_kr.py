"""Single-stage solver for transport-cost-regularized triangular maps.

Minimizes, over lower-triangular maps S(x) = W Phi(x),

    (1/N) sum_i [ theta ||S(X_i) - X_i||^2 - log q(S(X_i))
                  - sum_d log d_d S^d(X_i) ]

via consensus ADMM. Relative to the dense solver, the log-det block is
replaced by one positive scalar Z_i^d per sample and output row (the
diagonal partial), tied to the map through a vector Y_i^d = B Phi_i^d,
so no eigendecomposition is needed anywhere. The W and p updates are
shared with the dense formulation. Triangular structure is enforced by
masking the structural-zero entries of B and W_i after each update.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .basis import (
    Structure,
    build_multi_index_set,
    eval_basis,
    eval_basis_jacobian,
    identity_weight_matrix,
    kr_mask,
)
from .density import TargetDensity
from .errors import DegenerateBasis, OtmapError
from .maps import TransportMap, check_monotonicity, project_monotone
from .solver import (
    BasisSpec,
    FitDiagnostics,
    SolverConfig,
    make_shards,
    rms,
    run_shards,
    solve_p_batch,
    worker_pool,
)


@dataclass
class KrAdmmState:
    """Variables of one triangular-stage solve.

    Per-sample-per-row arrays use axis 1 for the row index d:
    Z (N,D) holds the scalar Z_i^d, Y (N,D,D) holds the vector Y_i^d in
    Y[i, d, :], beta (N,D) and lamd (N,D,D) are their multipliers.
    J caches the basis Jacobian, whose column d is Phi_i^d. ``Bs`` is
    the inverse static consensus factor (includes the 2 theta / rho
    transport-cost curvature).
    """

    X: np.ndarray
    Phi: np.ndarray
    J: np.ndarray
    mask: np.ndarray
    B: np.ndarray
    W: np.ndarray
    p: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lamd: np.ndarray
    Bs: np.ndarray
    rho: float
    theta: float
    iteration: int = 0

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]


def _static_factor_kr(Phi, J, rho, theta) -> np.ndarray:
    N, K = Phi.shape
    gram = (1.0 + 2.0 * theta / rho) * (Phi.T @ Phi)
    gram += np.einsum("nkd,nld->kl", J, J)
    L = rho * (np.eye(K) + gram / N)
    try:
        return np.linalg.inv(L)
    except np.linalg.LinAlgError as e:
        raise DegenerateBasis(f"static consensus factor is singular: {e}") from e


def init_kr_state(samples, mset, family, rho: float, theta: float) -> KrAdmmState:
    """Identity-map initialization; every diagonal partial starts at 1."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    N, D = X.shape
    K = mset.size
    Phi = eval_basis(mset, family, X)
    J = eval_basis_jacobian(mset, family, X)
    mask = kr_mask(mset)
    B = identity_weight_matrix(mset) * mask
    Y = np.matmul(B, J).transpose(0, 2, 1).copy()  # Y[i, d, :] = B Phi_i^d
    Z = np.maximum(np.einsum("ndd->nd", Y), 1e-6)
    p = Phi @ B.T
    return KrAdmmState(
        X=X, Phi=Phi, J=J, mask=mask, B=B,
        W=np.broadcast_to(B, (N, D, K)),
        p=p, Z=Z, Y=Y,
        gamma=np.zeros((N, D)),
        alpha=np.broadcast_to(np.zeros((1, 1, 1)), (N, D, K)),
        beta=np.zeros((N, D)),
        lamd=np.zeros((N, D, D)),
        Bs=_static_factor_kr(Phi, J, rho, theta),
        rho=rho,
        theta=theta,
    )


def _kr_numerator(p, gamma, Y, lamd, X, Phi, J, rho, theta, per_sample: bool) -> np.ndarray:
    """Consensus pull of a block of samples, without the inert W term."""
    lin = rho * p + gamma + 2.0 * theta * X
    if per_sample:
        out = lin[:, :, None] * Phi[:, None, :]
        out += np.matmul(np.swapaxes(rho * Y + lamd, 1, 2), np.swapaxes(J, 1, 2))
    else:
        out = lin.T @ Phi
        out += np.tensordot(rho * Y + lamd, J, axes=[(0, 1), (0, 2)])
    return out


def _combine_numerators(parts: list, strict: bool) -> np.ndarray:
    if strict:
        return np.add.reduce(np.concatenate(parts, axis=0), axis=0)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def _b_numerator_shard_kr(state: KrAdmmState, sl: slice, skip_w: bool) -> np.ndarray:
    out = _kr_numerator(state.p[sl], state.gamma[sl], state.Y[sl], state.lamd[sl],
                        state.X[sl], state.Phi[sl], state.J[sl],
                        state.rho, state.theta, per_sample=False)
    if not skip_w:
        out += np.einsum("ndk->dk", state.rho * state.W[sl] + state.alpha[sl])
    return out


def _b_numerator_samples_kr(state: KrAdmmState, sl: slice, skip_w: bool) -> np.ndarray:
    out = _kr_numerator(state.p[sl], state.gamma[sl], state.Y[sl], state.lamd[sl],
                        state.X[sl], state.Phi[sl], state.J[sl],
                        state.rho, state.theta, per_sample=True)
    if not skip_w:
        out += state.rho * state.W[sl] + state.alpha[sl]
    return out


def update_B_kr(
    state: KrAdmmState,
    shards=None,
    workers: int = 1,
    strict: bool = False,
    masked: bool = True,
    w_term: np.ndarray | None = None,
) -> np.ndarray:
    """Consensus update; the raw solve is masked to the triangular slots.

    ``masked=False`` returns the unconstrained stationary point, which
    is what zeroes the gradient of the consensus block cost. ``w_term``
    plays the same role as in the dense solver: the fit loop passes
    rho B for the exactly-inert W/alpha blocks.
    """
    shards = shards or [slice(0, state.n_samples)]
    skip_w = w_term is not None
    if strict:
        slabs = run_shards(
            lambda sl: _b_numerator_samples_kr(state, sl, skip_w), shards, workers
        )
        Bi = np.add.reduce(np.concatenate(slabs, axis=0), axis=0)
    else:
        partials = run_shards(
            lambda sl: _b_numerator_shard_kr(state, sl, skip_w), shards, workers
        )
        Bi = partials[0]
        for part in partials[1:]:
            Bi = Bi + part
    Bi = Bi / state.n_samples
    if skip_w:
        Bi = Bi + w_term
    B = Bi @ state.Bs
    return B * state.mask if masked else B


def update_Z_d(state: KrAdmmState) -> np.ndarray:
    """Positive root of rho Z^2 + (beta - rho y) Z - 1 = 0, per (i, d).

    y is the row-d entry of Y_i^d from the previous iteration. The
    discriminant is at least 4 rho, so the root exists and is positive.
    """
    rho = state.rho
    y = np.einsum("ndd->nd", state.Y)
    t = rho * y - state.beta
    return (t + np.sqrt(t * t + 4.0 * rho)) / (2.0 * rho)


def update_Y_d(state: KrAdmmState, B: np.ndarray, Z: np.ndarray, BPd: np.ndarray | None = None) -> np.ndarray:
    """Stationary point of the Y block, via the closed-form inverse.

    Solves rho (e_d e_d^T + I) Y = rho Z e_d + rho B Phi^d + beta e_d
    - lam^d; the inverse of (e_d e_d^T + I) is I - e_d e_d^T / 2.
    """
    rho = state.rho
    N, D = state.Z.shape
    if BPd is None:
        BPd = np.matmul(B, state.J).transpose(0, 2, 1)
    U = rho * BPd - state.lamd
    dd = np.arange(D)
    U[:, dd, dd] += rho * Z + state.beta
    Y = U.copy()
    Y[:, dd, dd] = 0.5 * U[:, dd, dd]
    return Y / rho


def update_multipliers_kr(state: KrAdmmState, B, W, Z, Y, p, BPhi=None, BPd=None):
    """Dual ascent for gamma, alpha, lam^d, beta^d (in that order)."""
    rho = state.rho
    if BPhi is None:
        BPhi = state.Phi @ B.T
    if BPd is None:
        BPd = np.matmul(B, state.J).transpose(0, 2, 1)
    gamma = state.gamma + rho * (p - BPhi)
    alpha = state.alpha + rho * (W - B)
    lamd = state.lamd + rho * (Y - BPd)
    beta = state.beta + rho * (Z - np.einsum("ndd->nd", Y))
    return gamma, alpha, lamd, beta


def residuals_kr(state: KrAdmmState, B_prev: np.ndarray | None = None) -> dict:
    BPhi = state.Phi @ state.B.T
    BPd = np.matmul(state.B, state.J).transpose(0, 2, 1)
    primal = max(
        rms(state.p - BPhi),
        rms(state.W - state.B),
        rms(state.Z - np.einsum("ndd->nd", state.Y)),
        rms(state.Y - BPd),
    )
    dual = state.rho * rms(state.B - B_prev) if B_prev is not None else float("nan")
    return {"primal": primal, "dual": dual}


def stage_objective(W, Phi, J, X, theta, target) -> float:
    """Transport-cost-regularized empirical objective of the map W.

    NaN when some diagonal partial is non-positive (diagnostics only).
    """
    S = Phi @ W.T
    pd = np.einsum("dk,nkd->nd", W, J)
    if np.any(pd <= 0):
        return float("nan")
    cost = theta * np.sum((S - X) ** 2, axis=1)
    return float(np.mean(cost - target.log_q(S) - np.sum(np.log(pd), axis=1)))


def fit_kr_stage(
    samples,
    target: TargetDensity,
    basis: BasisSpec,
    theta: float,
    config: SolverConfig | None = None,
) -> tuple[TransportMap, FitDiagnostics]:
    """Fit one triangular stage with transport-cost weight theta.

    theta = 0 recovers the plain KL push-forward problem restricted to
    triangular maps; large theta pins the stage near the identity.
    """
    config = config or SolverConfig()
    if basis.structure is Structure.DENSE:
        raise OtmapError("fit_kr_stage requires a kr or krsv basis")
    if theta < 0:
        raise OtmapError(f"theta must be >= 0, got {theta}")
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if not np.all(np.isfinite(X)):
        raise OtmapError("samples must be finite")
    N, D = X.shape
    if target.dim != D:
        raise OtmapError(f"target dim {target.dim} != sample dim {D}")

    mset = build_multi_index_set(basis.structure, D, basis.order)
    state = init_kr_state(X, mset, basis.family, config.rho, theta)
    shards = make_shards(N, config.workers)
    diag = FitDiagnostics()

    # W/alpha are exactly inert under identity init, as in the dense
    # solver; their consensus pull is rho B and their residual is zero.
    # One sharded pass per iteration maps B onto the shard's samples,
    # applies the per-sample updates, and returns the consensus pull
    # for the next B-solve, so the serial section is just the B-solve
    # plus bookkeeping over shared full arrays.
    p_fail_iters = 0
    rho, strict = state.rho, config.strict_reduction
    dd = np.arange(D)
    BPd = np.matmul(state.B, state.J).transpose(0, 2, 1).copy()
    BPhi = state.Phi @ state.B.T
    with worker_pool(config.workers) as pool:
        parts = run_shards(
            lambda sl: _kr_numerator(
                state.p[sl], state.gamma[sl], state.Y[sl], state.lamd[sl],
                state.X[sl], state.Phi[sl], state.J[sl], rho, theta, strict),
            shards, config.workers, pool,
        )
        for k in range(config.max_iters):
            B_prev = state.B
            Bi = _combine_numerators(parts, strict) / N + rho * B_prev
            B = (Bi @ state.Bs) * state.mask

            Z = np.empty_like(state.Z)
            Y = np.empty_like(state.Y)
            p = np.empty_like(state.p)
            gamma = np.empty_like(state.gamma)
            beta = np.empty_like(state.beta)
            lamd = np.empty_like(state.lamd)
            failures = []

            def per_sample(sl):
                BPd[sl] = np.matmul(B, state.J[sl]).transpose(0, 2, 1)
                BPhi[sl] = state.Phi[sl] @ B.T
                y_old = state.Y[sl][:, dd, dd]
                t = rho * y_old - state.beta[sl]
                Z[sl] = (t + np.sqrt(t * t + 4.0 * rho)) / (2.0 * rho)
                U = rho * BPd[sl] - state.lamd[sl]
                U[:, dd, dd] += rho * Z[sl] + state.beta[sl]
                U[:, dd, dd] *= 0.5
                Y[sl] = U / rho
                p_sl, failed = solve_p_batch(
                    target, BPhi[sl], state.gamma[sl], state.p[sl],
                    rho, config.p_tol, config.p_max_iters,
                )
                p[sl] = p_sl
                if failed:
                    failures.extend(int(sl.start) + f for f in failed)
                gamma[sl] = state.gamma[sl] + rho * (p[sl] - BPhi[sl])
                lamd[sl] = state.lamd[sl] + rho * (Y[sl] - BPd[sl])
                beta[sl] = state.beta[sl] + rho * (Z[sl] - Y[sl][:, dd, dd])
                return _kr_numerator(p[sl], gamma[sl], Y[sl], lamd[sl],
                                     state.X[sl], state.Phi[sl], state.J[sl],
                                     rho, theta, strict)

            parts = run_shards(per_sample, shards, config.workers, pool)
            if failures:
                p_fail_iters += 1

            state.B, state.p = B, p
            state.Z, state.Y = Z, Y
            state.gamma, state.beta, state.lamd = gamma, beta, lamd
            state.W = np.broadcast_to(B, state.W.shape)
            state.iteration = k + 1

            primal = max(
                rms(p - BPhi),
                rms(Z - Y[:, dd, dd]),
                rms(Y - BPd),
            )
            dual = rho * rms(B - B_prev)
            diag.primal_residuals.append(primal)
            diag.dual_residuals.append(dual)
            pd = BPd[:, dd, dd]
            if np.all(pd > 0):
                cost = theta * np.sum((BPhi - X) ** 2, axis=1)
                obj = float(np.mean(cost - target.log_q(BPhi)
                                    - np.sum(np.log(pd), axis=1)))
            else:
                obj = float("nan")
            diag.objectives.append(obj)
            if primal < config.tol_primal and dual < config.tol_dual:
                diag.converged = True
                break

    diag.iterations = state.iteration
    diag.final_objective = stage_objective(state.B, state.Phi, state.J, X, theta, target)
    if not diag.converged:
        diag.warnings.append(
            f"no convergence after {state.iteration} iterations "
            f"(primal {diag.primal_residuals[-1]:.3e}, dual {diag.dual_residuals[-1]:.3e})"
        )
    if p_fail_iters:
        diag.warnings.append(
            f"p-update hit its iteration cap during {p_fail_iters} iterations"
        )

    tmap = TransportMap(mset, basis.family, state.B.copy())
    report = check_monotonicity(tmap, X)
    if not report.ok and config.postfit_projection:
        tmap = project_monotone(tmap, X, config.projection_margin)
        report = check_monotonicity(tmap, X)
        diag.warnings.append(
            "stage was non-monotone at training samples; applied monotone projection"
        )
    if report.ok:
        tmap = TransportMap(tmap.mset, tmap.family, np.array(tmap.W), monotone_validated=True)
    else:
        diag.warnings.append(
            f"fitted stage is non-monotone at {len(report.violations)} training samples"
        )
    return tmap, diag
