"""One-shot consensus-ADMM solver for the dense KL push-forward problem.

Minimizes the sample average of -log q(S(X_i)) - log det(J_S(X_i)) over
maps S(x) = W Phi(x), by splitting per-sample copies W_i with auxiliary
variables p_i = B Phi_i (the mapped point) and Z_i = B J_i (the map
Jacobian, kept positive definite), all tied to a consensus weight matrix
B. Every block update is closed-form except the p-update, which is the
only place the target density enters.
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
)
from .density import TargetDensity
from .errors import DegenerateBasis, OtmapError
from .maps import TransportMap, check_monotonicity
from .solver import (
    BasisSpec,
    FitDiagnostics,
    SolverConfig,
    make_shards,
    rms,
    run_shards,
    solve_p_batch,
    spd_floor,
    worker_pool,
)


@dataclass
class DenseAdmmState:
    """All per-sample and consensus variables of one dense solve.

    Per-sample arrays are stacked along axis 0: W (N,D,K), Z (N,D,D),
    p (N,D), multipliers gamma (N,D), lam (N,D,D), alpha (N,D,K).
    Phi (N,K) and J (N,K,D) are the cached basis evaluations at the
    samples, and Bs is the cached static consensus factor, i.e. the
    inverse of rho (I + (1/N) sum_i (Phi_i Phi_i^T + J_i J_i^T)).
    """

    X: np.ndarray
    Phi: np.ndarray
    J: np.ndarray
    B: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    p: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    Bs: np.ndarray
    rho: float
    iteration: int = 0

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]


def _static_factor(Phi: np.ndarray, J: np.ndarray, rho: float) -> np.ndarray:
    N, K = Phi.shape
    gram = Phi.T @ Phi + np.einsum("nkd,nld->kl", J, J)
    L = rho * (np.eye(K) + gram / N)
    try:
        return np.linalg.inv(L)
    except np.linalg.LinAlgError as e:
        raise DegenerateBasis(f"static consensus factor is singular: {e}") from e


def init_dense_state(samples, mset, family, rho: float) -> DenseAdmmState:
    """Identity-map initialization: feasible and monotone everywhere.

    W and alpha start as broadcast views (every W_i equals B, alpha is
    zero); the update equations keep them exactly there, so the fit loop
    never materializes the (N, D, K) arrays. Code that drives the
    updates manually rebinds them to ordinary arrays as it goes.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    N, D = X.shape
    K = mset.size
    Phi = eval_basis(mset, family, X)
    J = eval_basis_jacobian(mset, family, X)
    B = identity_weight_matrix(mset)
    Z = spd_floor(np.matmul(B, J))
    p = Phi @ B.T
    return DenseAdmmState(
        X=X, Phi=Phi, J=J, B=B,
        W=np.broadcast_to(B, (N, D, K)),
        Z=Z, p=p,
        gamma=np.zeros((N, D)),
        lam=np.zeros((N, D, D)),
        alpha=np.broadcast_to(np.zeros((1, 1, 1)), (N, D, K)),
        Bs=_static_factor(Phi, J, rho),
        rho=rho,
    )


def _dense_numerator(p, gamma, Z, lam, Phi, J, rho, per_sample: bool) -> np.ndarray:
    """Consensus pull of a block of samples, without the inert W term.

    Shard-summed (D, K) by default; per-sample (n, D, K) contributions
    when the strict globally-ordered reduction is requested.
    """
    if per_sample:
        out = (rho * p + gamma)[:, :, None] * Phi[:, None, :]
        out += np.matmul(rho * Z + lam, np.swapaxes(J, 1, 2))
    else:
        out = (rho * p + gamma).T @ Phi
        out += np.tensordot(rho * Z + lam, J, axes=[(0, 2), (0, 2)])
    return out


def _combine_numerators(parts: list, strict: bool) -> np.ndarray:
    if strict:
        return np.add.reduce(np.concatenate(parts, axis=0), axis=0)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def _b_numerator_shard(state: DenseAdmmState, sl: slice, skip_w: bool) -> np.ndarray:
    """Shard partial sum of the iterative consensus component."""
    out = _dense_numerator(state.p[sl], state.gamma[sl], state.Z[sl],
                           state.lam[sl], state.Phi[sl], state.J[sl],
                           state.rho, per_sample=False)
    if not skip_w:
        out += np.einsum("ndk->dk", state.rho * state.W[sl] + state.alpha[sl])
    return out


def _b_numerator_samples(state: DenseAdmmState, sl: slice, skip_w: bool) -> np.ndarray:
    """Per-sample consensus contributions (for strict global reduction)."""
    out = _dense_numerator(state.p[sl], state.gamma[sl], state.Z[sl],
                           state.lam[sl], state.Phi[sl], state.J[sl],
                           state.rho, per_sample=True)
    if not skip_w:
        out += state.rho * state.W[sl] + state.alpha[sl]
    return out


def update_B(
    state: DenseAdmmState,
    shards=None,
    workers: int = 1,
    strict: bool = False,
    w_term: np.ndarray | None = None,
) -> np.ndarray:
    """Consensus update: average of all per-sample pulls times the static factor.

    When ``w_term`` is given it is used as the per-sample-average of
    rho W_i + alpha_i instead of summing the arrays; the fit loop passes
    rho B, which the update equations make exact under identity
    initialization (alpha stays identically zero and W_i tracks B).
    """
    shards = shards or [slice(0, state.n_samples)]
    skip_w = w_term is not None
    if strict:
        slabs = run_shards(
            lambda sl: _b_numerator_samples(state, sl, skip_w), shards, workers
        )
        Bi = np.add.reduce(np.concatenate(slabs, axis=0), axis=0)
    else:
        partials = run_shards(
            lambda sl: _b_numerator_shard(state, sl, skip_w), shards, workers
        )
        Bi = partials[0]
        for part in partials[1:]:
            Bi = Bi + part
    Bi = Bi / state.n_samples
    if skip_w:
        Bi = Bi + w_term
    return Bi @ state.Bs


def update_W(state: DenseAdmmState, B: np.ndarray) -> np.ndarray:
    return -state.alpha / state.rho + B


def update_Z(state: DenseAdmmState, B: np.ndarray, BJ: np.ndarray | None = None) -> np.ndarray:
    """Closed-form SPD update: solve rho Z - Z^{-1} = sym(rho B J_i - lam_i).

    The right-hand side is symmetrized before the eigendecomposition;
    the fixed point is unaffected because Z is symmetric whenever the
    constraint Z = B J holds at a monotone optimum.
    """
    rho = state.rho
    if BJ is None:
        BJ = np.matmul(B, state.J)
    M = rho * BJ - state.lam
    S = 0.5 * (M + np.swapaxes(M, -1, -2))
    nu, Q = np.linalg.eigh(S)
    z = (nu + np.sqrt(nu * nu + 4.0 * rho)) / (2.0 * rho)
    return np.matmul(Q * z[:, None, :], np.swapaxes(Q, 1, 2))


def update_p(
    state: DenseAdmmState,
    B: np.ndarray,
    target: TargetDensity,
    tol: float = 1e-10,
    max_iters: int = 100,
    BPhi: np.ndarray | None = None,
):
    """Target-dependent update; returns (p, failed_row_indices)."""
    if BPhi is None:
        BPhi = state.Phi @ B.T
    return solve_p_batch(target, BPhi, state.gamma, state.p, state.rho, tol, max_iters)


def update_multipliers(state: DenseAdmmState, B, W, Z, p, BPhi=None, BJ=None):
    """Dual ascent on all three constraint families; returns (gamma, lam, alpha)."""
    rho = state.rho
    if BPhi is None:
        BPhi = state.Phi @ B.T
    if BJ is None:
        BJ = np.matmul(B, state.J)
    gamma = state.gamma + rho * (p - BPhi)
    lam = state.lam + rho * (Z - BJ)
    alpha = state.alpha + rho * (W - B)
    return gamma, lam, alpha


def residuals(state: DenseAdmmState, B_prev: np.ndarray | None = None) -> dict:
    """Primal: worst RMS constraint violation. Dual: rho * RMS consensus move."""
    BPhi = state.Phi @ state.B.T
    BJ = np.matmul(state.B, state.J)
    primal = max(
        rms(state.p - BPhi),
        rms(state.Z - BJ),
        rms(state.W - state.B),
    )
    dual = state.rho * rms(state.B - B_prev) if B_prev is not None else float("nan")
    return {"primal": primal, "dual": dual}


def _objective(W, Phi, J, X, target, BJ=None) -> float:
    """Empirical objective of the map W at the cached sample evaluations.

    NaN when the map is non-monotone at some sample (diagnostics only).
    """
    S = Phi @ W.T
    if BJ is None:
        BJ = np.matmul(W, J)
    sign, logabs = np.linalg.slogdet(BJ)
    if np.any(sign <= 0):
        return float("nan")
    return float(np.mean(-target.log_q(S) - logabs))


def fit_dense(
    samples,
    target: TargetDensity,
    basis: BasisSpec | None = None,
    config: SolverConfig | None = None,
) -> tuple[TransportMap, FitDiagnostics]:
    """Fit a dense transport map pushing the samples onto the target.

    Runs the consensus-ADMM cycle until both residuals fall below the
    configured tolerances or the iteration cap is reached, in which case
    the best iterate is returned with ``converged=False`` and a warning
    in the diagnostics rather than an exception.
    """
    basis = basis or BasisSpec()
    config = config or SolverConfig()
    if basis.structure is not Structure.DENSE:
        raise OtmapError("fit_dense requires a dense basis; use fit_kr_stage for kr/krsv")
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if not np.all(np.isfinite(X)):
        raise OtmapError("samples must be finite")
    N, D = X.shape
    if target.dim != D:
        raise OtmapError(f"target dim {target.dim} != sample dim {D}")

    mset = build_multi_index_set(basis.structure, D, basis.order)
    state = init_dense_state(X, mset, basis.family, config.rho)
    shards = make_shards(N, config.workers)
    diag = FitDiagnostics()

    # Identity init keeps the W/alpha blocks exactly inert (alpha stays
    # zero, every W_i tracks B bit for bit), so their consensus pull is
    # the closed form rho B and the W-B residual is identically zero.
    # Each iteration makes a single pass over the shards that applies
    # the per-sample updates and returns the consensus pull for the
    # next B-solve, keeping thread synchronization to one barrier.
    p_fail_iters = 0
    rho, strict = state.rho, config.strict_reduction
    BJ = np.matmul(state.B, state.J)
    BPhi = state.Phi @ state.B.T
    with worker_pool(config.workers) as pool:
        parts = run_shards(
            lambda sl: _dense_numerator(
                state.p[sl], state.gamma[sl], state.Z[sl], state.lam[sl],
                state.Phi[sl], state.J[sl], rho, strict),
            shards, config.workers, pool,
        )
        for k in range(config.max_iters):
            B_prev = state.B
            Bi = _combine_numerators(parts, strict) / N + rho * B_prev
            B = Bi @ state.Bs

            Z = np.empty_like(state.Z)
            p = np.empty_like(state.p)
            gamma = np.empty_like(state.gamma)
            lam = np.empty_like(state.lam)
            failures = []

            def per_sample(sl):
                BJ[sl] = np.matmul(B, state.J[sl])
                BPhi[sl] = state.Phi[sl] @ B.T
                M = rho * BJ[sl] - state.lam[sl]
                Ssym = 0.5 * (M + np.swapaxes(M, -1, -2))
                nu, Q = np.linalg.eigh(Ssym)
                z = (nu + np.sqrt(nu * nu + 4.0 * rho)) / (2.0 * rho)
                Z[sl] = np.matmul(Q * z[:, None, :], np.swapaxes(Q, 1, 2))
                p_sl, failed = solve_p_batch(
                    target, BPhi[sl], state.gamma[sl], state.p[sl],
                    rho, config.p_tol, config.p_max_iters,
                )
                p[sl] = p_sl
                if failed:
                    failures.extend(int(sl.start) + f for f in failed)
                gamma[sl] = state.gamma[sl] + rho * (p[sl] - BPhi[sl])
                lam[sl] = state.lam[sl] + rho * (Z[sl] - BJ[sl])
                return _dense_numerator(p[sl], gamma[sl], Z[sl], lam[sl],
                                        state.Phi[sl], state.J[sl], rho, strict)

            parts = run_shards(per_sample, shards, config.workers, pool)
            if failures:
                p_fail_iters += 1

            state.B, state.Z, state.p = B, Z, p
            state.gamma, state.lam = gamma, lam
            state.W = np.broadcast_to(B, state.W.shape)
            state.iteration = k + 1

            primal = max(rms(p - BPhi), rms(Z - BJ))
            dual = rho * rms(B - B_prev)
            diag.primal_residuals.append(primal)
            diag.dual_residuals.append(dual)
            diag.objectives.append(_objective(B, state.Phi, state.J, X, target, BJ))
            if primal < config.tol_primal and dual < config.tol_dual:
                diag.converged = True
                break

    diag.iterations = state.iteration
    diag.final_objective = _objective(state.B, state.Phi, state.J, X, target)
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
    if report.ok:
        tmap = TransportMap(mset, basis.family, state.B.copy(), monotone_validated=True)
    else:
        diag.warnings.append(
            f"fitted dense map is non-monotone at {len(report.violations)} "
            "of the training samples"
        )
    return tmap, diag
