"""Transport map values: evaluation, inversion, monotonicity, serialization.

A map is a weight matrix over a multi-index basis, S(x) = W Phi(x). For
kr/krsv structures the weight matrix carries structural zeros that make
S lower-triangular as a function, which is what enables coordinate-wise
inversion and the cheap log-determinant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .basis import (
    Family,
    MultiIndexSet,
    Structure,
    build_multi_index_set,
    eval_basis,
    eval_basis_jacobian,
    identity_weight_matrix,
    kr_mask,
)
from .errors import (
    BracketNotFound,
    NoConvergence,
    NonMonotoneAtPoint,
    OtmapError,
    SchemaError,
    UnsupportedVersion,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TransportMap:
    mset: MultiIndexSet
    family: Family
    W: np.ndarray
    monotone_validated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        D, K = self.mset.dim, self.mset.size
        if self.W.shape != (D, K):
            raise OtmapError(f"weight matrix shape {self.W.shape}, expected {(D, K)}")
        if self.structure is not Structure.DENSE:
            bad = self.W[~kr_mask(self.mset)]
            if bad.size and np.any(bad != 0.0):
                raise OtmapError(
                    "weight matrix violates the triangular structural zeros"
                )
        self.W.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mset.dim

    @property
    def structure(self) -> Structure:
        return self.mset.structure

    def __call__(self, x):
        return forward(self, x)


@dataclass(frozen=True)
class SequentialMap:
    """Ordered composition of maps; stage 1 is applied first."""

    stages: tuple[TransportMap, ...]
    thetas: tuple[float, ...] = ()
    stage_info: tuple[dict, ...] = ()

    def __post_init__(self):
        if not self.stages:
            raise OtmapError("a sequential map needs at least one stage")
        dims = {s.dim for s in self.stages}
        if len(dims) != 1:
            raise OtmapError(f"stages disagree on dimension: {sorted(dims)}")
        if self.thetas and len(self.thetas) != len(self.stages):
            raise OtmapError("one theta per stage required")

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    def __call__(self, xs):
        return compose_forward(self, xs)


def identity_map(structure, dim: int, order: int, family=Family.HERMITE) -> TransportMap:
    """The map S(x) = x over the requested basis (order >= 1)."""
    mset = build_multi_index_set(structure, dim, order)
    return TransportMap(mset, Family(family), identity_weight_matrix(mset))


def forward(tmap: TransportMap, x) -> np.ndarray:
    """Evaluate S(x) = W Phi(x) at one point (D,) or a batch (N, D)."""
    phi = eval_basis(tmap.mset, tmap.family, x)
    return phi @ tmap.W.T


def diagonal_partials(tmap: TransportMap, x) -> np.ndarray:
    """The derivatives d S^d / d x_d for d = 1..D; shape (D,) or (N, D)."""
    jac = eval_basis_jacobian(tmap.mset, tmap.family, x)
    if jac.ndim == 2:
        return np.einsum("dk,kd->d", tmap.W, jac)
    return np.einsum("dk,nkd->nd", tmap.W, jac)


def log_det_jacobian(tmap: TransportMap, x) -> np.ndarray | float:
    """log det of the map Jacobian at x; requires the map be monotone there.

    Dense maps use the full determinant of W J_Phi(x); triangular maps
    use the sum of log diagonal partials. Raises NonMonotoneAtPoint with
    the offending point (and coordinate, for triangular maps) otherwise.
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    pts = x_arr[None, :] if single else x_arr
    if tmap.structure is Structure.DENSE:
        jac = eval_basis_jacobian(tmap.mset, tmap.family, pts)
        J_S = np.matmul(tmap.W, jac)
        sign, logabs = np.linalg.slogdet(J_S)
        bad = np.nonzero(sign <= 0)[0]
        if bad.size:
            n = bad[0]
            det = sign[n] * np.exp(logabs[n])
            raise NonMonotoneAtPoint(pts[n], det=float(det))
        out = logabs
    else:
        pd = diagonal_partials(tmap, pts)
        bad = np.nonzero(~np.all(pd > 0, axis=1))[0]
        if bad.size:
            n = bad[0]
            d = int(np.nonzero(pd[n] <= 0)[0][0]) + 1
            raise NonMonotoneAtPoint(pts[n], coord=d)
        out = np.sum(np.log(pd), axis=1)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class MonotonicityReport:
    ok: bool
    violations: tuple = ()


def check_monotonicity(tmap: TransportMap, points) -> MonotonicityReport:
    """Test monotonicity at each point; never raises.

    Violations are (point, coord) pairs for triangular maps (coord is
    1-based) and (point, det) pairs for dense maps.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    violations = []
    if tmap.structure is Structure.DENSE:
        jac = eval_basis_jacobian(tmap.mset, tmap.family, pts)
        J_S = np.matmul(tmap.W, jac)
        sign, logabs = np.linalg.slogdet(J_S)
        for n in np.nonzero(sign <= 0)[0]:
            violations.append((pts[n].copy(), float(sign[n] * np.exp(logabs[n]))))
    else:
        pd = diagonal_partials(tmap, pts)
        for n, d in zip(*np.nonzero(pd <= 0)):
            violations.append((pts[n].copy(), int(d) + 1))
    return MonotonicityReport(ok=not violations, violations=tuple(violations))


@dataclass(frozen=True)
class InvertOptions:
    tol: float = 1e-10
    max_bracket: float = 1e6
    max_iters: int = 200


def _invert_coord(tmap, x_partial, d, target, opts):
    """Solve S^d(x_1..x_{d-1}, t) = target for t by safeguarded Newton.

    The weight row for output d only touches basis terms in coordinates
    1..d, so trailing coordinates of the probe point are irrelevant.
    """
    w = tmap.W[d]
    point = np.zeros(tmap.dim)
    point[:d] = x_partial

    def f_and_df(t):
        point[d] = t
        phi = eval_basis(tmap.mset, tmap.family, point)
        jac = eval_basis_jacobian(tmap.mset, tmap.family, point)
        return w @ phi - target, w @ jac[:, d]

    # Expand a sign-changing bracket around the warm start by doubling.
    t0 = float(target)
    f0, _ = f_and_df(t0)
    if abs(f0) <= opts.tol:
        return t0
    h = max(1.0, 0.1 * abs(t0))
    lo = hi = t0
    flo = fhi = f0
    while True:
        if f0 > 0:
            lo = t0 - h
            flo, _ = f_and_df(lo)
            hi, fhi = t0, f0
        else:
            hi = t0 + h
            fhi, _ = f_and_df(hi)
            lo, flo = t0, f0
        if flo <= 0.0 <= fhi:
            break
        h *= 2.0
        if h > 2 * opts.max_bracket or max(abs(lo), abs(hi)) > opts.max_bracket:
            raise BracketNotFound(
                f"no sign change for coordinate {d + 1} within |t| <= {opts.max_bracket}"
            )
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi

    t = 0.5 * (lo + hi)
    for _ in range(opts.max_iters):
        ft, dft = f_and_df(t)
        if abs(ft) <= opts.tol:
            return t
        if ft > 0:
            hi = t
        else:
            lo = t
        if dft > 0:
            t_new = t - ft / dft
        else:
            t_new = t  # force bisection below
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        t = t_new
    raise NoConvergence(
        f"root finder for coordinate {d + 1} did not reach |f| <= {opts.tol} "
        f"in {opts.max_iters} iterations"
    )


def invert(tmap: TransportMap, y, opts: InvertOptions | None = None) -> np.ndarray:
    """Invert a triangular map coordinate by coordinate.

    Solves S(x) = y row by row: coordinate d is a scalar monotone
    root-finding problem given the already-recovered x_1..x_{d-1}.
    Dense maps are rejected; inversion is defined only for triangular
    structure.
    """
    if tmap.structure is Structure.DENSE:
        raise OtmapError("inversion is only supported for kr/krsv maps")
    opts = opts or InvertOptions()
    y_arr = np.asarray(y, dtype=float)
    single = y_arr.ndim == 1
    ys = y_arr[None, :] if single else y_arr
    if ys.shape[1] != tmap.dim:
        raise OtmapError(f"points have dim {ys.shape[1]}, map has dim {tmap.dim}")
    out = np.empty_like(ys)
    for n in range(ys.shape[0]):
        x = np.empty(tmap.dim)
        for d in range(tmap.dim):
            x[d] = _invert_coord(tmap, x[:d], d, ys[n, d], opts)
        out[n] = x
    return out[0] if single else out


def project_monotone(tmap: TransportMap, points, margin: float = 1e-3) -> TransportMap:
    """Least-squares projection onto maps monotone at the given points.

    Per output row d, finds the weights minimizing the squared change of
    the map's values at the points, subject to the diagonal partial
    being at least ``margin`` at every point: a convex QP with linear
    inequality constraints. Monotonicity is enforced only at the
    supplied points; validate on more points if a certificate is needed.
    """
    if tmap.structure is Structure.DENSE:
        raise OtmapError("monotone projection is only supported for kr/krsv maps")
    import cvxpy as cp

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    phi = eval_basis(tmap.mset, tmap.family, pts)
    jac = eval_basis_jacobian(tmap.mset, tmap.family, pts)
    W_new = np.array(tmap.W)
    for d in range(tmap.dim):
        kd = tmap.mset.row_sizes[d]
        A = phi[:, :kd]
        G = jac[:, :kd, d]
        target = A @ tmap.W[d, :kd]
        slopes = G @ tmap.W[d, :kd]
        if np.all(slopes >= margin):
            continue
        w = cp.Variable(kd)
        prob = cp.Problem(
            cp.Minimize(cp.sum_squares(A @ w - target)), [G @ w >= margin]
        )
        prob.solve(solver=cp.CLARABEL)
        if w.value is None:
            raise OtmapError(
                f"monotone projection QP failed for row {d + 1} (status {prob.status})"
            )
        W_new[d, :kd] = w.value
    return replace(tmap, W=W_new, monotone_validated=False)


def compose_forward(seq: SequentialMap, xs) -> np.ndarray:
    """Apply stages in order 1..T to a point or batch."""
    out = np.asarray(xs, dtype=float)
    for stage in seq.stages:
        out = forward(stage, out)
    return out


def compose_inverse(seq: SequentialMap, ys, opts: InvertOptions | None = None) -> np.ndarray:
    """Apply stage inverses in order T..1 to a point or batch."""
    out = np.asarray(ys, dtype=float)
    for t in range(len(seq.stages) - 1, -1, -1):
        try:
            out = invert(seq.stages[t], out, opts)
        except NonMonotoneAtPoint as e:
            raise NonMonotoneAtPoint(e.point, coord=e.coord, det=e.det, stage=t + 1) from e
        except (BracketNotFound, NoConvergence) as e:
            raise type(e)(f"stage {t + 1}: {e}") from e
    return out


# ---------------------------------------------------------------------------
# Serialization: one versioned document schema for maps and sequences.
# Weights roundtrip losslessly (shortest-roundtrip decimal in JSON).
# ---------------------------------------------------------------------------


def serialize(obj) -> dict:
    """Serialize a TransportMap or SequentialMap to a plain document."""
    if isinstance(obj, TransportMap):
        doc = {"version": SCHEMA_VERSION}
        doc.update(_map_fields(obj))
        return doc
    if isinstance(obj, SequentialMap):
        stages = []
        for t, stage in enumerate(obj.stages):
            entry = _map_fields(stage)
            if obj.thetas:
                entry["theta"] = obj.thetas[t]
            if obj.stage_info:
                entry["diagnostics"] = obj.stage_info[t]
            stages.append(entry)
        return {"version": SCHEMA_VERSION, "D": obj.dim, "stages": stages}
    raise OtmapError(f"cannot serialize object of type {type(obj).__name__}")


def _map_fields(tmap: TransportMap) -> dict:
    return {
        "structure": tmap.structure.value,
        "family": tmap.family.value,
        "D": tmap.dim,
        "O": tmap.mset.order,
        "indices": tmap.mset.indices.tolist(),
        "W": tmap.W.tolist(),
    }


def _require(doc, key, path):
    if key not in doc:
        raise SchemaError(path, f"missing required field '{key}'")
    return doc[key]


def _load_map_fields(doc: dict, path: str) -> TransportMap:
    structure = _require(doc, "structure", path)
    family = _require(doc, "family", path)
    D = _require(doc, "D", path)
    O = _require(doc, "O", path)
    indices = _require(doc, "indices", path)
    W = _require(doc, "W", path)
    try:
        structure = Structure(structure)
        family = Family(family)
    except ValueError as e:
        raise SchemaError(path, str(e)) from e
    if not (isinstance(D, int) and isinstance(O, int) and D >= 1 and O >= 0):
        raise SchemaError(path, f"bad dimensions D={D}, O={O}")
    mset = build_multi_index_set(structure, D, O)
    stored = np.asarray(indices, dtype=np.int64)
    if stored.shape != mset.indices.shape or np.any(stored != mset.indices):
        raise SchemaError(
            f"{path}.indices", "index list does not match the canonical ordering"
        )
    W_arr = np.asarray(W, dtype=float)
    if W_arr.shape != (D, mset.size):
        raise SchemaError(f"{path}.W", f"shape {W_arr.shape}, expected {(D, mset.size)}")
    if structure is not Structure.DENSE:
        bad = np.argwhere(~kr_mask(mset) & (W_arr != 0.0))
        if bad.size:
            d, k = bad[0]
            raise SchemaError(
                f"{path}.W[{d}][{k}]", "non-zero weight in a structural-zero slot"
            )
    return TransportMap(mset, family, W_arr)


def deserialize(doc: dict):
    """Rebuild a TransportMap or SequentialMap from a document."""
    if not isinstance(doc, dict):
        raise SchemaError("$", f"expected an object, got {type(doc).__name__}")
    version = _require(doc, "version", "$")
    if version != SCHEMA_VERSION:
        raise UnsupportedVersion(
            f"document version {version}, this build reads version {SCHEMA_VERSION}"
        )
    if "stages" in doc:
        stages_doc = doc["stages"]
        if not isinstance(stages_doc, list) or not stages_doc:
            raise SchemaError("$.stages", "expected a non-empty list")
        stages, thetas, infos = [], [], []
        for t, entry in enumerate(stages_doc):
            stages.append(_load_map_fields(entry, f"$.stages[{t}]"))
            thetas.append(float(entry.get("theta", 0.0)))
            infos.append(entry.get("diagnostics", {}))
        seq = SequentialMap(tuple(stages), tuple(thetas), tuple(infos))
        if "D" in doc and doc["D"] != seq.dim:
            raise SchemaError("$.D", f"declared {doc['D']}, stages have {seq.dim}")
        return seq
    return _load_map_fields(doc, "$")


def save_map(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(serialize(obj), fh)
        fh.write("\n")


def load_map(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError("$", f"not valid JSON: {e}") from e
    return deserialize(doc)
