"""Multi-index sets and multivariate polynomial basis evaluation.

A basis term is indexed by an exponent vector j of length D and evaluates
as the product of univariate polynomials, one per coordinate:

    phi_j(x) = prod_a psi_{j_a}(x_a)

Three truncations are supported. ``dense`` keeps every j with total order
at most O. ``kr`` orders the same terms so that the first K_d of them
depend only on the first d coordinates, which is what makes a map with a
lower-triangular weight matrix lower-triangular as a function. ``krsv``
additionally drops every mixed term (terms involving two or more
coordinates), leaving d*O + 1 admissible terms per output row.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import OtmapError

# Hard guard against accidental dense construction at high dimension:
# C(D+O, O) grows combinatorially.
DEFAULT_K_CAP = 10**6


class Structure(str, enum.Enum):
    DENSE = "dense"
    KR = "kr"
    KRSV = "krsv"


class Family(str, enum.Enum):
    # Probabilists' Hermite: He_{n+1}(x) = x He_n(x) - n He_{n-1}(x),
    # orthogonal under the standard Gaussian reference measure.
    HERMITE = "hermite"
    # Plain powers, kept for debugging and hand-checkable tests.
    MONOMIAL = "monomial"


@dataclass(frozen=True)
class MultiIndexSet:
    """An ordered set of exponent vectors defining a polynomial basis.

    ``indices`` has shape (K, D). Ordering is canonical: indices are
    grouped by their block d (the largest coordinate with a non-zero
    exponent; the constant term sits in block 1), and sorted within a
    block by total order, then lexicographically. ``row_sizes[d-1]``
    counts the leading terms that depend only on coordinates 1..d; for
    the dense structure it is informational, for kr/krsv it defines the
    structural zeros of a weight matrix row.
    """

    structure: Structure
    dim: int
    order: int
    indices: np.ndarray
    row_sizes: tuple[int, ...]

    def __post_init__(self):
        self.indices.setflags(write=False)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def position(self, j) -> int:
        """Position of exponent vector ``j`` in the canonical ordering."""
        j = tuple(int(v) for v in j)
        for k, row in enumerate(self.indices):
            if tuple(row) == j:
                return k
        raise KeyError(f"exponent vector {j} not in set")


def _block_tuples(d: int, budget: int):
    """All exponent tuples of length d with sum <= budget and j_d >= 1."""
    if d == 1:
        for m in range(1, budget + 1):
            yield (m,)
        return
    for head in _tuples_leq(d - 1, budget - 1):
        used = sum(head)
        for m in range(1, budget - used + 1):
            yield head + (m,)


def _tuples_leq(d: int, budget: int):
    """All exponent tuples of length d with sum <= budget."""
    if d == 0:
        yield ()
        return
    for head in _tuples_leq(d - 1, budget):
        for m in range(budget - sum(head) + 1):
            yield head + (m,)


def _dense_size(dim: int, order: int) -> int:
    return math.comb(dim + order, order)


def build_multi_index_set(
    structure: Structure | str,
    dim: int,
    order: int,
    k_cap: int = DEFAULT_K_CAP,
) -> MultiIndexSet:
    """Construct the canonical multi-index set for a map structure.

    Parameters
    ----------
    structure : one of "dense", "kr", "krsv"
    dim : ambient dimension D (>= 1)
    order : maximum total polynomial order O (>= 0)
    k_cap : refuse to build sets with more than this many terms

    Raises
    ------
    OtmapError : if dim < 1, order < 0, or the set would exceed k_cap.
    """
    structure = Structure(structure)
    if dim < 1:
        raise OtmapError(f"dimension must be >= 1, got {dim}")
    if order < 0:
        raise OtmapError(f"order must be >= 0, got {order}")

    if structure is Structure.KRSV:
        total = dim * order + 1
    else:
        total = _dense_size(dim, order)
    if total > k_cap:
        raise OtmapError(
            f"{structure.value} set at D={dim}, O={order} has {total} terms, "
            f"above the cap of {k_cap}; use kr/krsv structure or lower the order"
        )

    blocks: list[list[tuple[int, ...]]] = []
    for d in range(1, dim + 1):
        if structure is Structure.KRSV:
            block = [(0,) * (d - 1) + (m,) for m in range(1, order + 1)]
        else:
            block = [t for t in _block_tuples(d, order)]
        block.sort(key=lambda t: (sum(t), t))
        blocks.append(block)
    rows: list[tuple[int, ...]] = [(0,) * dim]
    row_sizes = []
    for d, block in enumerate(blocks, start=1):
        rows.extend(t + (0,) * (dim - d) for t in block)
        row_sizes.append(len(rows))

    indices = np.array(rows, dtype=np.int64).reshape(len(rows), dim)
    return MultiIndexSet(structure, dim, order, indices, tuple(row_sizes))


def kr_mask(mset: MultiIndexSet) -> np.ndarray:
    """Boolean (D, K) mask of admissible weight entries per output row.

    All-true for dense sets; for kr/krsv, row d admits only the leading
    row_sizes[d-1] terms.
    """
    D, K = mset.dim, mset.size
    if mset.structure is Structure.DENSE:
        return np.ones((D, K), dtype=bool)
    mask = np.zeros((D, K), dtype=bool)
    for d in range(D):
        mask[d, : mset.row_sizes[d]] = True
    return mask


def identity_weight_matrix(mset: MultiIndexSet) -> np.ndarray:
    """Weights encoding S(x) = x (both families have psi_1(x) = x).

    Requires order >= 1; with a constant-only basis the identity map is
    not representable and the returned matrix is all zero.
    """
    D, K = mset.dim, mset.size
    W = np.zeros((D, K))
    if mset.order < 1:
        return W
    for d in range(D):
        e_d = tuple(1 if a == d else 0 for a in range(D))
        W[d, mset.position(e_d)] = 1.0
    return W


def _univariate_tables(family: Family, x: np.ndarray, order: int):
    """Values and derivatives of psi_0..psi_order at every entry of x.

    Returns (P, dP), each with shape x.shape + (order + 1,).
    """
    P = np.empty(x.shape + (order + 1,))
    dP = np.empty_like(P)
    P[..., 0] = 1.0
    dP[..., 0] = 0.0
    if order == 0:
        return P, dP
    if family is Family.HERMITE:
        P[..., 1] = x
        for n in range(1, order):
            P[..., n + 1] = x * P[..., n] - n * P[..., n - 1]
        for n in range(1, order + 1):
            dP[..., n] = n * P[..., n - 1]
    elif family is Family.MONOMIAL:
        for n in range(1, order + 1):
            P[..., n] = P[..., n - 1] * x
        for n in range(1, order + 1):
            dP[..., n] = n * P[..., n - 1]
    else:
        raise OtmapError(f"unknown family {family}")
    return P, dP


def _as_points(mset: MultiIndexSet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != mset.dim:
        raise OtmapError(
            f"expected points of dimension {mset.dim}, got array of shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise OtmapError("basis evaluation requires finite input")
    return x, single


def eval_basis(mset: MultiIndexSet, family: Family | str, x) -> np.ndarray:
    """Evaluate all K basis terms at x.

    x may be a single point (D,) or a batch (N, D); the result has shape
    (K,) or (N, K) accordingly.
    """
    family = Family(family)
    x, single = _as_points(mset, x)
    P, _ = _univariate_tables(family, x, mset.order)
    N, K = x.shape[0], mset.size
    out = np.ones((N, K))
    for a in range(mset.dim):
        out *= P[:, a, mset.indices[:, a]]
    return out[0] if single else out


def eval_basis_jacobian(mset: MultiIndexSet, family: Family | str, x) -> np.ndarray:
    """Jacobian of the basis vector: entry (k, a) is d phi_k / d x_a.

    Shape (K, D) for a single point, (N, K, D) for a batch.
    """
    family = Family(family)
    x, single = _as_points(mset, x)
    P, dP = _univariate_tables(family, x, mset.order)
    N, D, K = x.shape[0], mset.dim, mset.size

    # factors[:, a, :] = psi_{j_a}(x_a) per term; prefix/suffix products
    # give prod_{b != a} without dividing by possibly-zero factors.
    factors = np.empty((N, D, K))
    dfactors = np.empty((N, D, K))
    for a in range(D):
        factors[:, a] = P[:, a, mset.indices[:, a]]
        dfactors[:, a] = dP[:, a, mset.indices[:, a]]
    prefix = np.ones((N, D + 1, K))
    suffix = np.ones((N, D + 1, K))
    for a in range(D):
        prefix[:, a + 1] = prefix[:, a] * factors[:, a]
    for a in range(D - 1, -1, -1):
        suffix[:, a] = suffix[:, a + 1] * factors[:, a]
    jac = np.empty((N, K, D))
    for a in range(D):
        jac[:, :, a] = dfactors[:, a] * prefix[:, a] * suffix[:, a + 1]
    return jac[0] if single else jac


def eval_basis_partial(mset: MultiIndexSet, family: Family | str, x, coord: int) -> np.ndarray:
    """Partial derivative of every basis term along one coordinate.

    ``coord`` is 1-based (1 <= coord <= D). Equals column coord of the
    basis Jacobian.
    """
    if not 1 <= coord <= mset.dim:
        raise OtmapError(f"coordinate must be in 1..{mset.dim}, got {coord}")
    jac = eval_basis_jacobian(mset, family, x)
    return jac[..., coord - 1]
