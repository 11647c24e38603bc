"""Transport maps from samples by consensus ADMM.

Fits polynomial maps pushing samples from a source distribution onto a
log-concave target density known up to normalization, either in one shot
(dense structure) or as a sequential composition of transport-cost
regularized lower-triangular stages.
"""

from .basis import (
    Family,
    MultiIndexSet,
    Structure,
    build_multi_index_set,
    eval_basis,
    eval_basis_jacobian,
    eval_basis_partial,
)
from .density import (
    BayesPosterior,
    TargetDensity,
    bayes_lasso_posterior,
    gaussian_target,
    laplace_prior,
)
from .maps import (
    SequentialMap,
    TransportMap,
    check_monotonicity,
    compose_forward,
    compose_inverse,
    deserialize,
    identity_map,
    invert,
    load_map,
    project_monotone,
    save_map,
    serialize,
)
from .solver import BasisSpec, SolverConfig
from .admm_dense import fit_dense
from .admm_kr import fit_kr_stage
from .composer import empirical_objective, fit_sequential, kl_decay_check

__all__ = [
    "Family",
    "MultiIndexSet",
    "Structure",
    "build_multi_index_set",
    "eval_basis",
    "eval_basis_jacobian",
    "eval_basis_partial",
    "BayesPosterior",
    "TargetDensity",
    "bayes_lasso_posterior",
    "gaussian_target",
    "laplace_prior",
    "SequentialMap",
    "TransportMap",
    "check_monotonicity",
    "compose_forward",
    "compose_inverse",
    "deserialize",
    "identity_map",
    "invert",
    "load_map",
    "project_monotone",
    "save_map",
    "serialize",
    "BasisSpec",
    "SolverConfig",
    "fit_dense",
    "fit_kr_stage",
    "empirical_objective",
    "fit_sequential",
    "kl_decay_check",
]

__version__ = "0.1.0"
