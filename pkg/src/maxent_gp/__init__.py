"""Maximum-entropy moment closure accelerated by Gaussian-process regression.

Subpackages:
    quadrature  - Gauss-Legendre rules on a bounded velocity interval
    med         - maximum-entropy densities and the Newton dual solver
    datagen     - standardized (lambda, p) training-pair generation
    gp          - per-output GP regression from moments to multipliers
    closure     - the GP-accelerated closure pipeline
    experiments - reproductions of the paper-style test cases
    cli         - command-line front end
"""

from .errors import MaxEntError
from .quadrature import DEFAULT_QUAD_ORDER, QuadratureRule, VelocityDomain, build_rule, integrate
from .med import (
    MaxEntDensity,
    MomentVector,
    NewtonResult,
    SolverOptions,
    density_value,
    dual_gradient,
    dual_hessian,
    dual_objective,
    kl_divergence,
    moments_of,
    newton_solve,
    rescale_multipliers,
    standardize_raw_moments,
)

__version__ = "0.1.0"
