"""GP-accelerated closure: raw moments in, reconstructed density out.

Incoming raw moments are shifted/scaled to the zero-mean unit-variance
coordinate, the trained GP predicts the multipliers there, and the density is
normalized on the standardized domain. The (mu, sigma) pair maps the result
back to the original coordinate:

    f_raw(v) = f_std((v - mu) / sigma) / sigma.

Standardized inputs outside the training moment box are not rejected; the
posterior variance is the trust signal and the result carries a warning flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import default_moment_box
from .gp import GPModel, predict
from .med import MaxEntDensity, MomentVector, moments_of, standardize_raw_moments
from .quadrature import QuadratureRule, VelocityDomain, build_rule, DEFAULT_QUAD_ORDER

__all__ = ["ClosureResult", "close_moments", "lambda_relative_error", "moment_relative_error"]


@dataclass(frozen=True, eq=False)
class ClosureResult:
    """Predicted density in standardized coordinates plus diagnostics."""

    density: MaxEntDensity
    lambda_hat: np.ndarray
    posterior_variance: np.ndarray
    reconstructed_moments: MomentVector
    input_standardized: MomentVector
    mu: float
    sigma: float
    out_of_box: bool

    def density_raw(self, v) -> np.ndarray:
        """The density mapped back to the original (unstandardized) coordinate."""
        v = np.asarray(v, dtype=float)
        return self.density((v - self.mu) / self.sigma) / self.sigma


def close_moments(
    model: GPModel,
    raw: MomentVector,
    domain: VelocityDomain | None = None,
    rule: QuadratureRule | None = None,
) -> ClosureResult:
    """Standardize raw moments, predict multipliers, rebuild the density."""
    if rule is None:
        rule = build_rule(domain if domain is not None else VelocityDomain(), DEFAULT_QUAD_ORDER)
    mu, sigma, p_std = standardize_raw_moments(raw)
    box = default_moment_box(model.n_moments)
    # components 1 and 2 are exactly (0, 1) after standardization
    inside = np.all(p_std.values[2:] >= box[2:, 0]) and np.all(p_std.values[2:] <= box[2:, 1])
    pred = predict(model, p_std)
    density = MaxEntDensity(pred.mean, rule=rule)
    return ClosureResult(
        density=density,
        lambda_hat=pred.mean,
        posterior_variance=pred.variance,
        reconstructed_moments=moments_of(density, model.n_moments),
        input_standardized=p_std,
        mu=mu,
        sigma=sigma,
        out_of_box=not inside,
    )


def lambda_relative_error(lambda_hat, lambda_exact) -> float:
    """Euclidean relative error of predicted multipliers against a reference."""
    lam_hat = np.asarray(lambda_hat, dtype=float)
    lam_ex = np.asarray(lambda_exact, dtype=float)
    ref = float(np.linalg.norm(lam_ex))
    if ref == 0:
        raise ValueError("reference multipliers have zero norm")
    return float(np.linalg.norm(lam_hat - lam_ex)) / ref


def moment_relative_error(p_hat, p_ref) -> float:
    """Mean componentwise relative error over the free moments p_3..p_N.

    p_1 and p_2 are pinned by standardization and excluded; each component is
    normalized by max(|p_k|, 1).
    """
    ph = p_hat.values if isinstance(p_hat, MomentVector) else np.asarray(p_hat, dtype=float)
    pr = p_ref.values if isinstance(p_ref, MomentVector) else np.asarray(p_ref, dtype=float)
    if ph.shape != pr.shape:
        raise ValueError("moment vectors must have equal length")
    free_h, free_r = ph[2:], pr[2:]
    return float(np.mean(np.abs(free_h - free_r) / np.maximum(np.abs(free_r), 1.0)))
