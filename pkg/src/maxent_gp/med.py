"""Maximum-entropy densities and the direct Newton solver for their multipliers.

The density with N raw-power moment constraints on a bounded interval is

    f(v) = exp(-(lam_1 v + lam_2 v^2 + ... + lam_N v^N)) / Z(lam),

and matching a target moment vector p = (p_1, ..., p_N) is the unconstrained
convex minimization of the normalized dual

    D(lam) = ln Z(lam) + sum_j lam_j p_j,

whose gradient is the moment mismatch g_j = p_j - E_f[v^j] and whose Hessian
is the covariance matrix of the monomials (v, v^2, ..., v^N) under f, hence
symmetric positive definite. Newton steps with Armijo backtracking drive the
gradient infinity-norm below tolerance; the stopping test is on the gradient
because that is the quantity that certifies moment matching.

All exponentials are evaluated with the max-shift trick so Z never overflows:
ln Z = m + ln sum_k w_k exp(s_k - m) with s_k the exponent at node k and
m = max_k s_k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    ConditioningError,
    ConvergenceError,
    DegenerateMomentsError,
    LineSearchError,
    SaturationError,
)
from .quadrature import DEFAULT_QUAD_ORDER, QuadratureRule, VelocityDomain, build_rule

__all__ = [
    "MomentVector",
    "SolverOptions",
    "MaxEntDensity",
    "NewtonResult",
    "density_value",
    "moments_of",
    "dual_objective",
    "dual_gradient",
    "dual_hessian",
    "newton_solve",
    "rescale_multipliers",
    "kl_divergence",
    "standardize_raw_moments",
    "raw_moments_of_function",
]

SUPPORTED_N = (4, 6, 8)
# |p_1| and |p_2 - 1| below this mark a moment vector as standardized.
STANDARDIZED_TOL = 1e-8
# exp() saturates in float64 well before this; used as the diagnostic cutoff.
_EXP_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class MomentVector:
    """Raw power moments p_j = integral of v^j f(v) dv for j = 1..N."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        if vals.ndim != 1 or vals.size not in SUPPORTED_N:
            raise DegenerateMomentsError(
                f"moment vector must have length in {SUPPORTED_N}, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise DegenerateMomentsError("moment vector has non-finite entries")
        if vals[1] <= 0:
            raise DegenerateMomentsError(f"p_2 must be positive, got {vals[1]}")
        for j in range(4, vals.size + 1, 2):
            if vals[j - 1] <= 0:
                raise DegenerateMomentsError(f"even moment p_{j} must be positive, got {vals[j - 1]}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_moments(self) -> int:
        return self.values.size

    @property
    def standardized(self) -> bool:
        return bool(abs(self.values[0]) <= STANDARDIZED_TOL and abs(self.values[1] - 1.0) <= STANDARDIZED_TOL)

    def __getitem__(self, j: int) -> float:
        """One-based access: self[j] is p_j."""
        if not 1 <= j <= self.n_moments:
            raise IndexError(f"moment index must be in 1..{self.n_moments}")
        return float(self.values[j - 1])


@dataclass(frozen=True)
class SolverOptions:
    """Newton-Armijo controls; defaults follow the direct-solve recipe."""

    tol: float = 1e-10
    armijo_c: float = 1e-4
    armijo_s: float = 0.5
    max_backtracks: int = 30
    max_iters: int = 200
    init_box: float = 0.1

    def __post_init__(self):
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0 < self.armijo_s < 1:
            raise ValueError("armijo_s must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True, eq=False)
class NewtonResult:
    lam: np.ndarray
    iterations: int
    grad_norm: float


def _as_lambda(lam) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.ndim != 1:
        raise ValueError("lambda must be a 1-D vector")
    if not np.all(np.isfinite(lam)):
        raise ValueError("lambda has non-finite entries")
    return lam


def _as_moments(p) -> np.ndarray:
    if isinstance(p, MomentVector):
        return p.values
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.ndim != 1 or not np.all(np.isfinite(p)):
        raise DegenerateMomentsError("moment vector must be a finite 1-D vector")
    return p


class _DualWorkspace:
    """Node powers and weights cached for repeated dual evaluations."""

    def __init__(self, rule: QuadratureRule, n_moments: int):
        self.rule = rule
        self.n = n_moments
        self.P = rule.powers(2 * n_moments)  # (K, 2N+1)
        self.w = rule.weights

    def log_z_and_probs(self, lam: np.ndarray) -> tuple[float, np.ndarray]:
        s = -(self.P[:, 1 : self.n + 1] @ lam)
        m = float(s.max())
        e = self.w * np.exp(s - m)
        z_shifted = float(e.sum())
        return m + math.log(z_shifted), e / z_shifted

    def log_z(self, lam: np.ndarray) -> float:
        return self.log_z_and_probs(lam)[0]

    def raw_moments(self, lam: np.ndarray, j_max: int) -> np.ndarray:
        _, q = self.log_z_and_probs(lam)
        return q @ self.P[:, 1 : j_max + 1]

    def moments_and_hessian(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First N moments and the monomial covariance matrix under f_lam.

        The covariance is accumulated from centered monomials, which keeps it
        positive semi-definite in floating point even when the density
        collapses onto a few nodes (the naive E[v^(i+j)] - E[v^i]E[v^j] form
        cancels catastrophically there).
        """
        _, q = self.log_z_and_probs(lam)
        phi = self.P[:, 1 : self.n + 1]
        m1 = q @ phi
        centered = phi - m1
        H = (centered * q[:, None]).T @ centered
        return m1, 0.5 * (H + H.T)


def _default_rule(domain: VelocityDomain | None, rule: QuadratureRule | None) -> QuadratureRule:
    if rule is not None:
        return rule
    return build_rule(domain if domain is not None else VelocityDomain())


class MaxEntDensity:
    """Normalized density exp(-sum lam_j v^j)/Z on a bounded domain.

    The normalization is fixed at construction from the quadrature rule, so
    integral of f over the domain is 1 by construction (up to roundoff) and
    instances are immutable and shareable.
    """

    __slots__ = ("lam", "domain", "rule", "log_z", "_node_probs")

    def __init__(self, lam, domain: VelocityDomain | None = None, rule: QuadratureRule | None = None):
        lam = _as_lambda(lam)
        rule = _default_rule(domain, rule)
        ws = _DualWorkspace(rule, lam.size)
        log_z, q = ws.log_z_and_probs(lam)
        lam.setflags(write=False)
        self.lam = lam
        self.domain = rule.domain
        self.rule = rule
        self.log_z = log_z
        self._node_probs = q  # w_k f(v_k), sums to 1

    @property
    def n_moments(self) -> int:
        return self.lam.size

    @property
    def z(self) -> float:
        if self.log_z > _EXP_LIMIT:
            raise SaturationError(
                f"Z overflows float64 (ln Z = {self.log_z:.3g}); work with log_z instead"
            )
        return math.exp(self.log_z)

    def log_density(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        js = np.arange(1, self.lam.size + 1)
        s = -(v[..., None] ** js) @ self.lam
        return s - self.log_z

    def __call__(self, v) -> np.ndarray:
        return np.exp(self.log_density(v))


def density_value(d: MaxEntDensity, v: float) -> float:
    """Point evaluation of the density, with an explicit overflow guard."""
    log_f = float(d.log_density(float(v)))
    if log_f > _EXP_LIMIT:
        raise SaturationError(
            f"density exponent {log_f:.3g} at v={v:.6g} exceeds the exp() range; "
            "the multipliers describe a near-singular spike"
        )
    return math.exp(log_f)


def moments_of(d: MaxEntDensity, n_moments: int | None = None) -> MomentVector:
    """Raw moments p_j of the density for j = 1..n_moments by quadrature."""
    n = d.n_moments if n_moments is None else int(n_moments)
    P = d.rule.powers(n)
    return MomentVector(d._node_probs @ P[:, 1:])


def raw_moments_of_function(f, rule: QuadratureRule, n_moments: int, normalize: bool = False) -> np.ndarray:
    """Raw moments (p_1..p_N) of an arbitrary nonnegative function by quadrature.

    With normalize=True the values are divided by the quadrature mass, i.e.
    they are moments of f rescaled to unit mass on the domain.
    """
    vals = np.asarray(f(rule.nodes), dtype=float)
    q = rule.weights * vals
    P = rule.powers(n_moments)
    p = q @ P[:, 1:]
    if normalize:
        mass = float(q.sum())
        if mass <= 0:
            raise DegenerateMomentsError("function has nonpositive mass on the domain")
        p = p / mass
    return p


def dual_objective(lam, p, domain: VelocityDomain | None = None, rule: QuadratureRule | None = None) -> float:
    """Normalized dual D(lam) = ln Z(lam) + lam . p."""
    lam = _as_lambda(lam)
    pv = _as_moments(p)
    ws = _DualWorkspace(_default_rule(domain, rule), lam.size)
    return ws.log_z(lam) + float(lam @ pv)


def dual_gradient(lam, p, domain: VelocityDomain | None = None, rule: QuadratureRule | None = None) -> np.ndarray:
    """Gradient of the dual: g_j = p_j - E_f[v^j]."""
    lam = _as_lambda(lam)
    pv = _as_moments(p)
    ws = _DualWorkspace(_default_rule(domain, rule), lam.size)
    return pv - ws.raw_moments(lam, lam.size)


def dual_hessian(lam, domain: VelocityDomain | None = None, rule: QuadratureRule | None = None) -> np.ndarray:
    """Hessian of the dual: H_ij = Cov_f(v^i, v^j), symmetric positive definite."""
    lam = _as_lambda(lam)
    ws = _DualWorkspace(_default_rule(domain, rule), lam.size)
    return ws.moments_and_hessian(lam)[1]


def _damped_direction(H: np.ndarray, g: np.ndarray, jitter: float) -> tuple[np.ndarray, float] | None:
    """Newton direction at one jitter level, or None if unusable.

    The system is solved in diagonally scaled (correlation) form: monomial
    variances span many orders of magnitude and the rescaling keeps the
    factorization well behaved without changing the exact step.
    """
    n = H.shape[0]
    diag = np.diag(H)
    if not np.all(np.isfinite(diag)) or np.all(diag <= 0):
        return None
    # roundoff can push near-degenerate variances to 0-; scale those mildly
    floor = float(diag.max()) * 1e-30 + 1e-300
    d = 1.0 / np.sqrt(np.maximum(diag, floor))
    C = H * np.outer(d, d)  # unit diagonal up to the floor
    try:
        factor = sla.cho_factor(C + jitter * np.eye(n), lower=True, check_finite=False)
        delta = -d * sla.cho_solve(factor, g * d, check_finite=False)
    except sla.LinAlgError:
        return None
    with np.errstate(over="ignore", invalid="ignore"):
        slope = float(g @ delta)
    if not (np.all(np.isfinite(delta)) and slope < 0):
        return None
    return delta, slope


# An unlucky random init can land on a density whose mass sits in a thin
# boundary layer; the Newton direction through the (near-singular) Hessian is
# then useless and the line search dies immediately. A fresh draw from the
# same generator fixes this with probability ~1/2 per attempt, so a handful
# of deterministic restarts makes failures on solvable targets negligible.
_MAX_RESTARTS = 20


def newton_solve(
    p,
    opts: SolverOptions | None = None,
    rng_seed: int | np.random.Generator | None = 0,
    domain: VelocityDomain | None = None,
    rule: QuadratureRule | None = None,
    callback=None,
) -> NewtonResult:
    """Solve the dual problem for the multipliers matching the moments p.

    Starts from a uniform draw in [-init_box, init_box]^N, takes damped Newton
    steps delta = -H^{-1} g with Armijo backtracking over beta in
    {s^0, ..., s^max_backtracks}, and stops when the gradient infinity-norm
    drops below opts.tol. Attempts that die in the factorization or the line
    search are retried from a fresh seeded draw.

    callback, if given, is invoked as callback(iteration, lam, dual_value,
    grad_norm) at the top of every iteration (restarts reset the count).

    Raises ConvergenceError / LineSearchError / ConditioningError when the
    respective budget is exhausted even after restarts; the moments may then
    be unrealizable or numerically degenerate on the given rule.
    """
    opts = opts or SolverOptions()
    pv = _as_moments(p)
    n = pv.size
    rule = _default_rule(domain, rule)
    ws = _DualWorkspace(rule, n)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)

    last_error: Exception | None = None
    for _ in range(_MAX_RESTARTS + 1):
        lam = rng.uniform(-opts.init_box, opts.init_box, size=n)
        try:
            return _newton_iterate(lam, pv, ws, opts, callback=callback)
        except (ConditioningError, LineSearchError, ConvergenceError) as err:
            last_error = err
    raise last_error


def _newton_iterate(
    lam: np.ndarray,
    pv: np.ndarray,
    ws: _DualWorkspace,
    opts: SolverOptions,
    callback=None,
) -> NewtonResult:
    n = pv.size
    grad_norm = math.inf
    for iteration in range(opts.max_iters):
        m1, H = ws.moments_and_hessian(lam)
        g = pv - m1
        grad_norm = float(np.max(np.abs(g)))
        d0 = ws.log_z(lam) + float(lam @ pv)
        if callback is not None:
            callback(iteration, lam, d0, grad_norm)
        if grad_norm <= opts.tol:
            return NewtonResult(lam=lam, iterations=iteration, grad_norm=grad_norm)

        # When the Hessian is near singular, the barely-jittered direction can
        # be orders of magnitude too long for any backtracked step to succeed,
        # so a rejected line search escalates the same ladder: more jitter, a
        # shorter and more gradient-like direction. The top rungs approach
        # steepest descent in the scaled metric, where Armijo must accept.
        jitter = 0.0
        accepted = False
        direction_seen = False
        for attempt in range(15):
            pair = _damped_direction(H, g, jitter)
            jitter = 1e-12 if attempt == 0 else jitter * 10.0
            if pair is None:
                continue
            direction_seen = True
            delta, slope = pair
            beta = 1.0
            for _ in range(opts.max_backtracks + 1):
                trial = lam + beta * delta
                if ws.log_z(trial) + float(trial @ pv) <= d0 + opts.armijo_c * beta * slope:
                    lam = trial
                    accepted = True
                    break
                beta *= opts.armijo_s
            if accepted:
                break
        if not accepted:
            if not direction_seen:
                raise ConditioningError(
                    f"dual Hessian yields no usable Newton direction at iteration {iteration}; "
                    "the density is numerically degenerate on this quadrature rule"
                )
            raise LineSearchError(
                f"Armijo backtracking exhausted ({opts.max_backtracks} halvings) at every "
                f"damping level, iteration {iteration}, gradient norm {grad_norm:.3g}"
            )

    raise ConvergenceError(
        f"Newton did not reach tol={opts.tol:g} in {opts.max_iters} iterations "
        f"(last gradient norm {grad_norm:.3g})",
        grad_norm=grad_norm,
        iterations=opts.max_iters,
    )


def rescale_multipliers(lam_tilde, mu: float, sigma: float) -> np.ndarray:
    """Multipliers of the density in the shifted/scaled coordinate (v - mu)/sigma.

    Binomial expansion of the exponent under v = sigma*v' + mu:

        lam_i = sigma^i lam~_i + sum_{j>i} lam~_j C(j, i) sigma^i mu^(j-i).

    Exact on the whole real line; on a bounded domain it is the contraction
    step of the standardization fixed-point iteration.
    """
    lam_tilde = _as_lambda(lam_tilde)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n = lam_tilde.size
    out = np.empty(n)
    for i in range(1, n + 1):
        acc = sigma**i * lam_tilde[i - 1]
        for j in range(i + 1, n + 1):
            acc += lam_tilde[j - 1] * math.comb(j, i) * sigma**i * mu ** (j - i)
        out[i - 1] = acc
    return out


def kl_divergence(f_ref, d: MaxEntDensity, rule: QuadratureRule | None = None) -> float:
    """Kullback-Leibler divergence of the density d from a reference function.

    Computes integral of f_ref ln(f_ref / f) with the convention
    0 * ln(0 / x) = 0. f_ref may be any nonnegative callable; it is evaluated
    at the rule nodes.
    """
    rule = rule or d.rule
    ref = np.asarray(f_ref(rule.nodes), dtype=float)
    if np.any(ref < 0):
        k = int(np.flatnonzero(ref < 0)[0])
        raise ValueError(f"reference density is negative at v={rule.nodes[k]:.6g}")
    log_f = d.log_density(rule.nodes)
    pos = ref > 0
    integrand = np.zeros_like(ref)
    integrand[pos] = ref[pos] * (np.log(ref[pos]) - log_f[pos])
    return float(rule.weights @ integrand)


def standardize_raw_moments(raw: MomentVector | np.ndarray) -> tuple[float, float, MomentVector]:
    """Shift/scale raw moments to the zero-mean unit-variance coordinate.

    Returns (mu, sigma, standardized) with mu = p_1, sigma = sqrt(p_2 - p_1^2)
    and p^_k = E[((v - mu)/sigma)^k] expanded through binomial sums of the raw
    moments (p_0 = 1). The first two standardized moments are 0 and 1 by
    construction and are set exactly.
    """
    pv = _as_moments(raw)
    mu = float(pv[0])
    var = float(pv[1]) - mu * mu
    if var <= 0:
        raise DegenerateMomentsError(f"nonpositive central variance {var:.3g}; cannot standardize")
    sigma = math.sqrt(var)
    full = np.concatenate(([1.0], pv))  # p_0..p_N
    n = pv.size
    out = np.empty(n)
    for k in range(1, n + 1):
        acc = 0.0
        for i in range(k + 1):
            acc += math.comb(k, i) * (-mu) ** (k - i) * full[i]
        out[k - 1] = acc / sigma**k
    out[0] = 0.0
    out[1] = 1.0
    return mu, sigma, MomentVector(out)
