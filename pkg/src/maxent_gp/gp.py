"""Per-output Gaussian-process regression from moments to multipliers.

One GP is fitted independently for every multiplier component. Inputs are
the scaled free moments (p_3..p_N); targets are the scaled multipliers.
Kernels are stationary with one signal variance and one inverse squared
length scale per input dimension (ARD):

    r^2 = sum_f u_f (x_f - x'_f)^2,
    rbf      k = s exp(-r^2 / 2)
    matern12 k = s exp(-r)
    matern32 k = s (1 + sqrt(3) r) exp(-sqrt(3) r)
    matern52 k = s (1 + sqrt(5) r + (5/3) r^2) exp(-sqrt(5) r)

Hyperparameters are fitted by maximizing the log marginal likelihood

    L = -1/2 ln det K - 1/2 y^T K^{-1} y - M/2 ln(2 pi)

over log-parameters with box constraints and a seeded multi-start, using
analytic gradients through the Cholesky factor. Prediction needs only the
precomputed factor and weight vector, so it is a matrix-vector product.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .datagen import Dataset, ScalingStats, compute_scaling, write_atomic
from .errors import ConditioningError, FitError, ModelFormatError
from .med import MomentVector

__all__ = [
    "KERNEL_FAMILIES",
    "KernelSpec",
    "FitOptions",
    "GPOutputModel",
    "GPModel",
    "Prediction",
    "kernel_eval",
    "kernel_matrix",
    "gram_matrix",
    "log_marginal_likelihood",
    "fit_hyperparameters",
    "train_model",
    "predict",
    "predict_batch",
    "save_model",
    "load_model",
]

KERNEL_FAMILIES = ("rbf", "matern12", "matern32", "matern52")

MODEL_SCHEMA_VERSION = 1

# Nugget added to the Gram diagonal, relative to the signal variance. The
# targets are noiseless but Gram matrices at M ~ 1000 with tight length
# scales are numerically singular without it.
JITTER_RELATIVE = 1e-8

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """Kernel family plus hyperparameters (all positive).

    noise_variance is the fitted observation noise added to the Gram
    diagonal. The multiplier targets are noiseless in principle, but close to
    the realizability boundary the moment-to-multiplier map steepens until
    nearby inputs carry very different targets; a trainable nugget is what
    keeps the likelihood finite and the posterior mean usable there.
    """

    family: str
    signal_variance: float
    inv_length_scales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        fam = self.family.lower()
        if fam not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; pick one of {KERNEL_FAMILIES}")
        object.__setattr__(self, "family", fam)
        if self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")
        ils = np.atleast_1d(np.asarray(self.inv_length_scales, dtype=float))
        if np.any(ils <= 0):
            raise ValueError("inverse length scales must be positive")
        object.__setattr__(self, "inv_length_scales", ils)

    @property
    def n_features(self) -> int:
        return self.inv_length_scales.size


def _sq_dists(X: np.ndarray, X2: np.ndarray, inv_ls: np.ndarray) -> np.ndarray:
    """Weighted squared distances r^2 between rows of X and X2.

    Small problems use direct differences (exact zeros for identical points,
    which matters for kernels that are non-smooth in r at 0); large ones use
    the norm expansion to avoid the (A, B, F) tensor. Self-distances get an
    exactly zero diagonal.
    """
    a, f = X.shape
    b = X2.shape[0]
    if a * b * f <= 4_000_000:
        d = X[:, None, :] - X2[None, :, :]
        sq = np.einsum("abf,f->ab", d * d, inv_ls)
    else:
        Xw = X * np.sqrt(inv_ls)
        X2w = X2 * np.sqrt(inv_ls)
        sq = (Xw * Xw).sum(axis=1)[:, None] + (X2w * X2w).sum(axis=1)[None, :] - 2.0 * (Xw @ X2w.T)
    sq = np.maximum(sq, 0.0)
    if X2 is X:
        np.fill_diagonal(sq, 0.0)
    return sq


def _kernel_from_r2(family: str, s: float, r2: np.ndarray) -> np.ndarray:
    if family == "rbf":
        return s * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if family == "matern12":
        return s * np.exp(-r)
    if family == "matern32":
        return s * (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)
    return s * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * np.exp(-_SQRT5 * r)


def kernel_matrix(spec: KernelSpec, X: np.ndarray, X2: np.ndarray | None = None) -> np.ndarray:
    """Kernel evaluated on all pairs of rows of X (and X2)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != spec.n_features or X2.shape[1] != spec.n_features:
        raise ValueError(f"inputs must have {spec.n_features} features")
    r2 = _sq_dists(X, X2, spec.inv_length_scales)
    return _kernel_from_r2(spec.family, spec.signal_variance, r2)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Kernel value for a single pair of points."""
    return float(kernel_matrix(spec, np.atleast_2d(x), np.atleast_2d(x2))[0, 0])


def _grad_prefactor(family: str, s: float, r2: np.ndarray, K: np.ndarray) -> np.ndarray:
    """T with dK/du_f = T * D2_f where D2_f is the per-feature squared diff."""
    if family == "rbf":
        return -0.5 * K
    r = np.sqrt(r2)
    if family == "matern12":
        with np.errstate(divide="ignore", invalid="ignore"):
            T = np.where(r > 0, -0.5 * K / r, 0.0)
        return T
    if family == "matern32":
        return -1.5 * s * np.exp(-_SQRT3 * r)
    return -(5.0 / 6.0) * s * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)


def default_jitter(spec: KernelSpec) -> float:
    """Diagonal addition: fitted noise plus a PD floor tied to the signal."""
    return spec.noise_variance + JITTER_RELATIVE * spec.signal_variance


def gram_matrix(spec: KernelSpec, X: np.ndarray, jitter: float | None = None) -> np.ndarray:
    """Jittered Gram matrix K(X, X) + jitter * I; guaranteed Cholesky-able."""
    K, jit = _gram_with_ladder(spec, np.atleast_2d(np.asarray(X, dtype=float)), jitter)[:2]
    return K + jit * np.eye(K.shape[0])


def _gram_with_ladder(spec: KernelSpec, X: np.ndarray, jitter: float | None = None):
    """Returns (K_nojitter, jitter_used, cholesky_factor)."""
    K = kernel_matrix(spec, X)
    jit, L = _factor_with_ladder(K, default_jitter(spec) if jitter is None else float(jitter), spec)
    return K, jit, L


def _factor_with_ladder(K: np.ndarray, jitter: float, spec: KernelSpec):
    m = K.shape[0]
    eye = np.eye(m)
    jit = jitter
    for attempt in range(6):
        try:
            L = sla.cholesky(K + jit * eye, lower=True, check_finite=False)
            return jit, L
        except sla.LinAlgError:
            jit = default_jitter(spec) if jit == 0 else jit * 10.0
    raise ConditioningError(
        f"Gram matrix not positive definite even with jitter {jit:.3g} "
        f"(family {spec.family}, M={m})"
    )


class _LMLWorkspace:
    """Pairwise squared differences cached once per (X, fit)."""

    def __init__(self, X: np.ndarray):
        self.X = X
        m, f = X.shape
        self.m = m
        d = X[:, None, :] - X[None, :, :]
        self.d2_flat = np.ascontiguousarray(np.moveaxis(d * d, 2, 0).reshape(f, m * m))

    def r2(self, inv_ls: np.ndarray) -> np.ndarray:
        out = (inv_ls @ self.d2_flat).reshape(self.m, self.m)
        np.fill_diagonal(out, 0.0)
        return out

    def feature_sums(self, B: np.ndarray) -> np.ndarray:
        """sum_ij B_ij (x_if - x_jf)^2 for every feature f."""
        return self.d2_flat @ B.reshape(-1)


def log_marginal_likelihood(
    spec: KernelSpec,
    X: np.ndarray,
    y: np.ndarray,
    jitter: float | None = None,
    workspace: _LMLWorkspace | None = None,
) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient over (ln s, ln u_1..u_F, ln n).

    The gradient uses the standard identity dL/dtheta =
    1/2 tr((alpha alpha^T - K^{-1}) dK/dtheta) with alpha = K^{-1} y; the
    noise entry is present only when the spec carries a positive
    noise_variance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    m = X.shape[0]
    ws = workspace if workspace is not None and workspace.X is X else _LMLWorkspace(X)
    r2 = ws.r2(spec.inv_length_scales)
    K_raw = _kernel_from_r2(spec.family, spec.signal_variance, r2)
    jit, L = _factor_with_ladder(K_raw, default_jitter(spec) if jitter is None else float(jitter), spec)
    alpha = sla.cho_solve((L, True), y, check_finite=False)
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    value = -0.5 * log_det - 0.5 * float(y @ alpha) - 0.5 * m * math.log(2.0 * math.pi)

    K_inv = sla.lapack.dpotri(L, lower=1)[0]
    K_inv = K_inv + np.tril(K_inv, -1).T  # dpotri fills one triangle
    A = np.outer(alpha, alpha) - K_inv
    trace_a = float(np.trace(A))

    with_noise = spec.noise_variance > 0
    grad = np.empty(2 + spec.n_features if with_noise else 1 + spec.n_features)
    # the PD floor is proportional to s, so it joins the ln s derivative
    grad[0] = 0.5 * (float(np.sum(A * K_raw)) + JITTER_RELATIVE * spec.signal_variance * trace_a)
    B = A * _grad_prefactor(spec.family, spec.signal_variance, r2, K_raw)
    grad[1 : 1 + spec.n_features] = 0.5 * spec.inv_length_scales * ws.feature_sums(B)
    if with_noise:
        grad[-1] = 0.5 * spec.noise_variance * trace_a
    return value, grad


@dataclass(frozen=True)
class FitOptions:
    """Multi-start quasi-Newton controls for hyperparameter fitting.

    Convergence: projected-gradient infinity-norm below gtol, or relative
    objective change below ftol (the bounded quasi-Newton's step criterion).
    """

    n_starts: int = 4
    seed: int = 0
    log_bound: float = 10.0  # box |ln theta| <= log_bound
    gtol: float = 1e-6
    ftol: float = 1e-14
    max_iters: int = 200
    start_spread: float = 3.0  # random starts uniform in +-start_spread (log space)


def _theta_to_spec(theta: np.ndarray, family: str) -> KernelSpec:
    return KernelSpec(
        family=family,
        signal_variance=math.exp(theta[0]),
        inv_length_scales=np.exp(theta[1:-1]),
        noise_variance=math.exp(theta[-1]),
    )


def fit_hyperparameters(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "rbf",
    opts: FitOptions | None = None,
) -> KernelSpec:
    """Maximize the log marginal likelihood over log-hyperparameters.

    Parameters are (ln signal, ln inverse length scales, ln noise). Runs a
    seeded multi-start of L-BFGS-B with analytic gradients inside the box
    |ln theta| <= log_bound and returns the best optimum found.
    """
    opts = opts or FitOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two training points")
    n_params = 2 + X.shape[1]
    bound = opts.log_bound
    rng = np.random.default_rng(opts.seed)

    # First start: target variance, unit inverse length scales, small noise.
    starts = [
        np.concatenate(
            ([math.log(max(float(y.var()), 1e-8))], np.zeros(X.shape[1]), [math.log(1e-4)])
        )
    ]
    for _ in range(opts.n_starts - 1):
        theta0 = np.empty(n_params)
        theta0[:-1] = rng.uniform(-opts.start_spread, opts.start_spread, size=n_params - 1)
        theta0[-1] = rng.uniform(-9.0, -2.0)
        starts.append(theta0)

    ws = _LMLWorkspace(X)

    def objective(theta):
        value, grad = log_marginal_likelihood(_theta_to_spec(theta, family), X, y, workspace=ws)
        return -value, -grad

    best_theta = None
    best_value = -math.inf
    failures = []
    for theta0 in starts:
        theta0 = np.clip(theta0, -bound, bound)
        try:
            res = minimize(
                objective,
                theta0,
                jac=True,
                method="L-BFGS-B",
                bounds=[(-bound, bound)] * n_params,
                options={"maxiter": opts.max_iters, "gtol": opts.gtol, "ftol": opts.ftol},
            )
        except (ConditioningError, sla.LinAlgError) as err:
            failures.append(str(err))
            continue
        if np.all(np.isfinite(res.x)) and math.isfinite(res.fun) and -res.fun > best_value:
            best_value = -res.fun
            best_theta = res.x
    if best_theta is None:
        raise FitError(
            f"all {len(starts)} optimization starts failed: {failures[-1] if failures else 'non-finite results'}",
            best_spec=None,
        )
    return _theta_to_spec(best_theta, family)


@dataclass(frozen=True, eq=False)
class GPOutputModel:
    """Fitted GP for one multiplier component, with precomputed factors."""

    kernel: KernelSpec
    jitter: float
    targets: np.ndarray  # scaled targets y
    chol_lower: np.ndarray  # L with L L^T = K(X, X) + jitter I
    alpha: np.ndarray  # (K + jitter I)^{-1} y

    def check_consistency(self, X: np.ndarray, tol_rel: float = 1e-8) -> None:
        K = kernel_matrix(self.kernel, X) + self.jitter * np.eye(X.shape[0])
        rebuilt = self.chol_lower @ self.chol_lower.T
        err = np.linalg.norm(rebuilt - K) / max(np.linalg.norm(K), 1e-300)
        if err > tol_rel:
            raise ConditioningError(f"stored Cholesky factor disagrees with Gram matrix ({err:.3g} relative)")


@dataclass(frozen=True, eq=False)
class GPModel:
    """Component-wise GP map from scaled free moments to multipliers."""

    n_moments: int
    family: str
    train_inputs: np.ndarray  # (M, N-2) scaled features
    outputs: tuple[GPOutputModel, ...]
    scaling: ScalingStats
    dataset_hash: str = ""

    @property
    def train_count(self) -> int:
        return self.train_inputs.shape[0]


@dataclass(frozen=True, eq=False)
class Prediction:
    """Posterior mean (raw multiplier units) and variance (scaled units)."""

    mean: np.ndarray
    variance: np.ndarray


def train_model(ds: Dataset, family: str = "rbf", opts: FitOptions | None = None) -> GPModel:
    """Fit one GP per multiplier component on a generated dataset."""
    opts = opts or FitOptions()
    scaling = compute_scaling(ds)
    X = scaling.scale_inputs(ds.moments[:, 2:])
    Y = scaling.scale_targets(ds.lambdas)
    outputs = []
    for i in range(ds.n_moments):
        per_output = FitOptions(
            n_starts=opts.n_starts,
            seed=opts.seed + i,
            log_bound=opts.log_bound,
            gtol=opts.gtol,
            ftol=opts.ftol,
            max_iters=opts.max_iters,
            start_spread=opts.start_spread,
        )
        try:
            spec = fit_hyperparameters(X, Y[:, i], family=family, opts=per_output)
            _, jit, L = _gram_with_ladder(spec, X)
        except (FitError, ConditioningError) as err:
            raise FitError(f"fitting output {i + 1} of {ds.n_moments} failed: {err}") from err
        alpha = sla.cho_solve((L, True), Y[:, i], check_finite=False)
        outputs.append(
            GPOutputModel(kernel=spec, jitter=jit, targets=Y[:, i], chol_lower=L, alpha=alpha)
        )
    return GPModel(
        n_moments=ds.n_moments,
        family=family,
        train_inputs=X,
        outputs=tuple(outputs),
        scaling=scaling,
        dataset_hash=ds.content_hash(),
    )


def _features_from_moments(model: GPModel, p: MomentVector) -> np.ndarray:
    if p.n_moments != model.n_moments:
        raise ValueError(f"model expects {model.n_moments} moments, got {p.n_moments}")
    if not p.standardized:
        raise ValueError("moments must be standardized (p_1 = 0, p_2 = 1) before prediction")
    return model.scaling.scale_inputs(p.values[2:])


def predict(model: GPModel, p: MomentVector) -> Prediction:
    """Posterior mean/variance at one standardized moment vector."""
    x = _features_from_moments(model, p)[None, :]
    means, variances = predict_batch(model, x)
    return Prediction(mean=means[0], variance=variances[0])


def predict_batch(model: GPModel, X_scaled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means/variances for pre-scaled feature rows.

    Returns (means, variances) with shape (B, N); means are unscaled back to
    raw multiplier units, variances stay in scaled-target units.
    """
    X_scaled = np.atleast_2d(np.asarray(X_scaled, dtype=float))
    b = X_scaled.shape[0]
    n = model.n_moments
    means = np.empty((b, n))
    variances = np.empty((b, n))
    for i, out in enumerate(model.outputs):
        k_star = kernel_matrix(out.kernel, X_scaled, model.train_inputs)  # (B, M)
        means[:, i] = k_star @ out.alpha
        v = sla.solve_triangular(out.chol_lower, k_star.T, lower=True, check_finite=False)
        var = out.kernel.signal_variance - np.einsum("ij,ij->j", v, v)
        variances[:, i] = np.maximum(var, 0.0)
    means = model.scaling.unscale_targets(means)
    return means, variances


# --- persistence ------------------------------------------------------------


def _pack_lower(L: np.ndarray) -> list[float]:
    idx = np.tril_indices(L.shape[0])
    return L[idx].tolist()


def _unpack_lower(packed: list[float], m: int) -> np.ndarray:
    L = np.zeros((m, m))
    L[np.tril_indices(m)] = packed
    return L


def save_model(model: GPModel, path: Path | str) -> None:
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "n_moments": model.n_moments,
        "family": model.family,
        "train_inputs": model.train_inputs.tolist(),
        "outputs": [
            {
                "signal_variance": out.kernel.signal_variance,
                "inv_length_scales": out.kernel.inv_length_scales.tolist(),
                "jitter": out.jitter,
                "targets": out.targets.tolist(),
                "chol_lower_packed": _pack_lower(out.chol_lower),
            }
            for out in model.outputs
        ],
        "scaling": {
            "input_means": model.scaling.input_means.tolist(),
            "input_stds": model.scaling.input_stds.tolist(),
            "target_means": model.scaling.target_means.tolist(),
            "target_stds": model.scaling.target_stds.tolist(),
        },
        "dataset_hash": model.dataset_hash,
    }
    write_atomic(path, json.dumps(doc) + "\n")


def load_model(path: Path | str) -> GPModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"unparseable model file {path}: {err}")
    version = doc.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ModelFormatError(
            f"{path}: schema_version {version!r} is not supported (expected {MODEL_SCHEMA_VERSION})"
        )
    try:
        X = np.asarray(doc["train_inputs"], dtype=float)
        m = X.shape[0]
        outputs = []
        for rec in doc["outputs"]:
            L = _unpack_lower(rec["chol_lower_packed"], m)
            targets = np.asarray(rec["targets"], dtype=float)
            alpha = sla.cho_solve((L, True), targets, check_finite=False)
            signal = float(rec["signal_variance"])
            jitter = float(rec["jitter"])
            outputs.append(
                GPOutputModel(
                    kernel=KernelSpec(
                        family=doc["family"],
                        signal_variance=signal,
                        inv_length_scales=np.asarray(rec["inv_length_scales"], dtype=float),
                        noise_variance=max(jitter - JITTER_RELATIVE * signal, 0.0),
                    ),
                    jitter=jitter,
                    targets=targets,
                    chol_lower=L,
                    alpha=alpha,
                )
            )
        scal = doc["scaling"]
        model = GPModel(
            n_moments=int(doc["n_moments"]),
            family=doc["family"],
            train_inputs=X,
            outputs=tuple(outputs),
            scaling=ScalingStats(
                input_means=np.asarray(scal["input_means"], dtype=float),
                input_stds=np.asarray(scal["input_stds"], dtype=float),
                target_means=np.asarray(scal["target_means"], dtype=float),
                target_stds=np.asarray(scal["target_stds"], dtype=float),
            ),
            dataset_hash=doc.get("dataset_hash", ""),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"{path}: missing or malformed field: {err}")
    return model


def check_dataset_compatibility(model: GPModel, ds: Dataset) -> bool:
    """Warn when a model was trained on a different dataset than supplied."""
    ok = model.dataset_hash == ds.content_hash()
    if not ok:
        warnings.warn(
            "model dataset hash does not match the supplied dataset; "
            "predictions refer to a different training set",
            stacklevel=2,
        )
    return ok
