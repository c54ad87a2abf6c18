"""Training-pair generation: standardized (lambda, p) samples and persistence.

A trial multiplier vector is drawn uniformly from the box [-b, b]^N, its
density is measured, and the multipliers are repeatedly pushed through the
shift/scale transform until the density has zero mean and unit variance to
within epsilon (the transform is exact on the real line, so on a bounded
domain the residual contracts geometrically for densities with negligible
boundary mass). Pairs whose moments fall outside the moment box are rejected
and redrawn.

Each sample owns an independent child of the master seed sequence, so a
dataset is a pure function of (seed, spec, domain, rule) regardless of how
many workers generate it.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DatasetFormatError,
    DegenerateDatasetError,
    GenerationExhaustedError,
)
from .med import MomentVector, _DualWorkspace, rescale_multipliers
from .quadrature import DEFAULT_QUAD_ORDER, QuadratureRule, VelocityDomain, build_rule

__all__ = [
    "SamplingSpec",
    "Dataset",
    "ScalingStats",
    "default_moment_box",
    "sample_standardized_pair",
    "generate_dataset",
    "compute_scaling",
    "save_dataset",
    "load_dataset",
]

# Standardized moment box for N=8; the first N components are used for N<8.
# Components 1 and 2 are pinned to (0, 1) within epsilon by construction.
_OMEGA_P_TAIL = ((-1.0, 1.0), (1.0, 4.0), (-4.0, 4.0), (1.0, 15.0), (-25.0, 1.0), (1.0, 110.0))

# Trial densities whose first measurement is this far from standard collapse
# toward the boundary and rarely admit a fixed point inside the domain.
_MU_GUARD = 5.0
_SIGMA_GUARD = 3.0


def default_moment_box(n_moments: int, epsilon: float = 1e-10) -> np.ndarray:
    """Per-component [min, max] bounds of the standardized moment box."""
    if n_moments < 2 or n_moments > 2 + len(_OMEGA_P_TAIL):
        raise ValueError(f"unsupported moment count {n_moments}")
    rows = [(-epsilon, epsilon), (1.0 - epsilon, 1.0 + epsilon)]
    rows += list(_OMEGA_P_TAIL[: n_moments - 2])
    return np.array(rows, dtype=float)


@dataclass(frozen=True, eq=False)
class SamplingSpec:
    """Configuration of the rejection sampler."""

    n_moments: int
    b: float = 10.0
    lambda_box: np.ndarray | None = None  # (N, 2) overrides; default [-b, b]^N
    moment_box: np.ndarray | None = None  # (N, 2) overrides; default paper box
    epsilon: float = 1e-10
    max_inner_iters: int = 100
    max_rejections: int = 1_000_000

    def __post_init__(self):
        if self.n_moments not in (4, 6, 8):
            raise ValueError(f"n_moments must be 4, 6 or 8, got {self.n_moments}")
        if self.b <= 0:
            raise ValueError("b must be positive")
        box = self.lambda_box
        if box is None:
            box = np.tile([-self.b, self.b], (self.n_moments, 1))
        box = np.asarray(box, dtype=float)
        if box.shape != (self.n_moments, 2) or np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("lambda_box must be (N, 2) with min < max per row")
        object.__setattr__(self, "lambda_box", box)
        mbox = self.moment_box
        if mbox is None:
            mbox = default_moment_box(self.n_moments, self.epsilon)
        mbox = np.asarray(mbox, dtype=float)
        if mbox.shape != (self.n_moments, 2):
            raise ValueError("moment_box must be (N, 2)")
        object.__setattr__(self, "moment_box", mbox)

    def to_metadata(self) -> dict:
        return {
            "n_moments": self.n_moments,
            "b": self.b,
            "lambda_box": self.lambda_box.tolist(),
            "omega_p": self.moment_box.tolist(),
            "epsilon": self.epsilon,
            "max_inner_iters": self.max_inner_iters,
            "max_rejections": self.max_rejections,
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    """Accepted (p, lambda) pairs plus everything needed to regenerate them."""

    moments: np.ndarray  # (M, N), standardized
    lambdas: np.ndarray  # (M, N)
    spec: SamplingSpec
    domain: VelocityDomain
    quad_order: int
    seed: int
    pair_seconds: np.ndarray | None = None
    rejections: int = 0
    inner_failures: int = 0

    def __post_init__(self):
        if self.moments.shape != self.lambdas.shape or self.moments.ndim != 2:
            raise ValueError("moments and lambdas must be (M, N) arrays of equal shape")
        if self.count < 1:
            raise ValueError("dataset must contain at least one pair")
        if len(np.unique(self.moments, axis=0)) != self.count:
            raise DegenerateDatasetError("dataset contains duplicate pairs")

    @property
    def count(self) -> int:
        return self.moments.shape[0]

    @property
    def n_moments(self) -> int:
        return self.moments.shape[1]

    def subset(self, m: int) -> "Dataset":
        """First m pairs, used for training-size sweeps."""
        if not 1 <= m <= self.count:
            raise ValueError(f"subset size must be in 1..{self.count}")
        return Dataset(
            moments=self.moments[:m],
            lambdas=self.lambdas[:m],
            spec=self.spec,
            domain=self.domain,
            quad_order=self.quad_order,
            seed=self.seed,
        )

    def content_hash(self) -> str:
        """Hash of the canonical serialization; ties models to their data."""
        buf = io.StringIO()
        _write_csv(self, buf)
        payload = buf.getvalue() + json.dumps(self._metadata(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def _metadata(self) -> dict:
        return {
            "n_moments": self.n_moments,
            "v_min": self.domain.v_min,
            "v_max": self.domain.v_max,
            "quad_order": self.quad_order,
            "b": self.spec.b,
            "omega_p": self.spec.moment_box.tolist(),
            "epsilon": self.spec.epsilon,
            "seed": self.seed,
            "count": self.count,
        }


@dataclass(frozen=True, eq=False)
class ScalingStats:
    """Column-wise shift/scale for GP inputs (p_3..p_N) and targets (lambda)."""

    input_means: np.ndarray
    input_stds: np.ndarray
    target_means: np.ndarray
    target_stds: np.ndarray

    def scale_inputs(self, features: np.ndarray) -> np.ndarray:
        return (features - self.input_means) / self.input_stds

    def unscale_inputs(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.input_stds + self.input_means

    def scale_targets(self, lambdas: np.ndarray) -> np.ndarray:
        return (lambdas - self.target_means) / self.target_stds

    def unscale_targets(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.target_stds + self.target_means


def _standardize_trial(lam, ws: _DualWorkspace, spec: SamplingSpec):
    """Fixed-point iteration driving (p_1, p_2) to (0, 1); None on failure."""
    lam = np.asarray(lam, dtype=float)
    for _ in range(spec.max_inner_iters):
        m = ws.raw_moments(lam, 2)
        mu = float(m[0])
        var = float(m[1]) - mu * mu
        if not (math.isfinite(mu) and math.isfinite(var)) or var <= 0:
            return None
        if abs(mu) > _MU_GUARD or math.sqrt(var) > _SIGMA_GUARD:
            return None
        if abs(m[0]) <= spec.epsilon and abs(m[1] - 1.0) <= spec.epsilon:
            return lam
        lam = rescale_multipliers(lam, mu, math.sqrt(var))
        if not np.all(np.isfinite(lam)):
            return None
    return None


def sample_standardized_pair(
    spec: SamplingSpec,
    domain: VelocityDomain | None = None,
    rule: QuadratureRule | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, MomentVector]:
    """Draw one accepted (lambda, p) pair with zero mean and unit variance."""
    lam, p, _, _ = _sample_pair_counted(spec, _resolve_rule(domain, rule), rng or np.random.default_rng())
    return lam, p


def _resolve_rule(domain, rule) -> QuadratureRule:
    if rule is not None:
        return rule
    return build_rule(domain if domain is not None else VelocityDomain(), DEFAULT_QUAD_ORDER)


def _sample_pair_counted(spec: SamplingSpec, rule: QuadratureRule, rng: np.random.Generator):
    ws = _DualWorkspace(rule, spec.n_moments)
    lo, hi = spec.lambda_box[:, 0], spec.lambda_box[:, 1]
    box = spec.moment_box
    rejections = 0
    inner_failures = 0
    while rejections + inner_failures < spec.max_rejections:
        trial = rng.uniform(lo, hi)
        lam = _standardize_trial(trial, ws, spec)
        if lam is None:
            inner_failures += 1
            continue
        p = ws.raw_moments(lam, spec.n_moments)
        if np.all(p >= box[:, 0]) and np.all(p <= box[:, 1]):
            return lam, MomentVector(p), rejections, inner_failures
        rejections += 1
    total = rejections + inner_failures
    raise GenerationExhaustedError(
        f"no acceptable pair within {total} trials "
        f"(box rejections {rejections}, standardization failures {inner_failures}); "
        "the sampling boxes are likely incompatible"
    )


def generate_dataset(
    count: int,
    spec: SamplingSpec,
    domain: VelocityDomain | None = None,
    rule: QuadratureRule | None = None,
    seed: int = 0,
    threads: int = 1,
) -> Dataset:
    """Generate `count` accepted pairs, deterministic in (seed, spec, domain, rule).

    Every sample index owns its own child of the master seed sequence, so the
    result does not depend on the number of worker threads.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rule = _resolve_rule(domain, rule)
    children = np.random.SeedSequence(seed).spawn(count)

    def one(idx: int):
        t0 = time.perf_counter()
        lam, p, rej, inner = _sample_pair_counted(spec, rule, np.random.default_rng(children[idx]))
        return lam, p.values, time.perf_counter() - t0, rej, inner

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(count)))
    else:
        results = [one(i) for i in range(count)]

    lambdas = np.array([r[0] for r in results])
    moments = np.array([r[1] for r in results])
    seconds = np.array([r[2] for r in results])
    return Dataset(
        moments=moments,
        lambdas=lambdas,
        spec=spec,
        domain=rule.domain,
        quad_order=rule.order,
        seed=seed,
        pair_seconds=seconds,
        rejections=sum(r[3] for r in results),
        inner_failures=sum(r[4] for r in results),
    )


def compute_scaling(ds: Dataset) -> ScalingStats:
    """Column means/stds over the dataset; inputs exclude the constant p_1, p_2."""
    if ds.count < 2:
        raise DegenerateDatasetError("need at least two pairs to compute scaling statistics")
    features = ds.moments[:, 2:]
    in_means = features.mean(axis=0)
    in_stds = features.std(axis=0)
    t_means = ds.lambdas.mean(axis=0)
    t_stds = ds.lambdas.std(axis=0)
    for name, stds in (("input", in_stds), ("target", t_stds)):
        if np.any(stds <= 0):
            k = int(np.flatnonzero(stds <= 0)[0])
            raise DegenerateDatasetError(f"{name} column {k} has zero standard deviation")
    return ScalingStats(input_means=in_means, input_stds=in_stds, target_means=t_means, target_stds=t_stds)


# --- persistence ------------------------------------------------------------
#
# CSV with header p1..pN,lambda1..lambdaN, one pair per row, 17 significant
# digits (lossless for float64); sidecar <stem>.meta.json carries the
# generation settings.


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_csv(ds: Dataset, fh) -> None:
    n = ds.n_moments
    header = [f"p{j}" for j in range(1, n + 1)] + [f"lambda{j}" for j in range(1, n + 1)]
    fh.write(",".join(header) + "\n")
    for p_row, l_row in zip(ds.moments, ds.lambdas):
        fh.write(",".join(_fmt(x) for x in p_row) + "," + ",".join(_fmt(x) for x in l_row) + "\n")


def write_atomic(path: Path | str, text: str) -> None:
    """Write via a temporary file in the same directory plus rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def meta_path_for(path: Path | str) -> Path:
    return Path(path).with_suffix(".meta.json")


def save_dataset(ds: Dataset, path: Path | str) -> None:
    buf = io.StringIO()
    _write_csv(ds, buf)
    write_atomic(path, buf.getvalue())
    write_atomic(meta_path_for(path), json.dumps(ds._metadata(), indent=2) + "\n")


def load_dataset(path: Path | str, verify: bool = True) -> Dataset:
    """Load a dataset and (optionally) re-check moments against multipliers.

    Raises DatasetFormatError with a line number on malformed rows; with
    verify=True every stored pair is re-quadratured with the stored settings
    and must reproduce its moments to 1e-8.
    """
    path = Path(path)
    mpath = meta_path_for(path)
    try:
        meta = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"missing metadata sidecar {mpath}")
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"unparseable metadata {mpath}: {err}")
    try:
        n = int(meta["n_moments"])
        domain = VelocityDomain(float(meta["v_min"]), float(meta["v_max"]))
        quad_order = int(meta["quad_order"])
        spec = SamplingSpec(
            n_moments=n,
            b=float(meta["b"]),
            moment_box=np.asarray(meta["omega_p"], dtype=float),
            epsilon=float(meta["epsilon"]),
        )
        seed = int(meta["seed"])
        count = int(meta["count"])
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetFormatError(f"metadata {mpath} is missing or has malformed fields: {err}")

    expected_cols = 2 * n
    moments = np.empty((count, n))
    lambdas = np.empty((count, n))
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if len(header) != expected_cols:
            raise DatasetFormatError(
                f"{path}:1: expected {expected_cols} columns (p1..p{n},lambda1..lambda{n}), "
                f"got {len(header)}"
            )
        row = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != expected_cols:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {expected_cols} columns for N={n}, got {len(parts)}"
                )
            try:
                vals = [float(x) for x in parts]
            except ValueError as err:
                raise DatasetFormatError(f"{path}:{lineno}: {err}")
            if row >= count:
                raise DatasetFormatError(f"{path}:{lineno}: more rows than metadata count {count}")
            moments[row] = vals[:n]
            lambdas[row] = vals[n:]
            row += 1
    if row != count:
        raise DatasetFormatError(f"{path}: expected {count} rows per metadata, found {row}")

    ds = Dataset(
        moments=moments,
        lambdas=lambdas,
        spec=spec,
        domain=domain,
        quad_order=quad_order,
        seed=seed,
    )
    if verify:
        ws = _DualWorkspace(build_rule(domain, quad_order), n)
        for i in range(count):
            err = np.max(np.abs(ws.raw_moments(lambdas[i], n) - moments[i]))
            if err > 1e-8:
                raise DatasetFormatError(
                    f"{path}: row {i + 1} moments disagree with multipliers by {err:.3g} "
                    "under the stored quadrature settings"
                )
    return ds
