"""Gaussian-process surrogate, log expected improvement and latent-space BO.

The objective is maximised. The GP works on standardised targets internally;
:func:`gp_posterior` reports moments on the original scale.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.optimize import minimize
from scipy.special import erfcx, ndtr
from scipy.stats import qmc

from . import grammar
from .linalg import NotSpdError, NumericalError, SpdFactor, cholesky
from .scores import GradientError, ScoreKind, les_batch, les_gradient_batch, likelihood_batch, prior_batch
from .vae import decode_tokens, encode_mean

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-8
LOG_EI_CAP = -1e4
_LOG_2PI = math.log(2 * math.pi)
_SQRT_HALF_PI = math.sqrt(math.pi / 2)
# log-parameter boxes: lengthscale, signal variance, noise variance above the floor
_BOUNDS = np.array([[math.log(1e-2), math.log(1e3)], [math.log(1e-3), math.log(1e2)], [math.log(1e-10), math.log(10.0)]])


class GpFitError(NumericalError):
    pass


# -- Gaussian process ------------------------------------------------------------


@dataclass(frozen=True)
class GpHyper:
    lengthscale: float
    signal_var: float
    noise_var: float


@dataclass
class GpState:
    inputs: np.ndarray
    targets: np.ndarray  # standardised
    y_mean: float
    y_scale: float
    hyper: GpHyper
    chol: SpdFactor
    alpha: np.ndarray

    @property
    def best(self) -> float:
        return self.y_mean + self.y_scale * float(np.max(self.targets))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def _kernel(a: np.ndarray, b: np.ndarray, hyper: GpHyper) -> np.ndarray:
    return hyper.signal_var * np.exp(-0.5 * _sq_dists(a, b) / hyper.lengthscale**2)


def _hyper_from(theta: np.ndarray) -> GpHyper:
    return GpHyper(math.exp(theta[0]), math.exp(theta[1]), NOISE_FLOOR + math.exp(theta[2]))


def _nll_and_grad(theta: np.ndarray, d2: np.ndarray, y: np.ndarray, fit_noise: bool) -> tuple[float, np.ndarray]:
    hyper = _hyper_from(theta)
    n = len(y)
    kf = hyper.signal_var * np.exp(-0.5 * d2 / hyper.lengthscale**2)
    f = cholesky(kf + hyper.noise_var * np.eye(n))
    alpha = cho_solve((f.lower, True), y)
    k_inv, info = lapack.dpotri(f.lower, lower=1)
    if info:
        raise NotSpdError(info - 1, 0.0)
    k_inv = np.tril(k_inv) + np.tril(k_inv, -1).T
    nll = 0.5 * y @ alpha + np.sum(np.log(np.diag(f.lower))) + 0.5 * n * _LOG_2PI
    w = np.outer(alpha, alpha) - k_inv
    grad = np.array(
        [
            -0.5 * np.sum(w * kf * d2) / hyper.lengthscale**2,
            -0.5 * np.sum(w * kf),
            -0.5 * math.exp(theta[2]) * np.trace(w) if fit_noise else 0.0,
        ]
    )
    return float(nll), grad


def _fit_subset(y: np.ndarray, limit: int) -> np.ndarray:
    # Best half by target plus an even stride through the rest; deterministic.
    n = len(y)
    if n <= limit:
        return np.arange(n)
    order = np.argsort(-y, kind="stable")
    top = order[: limit // 2]
    rest = np.sort(order[limit // 2 :])
    stride = rest[np.linspace(0, len(rest) - 1, limit - len(top)).astype(int)]
    return np.sort(np.concatenate([top, stride]))


def condition_gp(hyper: GpHyper, X, y, y_mean: float, y_scale: float) -> GpState:
    """Condition on data with fixed hyperparameters and standardisation."""
    X = np.asarray(X, dtype=np.float64)
    ys = (np.asarray(y, dtype=np.float64) - y_mean) / y_scale
    k = _kernel(X, X, hyper) + hyper.noise_var * np.eye(len(X))
    try:
        f = cholesky(k)
    except NotSpdError as exc:
        raise GpFitError(f"kernel matrix not positive definite: {exc}") from exc
    alpha = cho_solve((f.lower, True), ys)
    return GpState(X, ys, y_mean, y_scale, hyper, f, alpha)


def fit_gp(
    X,
    y,
    noise: float | None = None,
    init: GpHyper | None = None,
    steps: int = 200,
    warm_steps: int = 50,
    lr: float = 0.05,
    max_fit_points: int = 200,
) -> GpState:
    """Fit an isotropic squared-exponential GP by marginal likelihood.

    Hyperparameters are found by Adam on the log parameters from five fixed
    restarts, or for ``warm_steps`` from ``init`` alone; ``noise`` pins the
    noise variance. Hyperparameters are fitted on at most ``max_fit_points``
    points; the returned state conditions on all of them.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (len(X),):
        raise ValueError(f"need X (n, d) and y (n,), got {X.shape} and {y.shape}")
    if len(X) < 2:
        raise ValueError("fit_gp needs at least two observations")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    y_mean = float(np.mean(y))
    y_scale = float(np.std(y))
    if y_scale < 1e-12:
        y_scale = 1.0
    ys = (y - y_mean) / y_scale

    idx = _fit_subset(ys, max_fit_points)
    d2 = _sq_dists(X[idx], X[idx])
    fit_noise = noise is None
    noise_theta = math.log(max(noise - NOISE_FLOOR, 1e-300)) if noise is not None else math.log(0.1)
    if init is not None:
        starts = [[math.log(init.lengthscale), math.log(init.signal_var), math.log(max(init.noise_var - NOISE_FLOOR, 1e-10))]]
    else:
        base = math.sqrt(X.shape[1])
        starts = [[math.log(s * base), 0.0, math.log(0.1)] for s in (0.25, 0.5, 1.0, 2.0, 4.0)]

    n_steps = steps if init is None else warm_steps
    best_theta, best_nll = None, math.inf
    for start in starts:
        theta = np.array(start, dtype=np.float64)
        if not fit_noise:
            theta[2] = noise_theta
        m = np.zeros(3)
        v = np.zeros(3)
        nll = math.inf
        for t in range(1, n_steps + 1):
            try:
                nll, g = _nll_and_grad(theta, d2, ys[idx], fit_noise)
            except NotSpdError:
                nll = math.inf
                break
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            theta = np.clip(theta, _BOUNDS[:, 0], _BOUNDS[:, 1])
            if not fit_noise:
                theta[2] = noise_theta
        try:
            nll, _ = _nll_and_grad(theta, d2, ys[idx], fit_noise)
        except NotSpdError:
            nll = math.inf
        if nll < best_nll:
            best_theta, best_nll = theta, nll
    if best_theta is None:
        raise GpFitError("every restart failed: kernel matrix not positive definite")
    hyper = _hyper_from(best_theta)
    if noise is not None:
        hyper = replace(hyper, noise_var=max(noise, NOISE_FLOOR))
    return condition_gp(hyper, X, y, y_mean, y_scale)


def gp_posterior(gp: GpState, z):
    """Posterior mean and variance of the latent function, with gradients.

    Returns ``(mean, var, d_mean, d_var)``; scalars and ``(d,)`` gradients for a
    single point, ``(m,)`` and ``(m, d)`` arrays for a batch.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    h = gp.hyper
    k = _kernel(zb, gp.inputs, h)  # (m, n)
    mean_s = k @ gp.alpha
    v = solve_triangular(gp.chol.lower, k.T, lower=True)  # (n, m)
    var_s = np.maximum(h.signal_var - np.sum(v * v, axis=0), 0.0)
    diff = zb[:, None, :] - gp.inputs[None, :, :]  # (m, n, d)
    dk = -k[:, :, None] * diff / h.lengthscale**2
    dmean_s = np.einsum("mnd,n->md", dk, gp.alpha)
    kinv_k = cho_solve((gp.chol.lower, True), k.T).T  # (m, n)
    dvar_s = -2.0 * np.einsum("mn,mnd->md", kinv_k, dk)
    s = gp.y_scale
    out = (gp.y_mean + s * mean_s, s * s * var_s, s * dmean_s, s * s * dvar_s)
    if single:
        return float(out[0][0]), float(out[1][0]), out[2][0], out[3][0]
    return out


# -- log expected improvement ----------------------------------------------------


def _log_h(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``log(u Phi(u) + phi(u))`` and its derivative ``Phi(u) / h(u)``."""
    u = np.asarray(u, dtype=np.float64)
    val = np.empty_like(u)
    dval = np.empty_like(u)
    log_phi = -0.5 * u * u - 0.5 * _LOG_2PI

    hi = u > -1.0
    if hi.any():
        uh = u[hi]
        h = uh * ndtr(uh) + np.exp(log_phi[hi])
        val[hi] = np.log(h)
        dval[hi] = ndtr(uh) / h

    # Phi(u)/phi(u) = sqrt(pi/2) erfcx(-u/sqrt 2) is exact and stable for u < 0.
    mid = (u <= -1.0) & (u > -6.0)
    if mid.any():
        um = u[mid]
        r = _SQRT_HALF_PI * erfcx(-um / math.sqrt(2.0))
        s = 1.0 + um * r
        val[mid] = log_phi[mid] + np.log(s)
        dval[mid] = r / s

    # 1 + u Phi/phi = 1/u^2 - 3/u^4 + 15/u^6 - ... (asymptotic), summed until
    # the terms stop shrinking; at u = -6 the truncation error is about 1e-8
    lo = u <= -6.0
    if lo.any():
        ul = u[lo]
        inv2 = 1.0 / (ul * ul)
        term = inv2.copy()
        s = term.copy()
        active = np.ones_like(ul, dtype=bool)
        for k in range(1, 40):
            nxt = -term * (2 * k + 1) * inv2
            active &= np.abs(nxt) < np.abs(term)
            if not active.any():
                break
            s += np.where(active, nxt, 0.0)
            term = np.where(active, nxt, term)
        val[lo] = log_phi[lo] + np.log(s)
        dval[lo] = ((s - 1.0) / ul) / s
    return val, dval


def log_ei_moments(mean, var, incumbent: float, d_mean=None, d_var=None):
    """Log expected improvement from posterior moments.

    Returns ``(value, gradient)``; ``gradient`` is ``None`` unless both
    moment gradients are supplied. Zero variance gives the cap ``-1e4`` with a
    zero gradient.
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    scalar = mean.ndim == 0
    mean = np.atleast_1d(mean)
    var = np.atleast_1d(var)
    sigma = np.sqrt(np.maximum(var, 0.0))
    ok = sigma > 0
    safe = np.where(ok, sigma, 1.0)
    u = (mean - incumbent) / safe
    lh, dlh = _log_h(np.where(ok, u, 0.0))
    value = np.where(ok, np.log(safe) + lh, LOG_EI_CAP)
    grad = None
    if d_mean is not None and d_var is not None:
        dm = np.atleast_2d(d_mean)
        dv = np.atleast_2d(d_var)
        d_sigma = dv / (2.0 * safe[:, None])
        du = (dm - u[:, None] * d_sigma) / safe[:, None]
        grad = np.where(ok[:, None], d_sigma / safe[:, None] + dlh[:, None] * du, 0.0)
        if scalar:
            grad = grad[0]
    if scalar:
        return float(value[0]), grad
    return value, grad


def log_ei(gp: GpState, z, incumbent: float | None = None):
    """Log expected improvement over ``incumbent`` (default: best observed)."""
    best = gp.best if incumbent is None else incumbent
    mean, var, dm, dv = gp_posterior(gp, z)
    return log_ei_moments(mean, var, best, dm, dv)


# -- acquisition optimisers --------------------------------------------------------


@dataclass(frozen=True)
class AcqConfig:
    lam: float = 0.0
    penalty: ScoreKind | None = None
    steps: int = 10
    step_size: float = 0.8
    grad_norm_floor: float = 1e-12

    def __post_init__(self):
        if self.lam < 0 or self.steps < 1 or self.step_size <= 0:
            raise ValueError("need lam >= 0, steps >= 1 and step_size > 0")
        if self.penalty is not None and ScoreKind(self.penalty) not in (ScoreKind.LES, ScoreKind.PRIOR, ScoreKind.LIKELIHOOD):
            raise ValueError(f"penalty must be les, prior or likelihood, got {self.penalty}")


@dataclass
class GaStep:
    z: np.ndarray
    log_ei: float
    fd_fallback: bool = False


@dataclass
class GaResult:
    point: np.ndarray
    trajectory: list[GaStep]


def _normalized(g: np.ndarray, floor: float) -> np.ndarray:
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return np.where(norms >= floor, g / np.where(norms >= floor, norms, 1.0), g)


def _penalty_gradient(model, kind: ScoreKind, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Score gradients for a batch plus a mask of rows that fell back to differences."""
    fallback = np.zeros(len(z), dtype=bool)
    if kind == ScoreKind.PRIOR:
        return prior_batch(z)[1], fallback
    if kind == ScoreKind.LIKELIHOOD:
        return likelihood_batch(model, z)[1], fallback
    try:
        return les_gradient_batch(model, z), fallback
    except GradientError:
        out = np.empty_like(z)
        for k in range(len(z)):
            try:
                out[k] = les_gradient_batch(model, z[k : k + 1])[0]
            except GradientError:
                out[k] = les_gradient_batch(model, z[k : k + 1], method="fd")[0]
                fallback[k] = True
        return out, fallback


def acquisition_direction(g_acq: np.ndarray, g_score: np.ndarray | None, cfg: AcqConfig) -> np.ndarray:
    """``g_A/|g_A| + lam * g_S/|g_S|`` row-wise; tiny gradients stay unnormalised."""
    direction = _normalized(np.atleast_2d(g_acq), cfg.grad_norm_floor)
    if g_score is not None and cfg.lam > 0:
        direction = direction + cfg.lam * _normalized(np.atleast_2d(g_score), cfg.grad_norm_floor)
    return direction


def optimize_acq_ga_batch(gp: GpState, model, starts, cfg: AcqConfig, incumbent: float | None = None) -> list[GaResult]:
    """Penalised normalised gradient ascent on log EI from each start, in lock-step."""
    z = np.array(np.atleast_2d(starts), dtype=np.float64)
    best = gp.best if incumbent is None else incumbent
    use_penalty = cfg.penalty is not None and cfg.lam > 0
    values, g_acq = log_ei(gp, z, best)
    trajectories = [[GaStep(z[k].copy(), float(values[k]))] for k in range(len(z))]
    for _ in range(cfg.steps):
        g_score, fallback = _penalty_gradient(model, ScoreKind(cfg.penalty), z) if use_penalty else (None, np.zeros(len(z), bool))
        z = z + cfg.step_size * acquisition_direction(g_acq, g_score, cfg)
        values, g_acq = log_ei(gp, z, best)
        for k in range(len(z)):
            trajectories[k].append(GaStep(z[k].copy(), float(values[k]), bool(fallback[k])))
    return [GaResult(z[k].copy(), trajectories[k]) for k in range(len(z))]


def optimize_acq_ga(gp: GpState, model, start, cfg: AcqConfig, incumbent: float | None = None) -> GaResult:
    return optimize_acq_ga_batch(gp, model, np.asarray(start, dtype=np.float64)[None], cfg, incumbent)[0]


@dataclass
class LbfgsResult:
    point: np.ndarray
    value: float
    warning: bool
    candidates: list[tuple[float, np.ndarray]] = field(default_factory=list)


def optimize_acq_lbfgs(
    gp: GpState,
    facet_length: float = 5.0,
    rng: np.random.Generator | None = None,
    restarts: int = 20,
    incumbent: float | None = None,
    objective=None,
) -> LbfgsResult:
    """Maximise log EI in the box ``[-facet/2, facet/2]^d`` by L-BFGS-B.

    ``objective`` may replace log EI with any ``z -> (value, gradient)``.
    ``candidates`` holds every restart's result, best first.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = gp.inputs.shape[1]
    half = facet_length / 2.0
    best = gp.best if incumbent is None else incumbent
    if objective is None:
        def objective(z):
            return log_ei(gp, z, best)

    def neg(z):
        value, grad = objective(z)
        return -float(value), -np.asarray(grad, dtype=np.float64)

    starts = rng.uniform(-half, half, size=(restarts, d))
    candidates = []
    any_ok = False
    for s in starts:
        start_value = -neg(s)[0]
        res = minimize(neg, s, jac=True, method="L-BFGS-B", bounds=[(-half, half)] * d, options={"maxcor": 10, "maxiter": 200})
        any_ok |= bool(res.success)
        x = np.clip(res.x, -half, half)
        value = -float(res.fun)
        if value >= start_value:
            candidates.append((value, x))
        else:
            candidates.append((start_value, s.copy()))
    candidates.sort(key=lambda c: -c[0])
    if not any_ok:
        log.warning("every L-BFGS restart stopped without converging; returning best point seen")
    return LbfgsResult(candidates[0][1], candidates[0][0], not any_ok, candidates)


# -- TuRBO ------------------------------------------------------------------------


@dataclass(frozen=True)
class TrustRegionState:
    center: np.ndarray
    best_value: float
    length: float = 0.8
    success_count: int = 0
    failure_count: int = 0
    success_tol: int = 10
    failure_tol: int = 2
    length_min: float = 2.0**-7
    length_max: float = 1.6

    def __post_init__(self):
        if not self.length_min <= self.length <= self.length_max:
            raise ValueError(f"length {self.length} outside [{self.length_min}, {self.length_max}]")
        if not (0 <= self.success_count <= self.success_tol and 0 <= self.failure_count <= self.failure_tol):
            raise ValueError("trust-region counters out of range")


def turbo_propose(
    gp: GpState,
    tr: TrustRegionState,
    rng: np.random.Generator,
    batch: int = 20,
    n_candidates: int = 2048,
    incumbent: float | None = None,
) -> np.ndarray:
    """Top-``batch`` log-EI points from a scrambled Sobol cloud in the trust region."""
    d = len(tr.center)
    sobol = qmc.Sobol(d, scramble=True, seed=rng)
    cloud = tr.center + tr.length * (sobol.random(n_candidates) - 0.5)
    values, _ = log_ei(gp, cloud, incumbent)
    order = np.argsort(-values, kind="stable")
    return cloud[order[:batch]]


def turbo_update(tr: TrustRegionState, batch_z, batch_values: Sequence[float | None]) -> TrustRegionState:
    """Success/failure bookkeeping after one batch; ``None`` marks an invalid decode."""
    valid = [(v, np.asarray(z, dtype=np.float64)) for z, v in zip(batch_z, batch_values) if v is not None]
    top = max(valid, key=lambda t: t[0]) if valid else None
    improved = top is not None and top[0] > tr.best_value
    center, best_value = (top[1], top[0]) if improved else (tr.center, tr.best_value)
    succ, fail = (tr.success_count + 1, 0) if improved else (0, tr.failure_count + 1)
    length = tr.length
    if succ >= tr.success_tol:
        length, succ = min(2.0 * length, tr.length_max), 0
    elif fail >= tr.failure_tol:
        length, fail = max(length / 2.0, tr.length_min), 0
    return replace(tr, center=center, best_value=best_value, length=length, success_count=succ, failure_count=fail)


# -- LSO loop -------------------------------------------------------------------------


class LsoMethod(str, enum.Enum):
    LES = "les"
    GA = "ga"
    PRIOR = "prior"
    LIKELIHOOD = "likelihood"
    LBFGS = "lbfgs"
    TURBO = "turbo"


_PENALTY = {LsoMethod.LES: ScoreKind.LES, LsoMethod.PRIOR: ScoreKind.PRIOR, LsoMethod.LIKELIHOOD: ScoreKind.LIKELIHOOD}

HISTORY_COLUMNS = ("seed", "method", "lambda", "iter", "batch_idx", "objective", "valid", "les", "capped")


@dataclass(frozen=True)
class LsoRecord:
    iteration: int
    batch_idx: int
    z: np.ndarray
    tokens: tuple[int, ...]
    objective: float | None
    valid: bool
    les: float
    capped: bool
    method: str
    seed: int


@dataclass
class LsoHistory:
    method: str
    lam: float
    seed: int
    init_n: int
    records: list[LsoRecord] = field(default_factory=list)

    def append(self, rec: LsoRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def proposals(self) -> list[LsoRecord]:
        return self.records[self.init_n :]

    def best_initial(self) -> float:
        return max(r.objective for r in self.records[: self.init_n] if r.objective is not None)

    def best(self) -> float:
        return max(r.objective for r in self.records if r.objective is not None)

    def valid_fraction(self) -> float:
        props = self.proposals
        return sum(r.valid for r in props) / len(props) if props else float("nan")

    def top_mean(self, k: int = 20) -> float:
        vals = sorted((r.objective for r in self.records if r.objective is not None), reverse=True)
        return float(np.mean(vals[:k]))


def write_history_csv(history: LsoHistory, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history.records:
            obj = "Invalid" if r.objective is None else repr(float(r.objective))
            w.writerow([r.seed, r.method, repr(float(history.lam)), r.iteration, r.batch_idx, obj, int(r.valid), repr(float(r.les)), int(r.capped)])


def write_manifest(path: str | Path, config: dict, checksum: str, seconds: float) -> None:
    Path(path).write_text(json.dumps({"config": config, "model_checksum": checksum, "wall_clock_s": seconds}, indent=2, sort_keys=True) + "\n")


def _spread_duplicates(points: np.ndarray, rng: np.random.Generator, min_dist: float = 1e-6) -> np.ndarray:
    # Near-identical proposals get a small nudge so each batch slot is distinct.
    pts = points.copy()
    for i in range(1, len(pts)):
        while np.min(np.linalg.norm(pts[:i] - pts[i], axis=1)) < min_dist:
            pts[i] = pts[i] + rng.normal(0.0, 1e-3, size=pts.shape[1])
    return pts


def _evaluate(model, z: np.ndarray):
    tokens = decode_tokens(model, z)
    objs = [grammar.objective(t) for t in tokens]
    les_vals, capped = les_batch(model, z)
    return tokens, objs, les_vals, capped


def lso_run(
    model,
    method: LsoMethod | str,
    lam: float = 0.05,
    seed: int = 0,
    init_n: int = 500,
    budget: int = 500,
    batch: int = 20,
    eta: float = 0.8,
    start_jitter: float = 0.1,
    history_path: str | Path | None = None,
) -> LsoHistory:
    """Latent-space optimisation: fit GP, propose a batch, decode, repeat.

    Invalid decodes are stored as such and imputed as the worst initial
    objective for GP fitting. Everything random comes from ``seed``.
    """
    method = LsoMethod(method)
    if budget % batch:
        raise ValueError(f"budget {budget} is not a multiple of batch {batch}")
    rng = np.random.default_rng(seed)
    history = LsoHistory(method.value, float(lam), seed, init_n)

    try:
        seqs = [grammar.sample_expression(rng) for _ in range(init_n)]
        z0 = encode_mean(model, seqs)
        les0, cap0 = les_batch(model, z0)
        for i, s in enumerate(seqs):
            history.append(LsoRecord(0, i, z0[i], tuple(s), grammar.objective(s), True, float(les0[i]), bool(cap0[i]), method.value, seed))
        y_obs = [r.objective for r in history.records]
        worst = min(y_obs)
        zs = [z0]
        ys = list(y_obs)

        cfg = AcqConfig(lam=lam if method in _PENALTY else 0.0, penalty=_PENALTY.get(method), step_size=eta)
        best_i = int(np.argmax(ys))
        tr = TrustRegionState(center=z0[best_i].copy(), best_value=ys[best_i])
        hyper = None
        for it in range(1, budget // batch + 1):
            X = np.concatenate(zs)
            y = np.array(ys)
            gp = fit_gp(X, y, init=hyper)
            hyper = gp.hyper
            incumbent = max(r.objective for r in history.records if r.objective is not None)

            if method == LsoMethod.LBFGS:
                res = optimize_acq_lbfgs(gp, rng=rng, restarts=batch, incumbent=incumbent)
                proposals = np.array([c[1] for c in res.candidates[:batch]])
            elif method == LsoMethod.TURBO:
                proposals = turbo_propose(gp, tr, rng, batch=batch, incumbent=incumbent)
            else:
                top = np.argsort(-y, kind="stable")[:batch]
                starts = X[top] + rng.normal(0.0, start_jitter, size=(len(top), X.shape[1]))
                results = optimize_acq_ga_batch(gp, model, starts, cfg, incumbent)
                proposals = np.array([r.point for r in results])
            proposals = _spread_duplicates(proposals, rng)

            tokens, objs, les_vals, capped = _evaluate(model, proposals)
            for b in range(len(proposals)):
                history.append(
                    LsoRecord(it, b, proposals[b], tokens[b], objs[b], objs[b] is not None, float(les_vals[b]), bool(capped[b]), method.value, seed)
                )
            if method == LsoMethod.TURBO:
                tr = turbo_update(tr, proposals, objs)
            zs.append(proposals)
            ys.extend(worst if o is None else o for o in objs)
            log.info("%s seed %d round %d best %.4f valid %d/%d", method.value, seed, it, history.best(), sum(o is not None for o in objs), batch)
    except BaseException:
        if history_path is not None:
            write_history_csv(history, history_path)
        raise
    if history_path is not None:
        write_history_csv(history, history_path)
    return history


def run_config(method, lam, seed, init_n, budget, batch, eta) -> dict:
    return {"method": LsoMethod(method).value, "lambda": lam, "seed": seed, "init_n": init_n, "budget": budget, "batch": batch, "eta": eta}
