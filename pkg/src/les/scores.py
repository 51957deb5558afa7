"""Latent-space scores: LES and the baselines it is compared against.

All scores are oriented so that larger means "more in-distribution". The
batched ``*_batch`` functions take ``(n, d)`` latents and are what the
optimisers use; the single-point functions return :class:`ScoreValue`.

LES for a decoder ``z -> softmax(logits(z))`` with the extended output
``(p_i, 1/c_i)`` per position is ``-1/2 log det(J^T J)`` where ``J = C A``,
``A`` the logits Jacobian and ``C`` the block-diagonal Jacobian of the
extended softmax.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky as cho_factor_upper, qr, solve_triangular

from . import grammar
from .linalg import pinv
from .nn import MlpParams, backward, forward, jacobian, softmax_extended
from .vae import decoder_logits, encode_mean

EIG_FLOOR = 1e-300
SCORE_CAP = 1e4
RANK_RCOND = 1e-12
_CHUNK = 256


class ScoreKind(str, enum.Enum):
    LES = "les"
    LIKELIHOOD = "likelihood"
    PRIOR = "prior"
    POLARITY = "polarity"
    TRAIN_DISTANCE = "train_distance"


@dataclass(frozen=True)
class ScoreValue:
    value: float
    capped: bool = False


class RankDeficientError(np.linalg.LinAlgError):
    """The logits Jacobian lost column rank, so the decoder is locally degenerate."""

    def __init__(self, rank: int, latent_dim: int):
        super().__init__(f"logits Jacobian has rank {rank} < latent dimension {latent_dim}")
        self.rank = rank
        self.latent_dim = latent_dim


class GradientError(ArithmeticError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass
class DecoderModel:
    """A bare decoder, for scoring without an encoder (toy and stub models)."""

    decoder: MlpParams
    seq_len: int
    vocab_size: int

    def __post_init__(self):
        if self.decoder.out_dim != self.seq_len * self.vocab_size:
            raise ValueError("decoder output size must equal seq_len * vocab_size")

    @property
    def latent_dim(self) -> int:
        return self.decoder.in_dim


def _latents(model, z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    if zb.shape[1] != model.latent_dim:
        raise ValueError(f"latent dimension {zb.shape[1]} != {model.latent_dim}")
    if not np.all(np.isfinite(zb)):
        raise ValueError("latent point has non-finite entries")
    return zb, single


def _pivoted_r(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``R`` and column order of a QR factorisation of a tall matrix.

    Rows are sorted by decreasing norm and columns pivoted (LAPACK ``dgeqp3``).
    The Jacobians here are row-graded (confident positions give rows many
    orders smaller than the rest), and this ordering keeps the small diagonal
    entries of ``R`` accurate relative to their own size, which the Gram
    matrix ``m^T m`` cannot do once its condition number passes 1e16.
    """
    order = np.argsort(-np.linalg.norm(m, axis=1), kind="stable")
    r, perm = qr(m[order], mode="r", pivoting=True)
    return r[: m.shape[1]], perm


def _numerical_rank(a: np.ndarray, rcond: float = RANK_RCOND) -> int:
    diag = np.abs(np.diag(qr(a, mode="r", pivoting=True)[0]))
    return int(np.count_nonzero(diag > rcond * diag[0])) if diag[0] > 0 else 0


def _half_logdet(m: np.ndarray, sign: float, rank_of: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``sign * 1/2 * log det(m^T m)`` for a stack of tall matrices, with floor and cap.

    The squared diagonal of ``R`` stands in for the eigenvalues of ``m^T m``
    (same product); each is floored at ``EIG_FLOOR`` and the score clipped to
    ``[-SCORE_CAP, SCORE_CAP]``. ``rank_of`` is an ungraded stack with the
    same column rank as ``m``; its rank deficit is applied to ``m``, whose own
    trailing pivots would otherwise be rounding noise rather than zero.
    """
    n, _, d = m.shape
    value = np.empty(n)
    floored = np.empty(n, dtype=bool)
    for k in range(n):
        r, _ = _pivoted_r(m[k])
        sq = np.diag(r) ** 2
        if rank_of is not None:
            sq[_numerical_rank(rank_of[k]) :] = 0.0
        floored[k] = bool(np.any(sq <= EIG_FLOOR))
        value[k] = sign * 0.5 * float(np.sum(np.log(np.maximum(sq, EIG_FLOOR))))
    clipped = np.abs(value) > SCORE_CAP
    return np.clip(value, -SCORE_CAP, SCORE_CAP), floored | clipped


@functools.lru_cache(maxsize=8)
def _sum_factor(k: int) -> np.ndarray:
    # upper-triangular U with U^T U = I + 1 1^T
    return cho_factor_upper(np.eye(k) + np.ones((k, k)))


def _reduced_jacobian(a: np.ndarray, ext) -> np.ndarray:
    """An ``(n, L*D, d)`` stack ``K`` with ``K^T K = J^T J``, free of cancellation.

    Per position the probability rows ``r_k = p_k (A_k - p^T A)`` sum to zero,
    so the argmax row is minus the sum of the others; orthogonal factorisations
    of ``J`` then cancel two large rows and bury the tiny singular values in
    rounding noise. Dropping that row and mixing the rest, sorted by
    decreasing ``p``, with ``U^T U = I + 1 1^T`` keeps the Gram matrix exact
    while each row stays dominated by its own probability scale.
    """
    n, L, D, d = a.shape
    p = np.moveaxis(ext.probs, -1, -2)  # (n, L, D)
    mean_row = np.einsum("nlk,nlkd->nld", p, a)
    rows = p[..., None] * (a - mean_row[:, :, None, :])
    order = np.argsort(-p, axis=-1, kind="stable")
    rows = np.take_along_axis(rows, order[..., None], axis=2)[:, :, 1:]
    rows = np.einsum("ij,nljd->nlid", _sum_factor(D - 1), rows)
    last = -(ext.inv_norms[..., None] * mean_row)[:, :, None, :]
    return np.concatenate([rows, last], axis=2).reshape(n, L * D, d)


# -- LES -----------------------------------------------------------------------


def les_batch(model, z) -> tuple[np.ndarray, np.ndarray]:
    """LES values and capped flags for a batch of latents."""
    zb, _ = _latents(model, z)
    values = np.empty(len(zb))
    capped = np.empty(len(zb), dtype=bool)
    for s in range(0, len(zb), _CHUNK):
        zc = zb[s : s + _CHUNK]
        a = jacobian(model.decoder, zc).reshape(len(zc), model.seq_len, model.vocab_size, -1)
        ext = softmax_extended(decoder_logits(model, zc))
        n, d = zc.shape
        values[s : s + _CHUNK], capped[s : s + _CHUNK] = _half_logdet(_reduced_jacobian(a, ext), -1.0, a.reshape(n, -1, d))
    return values, capped


def les(model, z) -> ScoreValue:
    values, capped = les_batch(model, np.asarray(z, dtype=np.float64)[None])
    return ScoreValue(float(values[0]), bool(capped[0]))


def les_appendix(model, z) -> ScoreValue:
    """LES through the pseudo-inverse of the logits Jacobian.

    Builds ``X = A^+ B`` with ``B_i = [diag(1/p_i) | -c_i 1]`` (the Jacobian of
    ``(p, 1/c) -> log p + log c``) and returns ``+1/2 log det(X X^T)``. ``X`` is
    a left inverse of ``J``; it coincides with ``J^+`` (and so with :func:`les`)
    only where the column space of ``J`` is invariant under ``B^T``.
    """
    zb, _ = _latents(model, z)
    if len(zb) != 1:
        raise ValueError("les_appendix scores a single latent point")
    L, D, d = model.seq_len, model.vocab_size, model.latent_dim
    a = jacobian(model.decoder, zb[0])
    a_pinv, rank = pinv(a)
    if rank < d:
        raise RankDeficientError(rank, d)
    ext = softmax_extended(decoder_logits(model, zb[0]))
    x = np.zeros((d, L * (D + 1)))
    for i in range(L):
        p = ext.probs[:, i]
        c = 1.0 / ext.inv_norms[i]
        b_i = np.hstack([np.diag(1.0 / p), np.full((D, 1), -c)])
        x[:, i * (D + 1) : (i + 1) * (D + 1)] = a_pinv[:, i * D : (i + 1) * D] @ b_i
    value, capped = _half_logdet(x.T[None], +1.0)
    return ScoreValue(float(value[0]), bool(capped[0]))


def _reduced_derivatives(a: np.ndarray, p: np.ndarray, inv_c: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Derivative of the reduced stack along each latent axis, shape ``(d, L*D, d)``.

    ``a`` (L, D, d) is held fixed; logits move along its columns and ``p``,
    ``1/c`` follow, so every derivative row keeps the scale of its own row.
    """
    L, D, d = a.shape
    mean = np.einsum("lk,lkd->ld", p, a)
    dl = a.transpose(2, 0, 1)  # (m, L, D): logit change per latent axis
    s = np.einsum("lk,mlk->ml", p, dl)
    dp = p[None] * (dl - s[..., None])
    dmean = np.einsum("mlk,lkd->mld", dp, a)
    drows = dp[..., None] * (a - mean[:, None, :])[None] - p[None, ..., None] * dmean[:, :, None, :]
    drows = np.take_along_axis(drows, order[None, :, :, None], axis=2)[:, :, 1:]
    drows = np.einsum("ij,mljd->mlid", _sum_factor(D - 1), drows)
    dlast = (inv_c[None, :, None] * s[..., None]) * mean[None] - inv_c[None, :, None] * dmean
    return np.concatenate([drows, dlast[:, :, None, :]], axis=2).reshape(d, L * D, d)


def _les_gradient_analytic(model, zb: np.ndarray) -> np.ndarray:
    n, d = zb.shape
    L, D = model.seq_len, model.vocab_size
    a = jacobian(model.decoder, zb).reshape(n, L, D, d)
    ext = softmax_extended(decoder_logits(model, zb))
    reduced = _reduced_jacobian(a, ext)
    p = np.moveaxis(ext.probs, -1, -2)  # (n, L, D)
    order = np.argsort(-p, axis=-1, kind="stable")
    grads = np.empty((n, d))
    for k in range(n):
        rows = np.argsort(-np.linalg.norm(reduced[k], axis=1), kind="stable")
        q, r, perm = qr(reduced[k][rows], mode="economic", pivoting=True)
        if np.any(np.diag(r) ** 2 <= EIG_FLOOR) or _numerical_rank(a[k].reshape(-1, d)) < d:
            raise GradientError(f"J^T J is numerically singular at batch index {k}")
        # dS/dz_m = -tr(K^+ dK_m) with K P = Q R, i.e. -sum(Q * dK_m P R^-1)
        dk = _reduced_derivatives(a[k], p[k], ext.inv_norms[k], order[k])[:, rows][:, :, perm]
        y = solve_triangular(r, dk.reshape(-1, d).T, trans="T").T.reshape(d, -1, d)
        grads[k] = -np.einsum("nd,mnd->m", q, y)
    return grads


def les_gradient_batch(model, z, method: str = "analytic", h: float = 1e-4) -> np.ndarray:
    """Gradient of LES for each row of ``z``.

    ``method="analytic"`` differentiates through the softmax only, holding the
    (piecewise constant) logits Jacobian fixed; ``method="fd"`` uses central
    differences of :func:`les_batch` with step ``h``.
    """
    zb, _ = _latents(model, z)
    if method == "fd":
        return _central_difference(lambda pts: les_batch(model, pts)[0], zb, h)
    if method != "analytic":
        raise ValueError(f"unknown gradient method {method!r}")
    out = np.empty_like(zb)
    for s in range(0, len(zb), _CHUNK):
        out[s : s + _CHUNK] = _les_gradient_analytic(model, zb[s : s + _CHUNK])
    return out


def les_gradient(model, z, method: str = "analytic", h: float = 1e-4) -> np.ndarray:
    return les_gradient_batch(model, np.asarray(z, dtype=np.float64)[None], method=method, h=h)[0]


def _central_difference(fn, zb: np.ndarray, h: float) -> np.ndarray:
    n, d = zb.shape
    steps = np.eye(d) * h
    plus = (zb[:, None, :] + steps[None]).reshape(n * d, d)
    minus = (zb[:, None, :] - steps[None]).reshape(n * d, d)
    return ((fn(plus) - fn(minus)) / (2 * h)).reshape(n, d)


# -- baselines -----------------------------------------------------------------


def likelihood_batch(model, z) -> tuple[np.ndarray, np.ndarray]:
    """Sum over positions of the log of the most likely token's probability.

    Returns ``(values, gradients)``; the gradient holds the argmax set fixed.
    """
    zb, _ = _latents(model, z)
    out, trace = forward(model.decoder, zb)
    n = len(zb)
    logits = out.reshape(n, model.seq_len, model.vocab_size)
    top = logits.max(axis=2, keepdims=True)
    lse = top[..., 0] + np.log(np.sum(np.exp(logits - top), axis=2))
    values = np.sum(top[..., 0] - lse, axis=1)
    probs = np.exp(logits - lse[..., None])
    g = -probs
    best = np.argmax(logits, axis=2)
    np.put_along_axis(g, best[..., None], np.take_along_axis(g, best[..., None], axis=2) + 1.0, axis=2)
    grads = np.empty_like(zb)
    for k in range(n):
        # per-point backward so the batch sum over parameter grads is not needed
        single = type(trace)(pre=[p[k] for p in trace.pre], post=[p[k] for p in trace.post])
        _, grads[k] = backward(model.decoder, single, g[k].reshape(-1))
    return values, grads


def likelihood(model, z) -> ScoreValue:
    values, _ = likelihood_batch(model, np.asarray(z, dtype=np.float64)[None])
    return ScoreValue(float(values[0]))


def likelihood_gradient(model, z) -> np.ndarray:
    _, grads = likelihood_batch(model, np.asarray(z, dtype=np.float64)[None])
    return grads[0]


def prior_batch(z) -> tuple[np.ndarray, np.ndarray]:
    zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = zb.shape[1]
    return -0.5 * d * math.log(2 * math.pi) - 0.5 * np.sum(zb * zb, axis=1), -zb


def prior_score(z) -> ScoreValue:
    values, _ = prior_batch(z)
    return ScoreValue(float(values[0]))


def prior_gradient(z) -> np.ndarray:
    return -np.asarray(z, dtype=np.float64)


def polarity_batch(model, z) -> tuple[np.ndarray, np.ndarray]:
    """``-1/2 log det(A^T A)`` of the logits Jacobian; no softmax factor."""
    zb, _ = _latents(model, z)
    values = np.empty(len(zb))
    capped = np.empty(len(zb), dtype=bool)
    for s in range(0, len(zb), _CHUNK):
        a = jacobian(model.decoder, zb[s : s + _CHUNK])
        values[s : s + _CHUNK], capped[s : s + _CHUNK] = _half_logdet(a, -1.0, a)
    return values, capped


def polarity(model, z) -> ScoreValue:
    values, capped = polarity_batch(model, np.asarray(z, dtype=np.float64)[None])
    return ScoreValue(float(values[0]), bool(capped[0]))


@dataclass
class TrainLatentCache:
    latents: np.ndarray
    k: int = 3
    undersized: bool = False

    def __post_init__(self):
        if len(self.latents) < self.k:
            raise ValueError(f"cache holds {len(self.latents)} latents, need at least {self.k}")


def build_train_cache(model, dataset: Sequence[Sequence[int]], rng: np.random.Generator, size: int = 1000) -> TrainLatentCache:
    """Encode a random subset of ``size`` training sequences."""
    n = min(size, len(dataset))
    idx = np.sort(rng.choice(len(dataset), size=n, replace=False))
    return TrainLatentCache(encode_mean(model, [dataset[i] for i in idx]), undersized=n < size)


def train_distance_batch(cache: TrainLatentCache, z) -> np.ndarray:
    """Negated mean distance to the ``k`` nearest cached training latents."""
    zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
    sq = np.sum(zb**2, 1)[:, None] + np.sum(cache.latents**2, 1)[None, :] - 2 * zb @ cache.latents.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    nearest = np.partition(dist, cache.k - 1, axis=1)[:, : cache.k]
    return -nearest.mean(axis=1)


def train_distance_score(cache: TrainLatentCache, z) -> ScoreValue:
    return ScoreValue(float(train_distance_batch(cache, z)[0]))


# -- AUROC ---------------------------------------------------------------------


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2).

    Rank-sum form with mid-ranks for ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    start = 0
    while start < len(s):
        stop = start + 1
        while stop < len(s) and sorted_s[stop] == sorted_s[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    # twice the Mann-Whitney U is integral, keep it exact before the division
    u2 = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1)
    return u2 / (2.0 * n_pos * n_neg)


# -- evaluation protocol -------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    group: str
    valid: bool
    les: float
    les_capped: bool
    likelihood: float
    prior: float
    polarity: float
    train_distance: float


SCORE_COLUMNS = ("les", "likelihood", "prior", "polarity", "train_distance")


def score_points(model, cache: TrainLatentCache, z: np.ndarray, group: str) -> list[ScoreRow]:
    zb = np.atleast_2d(z)
    valid = [grammar.is_valid(t) for t in _argmax_tokens(model, zb)]
    les_v, les_c = les_batch(model, zb)
    lik, _ = likelihood_batch(model, zb)
    pri, _ = prior_batch(zb)
    pol, _ = polarity_batch(model, zb)
    dist = train_distance_batch(cache, zb)
    return [
        ScoreRow(group, valid[i], float(les_v[i]), bool(les_c[i]), float(lik[i]), float(pri[i]), float(pol[i]), float(dist[i]))
        for i in range(len(zb))
    ]


def _argmax_tokens(model, zb: np.ndarray) -> list[tuple[int, ...]]:
    logits = decoder_logits(model, zb)
    return [tuple(int(t) for t in row) for row in np.argmax(softmax_extended(logits).probs, axis=1)]


def eval_scores_protocol(
    model,
    cache: TrainLatentCache,
    dataset: Sequence[Sequence[int]],
    rng: np.random.Generator,
    n_per_group: int = 500,
    ood_std: float = 5.0,
) -> list[ScoreRow]:
    """Score ``n_per_group`` latents from each of: encoded training data, the
    standard-normal prior, and a wide Gaussian with std ``ood_std``."""
    d = model.latent_dim
    idx = rng.choice(len(dataset), size=n_per_group, replace=len(dataset) < n_per_group)
    groups = {
        "train": encode_mean(model, [dataset[i] for i in idx]),
        "prior": rng.standard_normal((n_per_group, d)),
        "ood": ood_std * rng.standard_normal((n_per_group, d)),
    }
    rows: list[ScoreRow] = []
    for name, z in groups.items():
        rows.extend(score_points(model, cache, z, name))
    return rows


@dataclass(frozen=True)
class AurocRow:
    score: str
    auroc: float
    n_valid: int
    n_invalid: int


def auroc_summary(rows: Sequence[ScoreRow]) -> list[AurocRow]:
    labels = np.array([r.valid for r in rows])
    n_valid = int(labels.sum())
    n_invalid = len(labels) - n_valid
    if n_valid == 0 or n_invalid == 0:
        groups = sorted({r.group for r in rows})
        raise UndefinedMetricError(
            f"AUROC undefined: {n_valid} valid and {n_invalid} invalid samples across groups {groups}"
        )
    return [
        AurocRow(col, auroc([getattr(r, col) for r in rows], labels), n_valid, n_invalid)
        for col in SCORE_COLUMNS
    ]
