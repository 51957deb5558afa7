"""Small ReLU-MLP engine with exact Jacobians, backprop and Adam.

Weights are stored as ``(out, in)`` so a layer computes ``W @ x + b``.
Batched inputs are ``(batch, in)`` arrays and are handled by the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AdamState",
    "ExtendedOutput",
    "ForwardTrace",
    "MlpParams",
    "TrainingError",
    "adam_step",
    "backward",
    "extended_jacobian_blocks",
    "forward",
    "init_mlp",
    "jacobian",
    "softmax_extended",
    "softmax_extended_jacobian",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpParams:
    """Affine layers; ReLU after every layer except the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def shapes(self) -> list[list[int]]:
        return [[w.shape[1], w.shape[0]] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: weight then bias, layer by layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(sizes: list[int], rng: np.random.Generator) -> MlpParams:
    """He-initialised MLP with layer widths ``sizes`` (input first)."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


@dataclass
class ForwardTrace:
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardTrace]:
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"input dimension {h.shape[-1]} != {params.in_dim}")
    trace = ForwardTrace(post=[h])
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        trace.pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
        trace.post.append(h)
    return h, trace


def backward(params: MlpParams, trace: ForwardTrace, grad_out) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode pass; parameter gradients are summed over a batch."""
    g = np.asarray(grad_out, dtype=np.float64)
    n_layers = len(params.weights)
    if len(trace.pre) != n_layers or trace.pre[-1].shape != g.shape:
        raise ValueError("trace does not match parameters or output gradient")
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            g = g * (trace.pre[i] > 0)
        inp = trace.post[i]
        if g.ndim == 1:
            gw[i] = np.outer(g, inp)
            gb[i] = g.copy()
        else:
            gw[i] = g.T @ inp
            gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return MlpParams(gw, gb), g


def jacobian(params: MlpParams, z) -> np.ndarray:
    """Exact Jacobian by forward-mode propagation of the basis directions.

    Returns ``(out, d)`` for a single point or ``(batch, out, d)`` for a batch.
    Within one ReLU activation region this is the region's affine slope.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    _, trace = forward(params, zb)
    d = params.in_dim
    tangent = np.broadcast_to(np.eye(d), (zb.shape[0], d, d))
    last = len(params.weights) - 1
    for i, w in enumerate(params.weights):
        tangent = w @ tangent
        if i != last:
            tangent = tangent * (trace.pre[i] > 0)[:, :, None]
    return tangent[0] if single else tangent


@dataclass(frozen=True)
class ExtendedOutput:
    """Column-wise softmax probabilities and inverse normalising constants.

    ``probs`` has shape ``(..., D, L)``, ``inv_norms`` shape ``(..., L)``.
    """

    probs: np.ndarray
    inv_norms: np.ndarray


def softmax_extended(logits) -> ExtendedOutput:
    l = np.asarray(logits, dtype=np.float64)
    top = l.max(axis=-2, keepdims=True)
    e = np.exp(l - top)
    s = e.sum(axis=-2, keepdims=True)
    probs = e / s
    # c^-1 = exp(-max) / sum(exp(l - max)); computed without forming c.
    inv = np.exp(-top) / s
    return ExtendedOutput(probs=probs, inv_norms=inv[..., 0, :])


def _complement(p: np.ndarray) -> np.ndarray:
    # 1 - p_j as the sum of the other probabilities; exact when p_j rounds to 1
    d = p.shape[-1]
    return np.sum(p[..., None, :] * (1.0 - np.eye(d)), axis=-1)


def extended_jacobian_blocks(ext: ExtendedOutput) -> np.ndarray:
    """All per-position Jacobians of ``(p, 1/c)`` w.r.t. the logits.

    Shape ``(..., L, D + 1, D)``: rows ``0..D-1`` are ``diag(p) - p p^T``, the
    last row is ``-p^T / c``.
    """
    p = np.moveaxis(ext.probs, -1, -2)  # (..., L, D)
    d = p.shape[-1]
    top = -p[..., :, None] * p[..., None, :]
    idx = np.arange(d)
    top[..., idx, idx] = p * _complement(p)
    last = -(p * ext.inv_norms[..., None])[..., None, :]
    return np.concatenate([top, last], axis=-2)


def softmax_extended_jacobian(ext: ExtendedOutput, position: int) -> np.ndarray:
    length = ext.probs.shape[-1]
    if not 0 <= position < length:
        raise IndexError(f"position {position} outside 0..{length - 1}")
    p = ext.probs[:, position]
    block = -np.outer(p, p)
    np.fill_diagonal(block, p * _complement(p))
    return np.vstack([block, -p[None, :] * ext.inv_norms[position]])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> MlpParams:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(p_arrays, g_arrays)):
        raise ValueError("gradient shapes do not match parameters")
    for k, g in enumerate(g_arrays):
        if not np.all(np.isfinite(g)):
            kind = "weight" if k % 2 == 0 else "bias"
            raise TrainingError(f"non-finite gradient in layer {k // 2} {kind}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in p_arrays]
        state.v = [np.zeros_like(p) for p in p_arrays]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
