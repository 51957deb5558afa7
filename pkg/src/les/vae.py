"""Beta-VAE over one-hot token sequences with MLP encoder and decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import grammar
from .nn import AdamState, ExtendedOutput, MlpParams, TrainingError, adam_step, backward, forward, init_mlp, softmax_extended

log = logging.getLogger(__name__)


@dataclass
class VaeModel:
    encoder: MlpParams
    decoder: MlpParams
    latent_dim: int
    seq_len: int = grammar.SEQ_LEN
    vocab_size: int = grammar.VOCAB_SIZE
    beta: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1 or self.beta <= 0:
            raise ValueError("latent_dim must be >= 1 and beta > 0")
        if self.decoder.out_dim != self.seq_len * self.vocab_size:
            raise ValueError("decoder output size must equal seq_len * vocab_size")
        if self.decoder.in_dim != self.latent_dim or self.encoder.out_dim != 2 * self.latent_dim:
            raise ValueError("encoder/decoder do not match latent_dim")


@dataclass
class TrainConfig:
    beta: float = 0.1
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 256
    seed: int = 1
    latent_dim: int = 16
    hidden_width: int = 256

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    ce: float
    kl: float
    total: float


def new_model(config: TrainConfig, rng: np.random.Generator) -> VaeModel:
    flat = grammar.SEQ_LEN * grammar.VOCAB_SIZE
    h = config.hidden_width
    d = config.latent_dim
    encoder = init_mlp([flat, h, 2 * d], rng)
    decoder = init_mlp([d, h, h, flat], rng)
    return VaeModel(encoder, decoder, latent_dim=d, beta=config.beta)


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) per row."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=-1, keepdims=True)
    return logits - top - np.log(np.sum(np.exp(logits - top), axis=-1, keepdims=True))


def reconstruction_ce(model: VaeModel, z: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Cross-entropy summed over positions, one value per row of ``z``."""
    logits, _ = forward(model.decoder, z)
    logp = _log_softmax(logits.reshape(len(z), model.seq_len, model.vocab_size))
    return -np.take_along_axis(logp, ids[:, :, None], axis=2)[..., 0].sum(axis=1)


def batch_loss(model: VaeModel, x: np.ndarray, ids: np.ndarray, eps: np.ndarray):
    """Loss and gradients for one minibatch (means over the batch).

    Returns ``(ce, kl, encoder_grads, decoder_grads)``.
    """
    n = len(x)
    d = model.latent_dim
    enc_out, enc_trace = forward(model.encoder, x)
    mu, logvar = enc_out[:, :d], enc_out[:, d:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps

    logits, dec_trace = forward(model.decoder, z)
    logits3 = logits.reshape(n, model.seq_len, model.vocab_size)
    logp = _log_softmax(logits3)
    ce = -np.take_along_axis(logp, ids[:, :, None], axis=2)[..., 0].sum(axis=1)
    kl = kl_divergence(mu, logvar)

    g_logits = np.exp(logp)
    np.put_along_axis(g_logits, ids[:, :, None], np.take_along_axis(g_logits, ids[:, :, None], axis=2) - 1.0, axis=2)
    g_logits = g_logits.reshape(n, -1) / n
    dec_grads, g_z = backward(model.decoder, dec_trace, g_logits)

    beta = model.beta
    g_mu = g_z + beta * mu / n
    g_logvar = g_z * eps * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0) / n
    enc_grads, _ = backward(model.encoder, enc_trace, np.concatenate([g_mu, g_logvar], axis=1))
    return float(ce.mean()), float(kl.mean()), enc_grads, dec_grads


def _round_to_float32(params: MlpParams) -> None:
    for arr in params.arrays():
        arr[...] = arr.astype(np.float32).astype(np.float64)


def train(
    dataset: Sequence[Sequence[int]],
    config: TrainConfig,
    on_epoch: Callable[[EpochLoss], None] | None = None,
) -> tuple[VaeModel, list[EpochLoss]]:
    """Train a VAE on token sequences.

    All randomness (initialisation, shuffling, reparameterisation noise) comes
    from ``config.seed``. Final parameters are rounded to float32 precision so a
    checkpoint round trip is lossless.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    model = new_model(config, rng)
    x_all = grammar.one_hot_batch(dataset)
    ids_all = np.asarray(dataset, dtype=np.int64)
    enc_state = AdamState(lr=config.learning_rate)
    dec_state = AdamState(lr=config.learning_rate)
    history: list[EpochLoss] = []
    n = len(x_all)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        ce_sum = kl_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            eps = rng.standard_normal((len(idx), config.latent_dim))
            ce, kl, g_enc, g_dec = batch_loss(model, x_all[idx], ids_all[idx], eps)
            if not (np.isfinite(ce) and np.isfinite(kl)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                adam_step(enc_state, model.encoder, g_enc)
                adam_step(dec_state, model.decoder, g_dec)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            ce_sum += ce * len(idx)
            kl_sum += kl * len(idx)
        ce_mean = ce_sum / n
        kl_mean = kl_sum / n
        row = EpochLoss(epoch, ce_mean, kl_mean, ce_mean + model.beta * kl_mean)
        history.append(row)
        log.info("epoch %d ce %.4f kl %.4f total %.4f", epoch, row.ce, row.kl, row.total)
        if on_epoch is not None:
            on_epoch(row)

    _round_to_float32(model.encoder)
    _round_to_float32(model.decoder)
    return model, history


def encode_mean(model: VaeModel, seqs) -> np.ndarray:
    """Encoder mean for one sequence ``(d,)`` or a list of sequences ``(n, d)``."""
    seqs = list(seqs)
    single = bool(seqs) and np.isscalar(seqs[0])
    x = grammar.one_hot_batch([seqs] if single else seqs)
    out, _ = forward(model.encoder, x)
    mu = out[:, : model.latent_dim]
    return mu[0] if single else mu


def decoder_logits(model: VaeModel, z) -> np.ndarray:
    """Decoder logits as ``(D, L)`` (or ``(batch, D, L)``), one column per position."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise ValueError(f"latent dimension {z.shape[-1]} != {model.latent_dim}")
    out, _ = forward(model.decoder, z)
    shaped = out.reshape(*out.shape[:-1], model.seq_len, model.vocab_size)
    return np.swapaxes(shaped, -1, -2)


def decode(model: VaeModel, z) -> tuple[np.ndarray, ExtendedOutput, tuple[int, ...]]:
    logits = decoder_logits(model, z)
    if logits.ndim != 2:
        raise ValueError("decode takes a single latent point; use decode_tokens for batches")
    ext = softmax_extended(logits)
    return logits, ext, grammar.argmax_decode(ext.probs)


def decode_tokens(model: VaeModel, z) -> list[tuple[int, ...]]:
    """Argmax token sequences for a batch of latent points."""
    logits = decoder_logits(model, np.atleast_2d(z))
    ids = np.argmax(logits, axis=1)
    return [tuple(int(t) for t in row) for row in ids]


def reconstruction_accuracy(model: VaeModel, seqs: Sequence[Sequence[int]]) -> tuple[float, float]:
    """Token-level and whole-sequence argmax reconstruction accuracy from the mean."""
    ids = np.asarray(seqs, dtype=np.int64)
    mu = encode_mean(model, list(seqs))
    pred = np.argmax(decoder_logits(model, mu), axis=1)
    hit = pred == ids
    return float(hit.mean()), float(hit.all(axis=1).mean())
