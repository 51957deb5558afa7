"""Binary checkpoint format for :class:`les.vae.VaeModel`.

Layout::

    b"LESCKPT1"                 8 bytes magic
    u32 little-endian           header length in bytes
    UTF-8 JSON header           format_version, latent_dim, seq_len, vocab_size,
                                beta, encoder_shapes, decoder_shapes, vocab,
                                param_count
    float32 little-endian       all parameters, encoder then decoder; per layer
                                the (out, in) weight row-major, then the bias

``*_shapes`` list ``[in, out]`` per layer. Parameters are widened to float64 on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import grammar
from .nn import MlpParams
from .vae import VaeModel

MAGIC = b"LESCKPT1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


def _count(shapes) -> int:
    return sum(i * o + o for i, o in shapes)


def to_bytes(model: VaeModel) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "latent_dim": model.latent_dim,
        "seq_len": model.seq_len,
        "vocab_size": model.vocab_size,
        "beta": model.beta,
        "encoder_shapes": model.encoder.shapes,
        "decoder_shapes": model.decoder.shapes,
        "vocab": list(grammar.VOCAB),
        "param_count": _count(model.encoder.shapes) + _count(model.decoder.shapes),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([a.ravel() for a in model.encoder.arrays() + model.decoder.arrays()])
    return MAGIC + struct.pack("<I", len(raw)) + raw + payload.astype("<f4").tobytes()


def save_checkpoint(model: VaeModel, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def _unpack(shapes, flat: np.ndarray, offset: int) -> tuple[MlpParams, int]:
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        n = fan_in * fan_out
        weights.append(flat[offset : offset + n].reshape(fan_out, fan_in).copy())
        offset += n
        biases.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    return MlpParams(weights, biases), offset


def from_bytes(blob: bytes) -> VaeModel:
    if len(blob) < 12:
        raise TruncatedPayload("file shorter than the fixed preamble")
    if blob[:8] != MAGIC:
        raise BadMagic(f"bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise TruncatedPayload("header is truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"format_version {header.get('format_version')!r} != {FORMAT_VERSION}")

    try:
        enc_shapes = [tuple(map(int, s)) for s in header["encoder_shapes"]]
        dec_shapes = [tuple(map(int, s)) for s in header["decoder_shapes"]]
        declared = int(header.get("param_count", _count(enc_shapes) + _count(dec_shapes)))
        latent_dim = int(header["latent_dim"])
        seq_len = int(header["seq_len"])
        vocab_size = int(header["vocab_size"])
        beta = float(header["beta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc

    payload = blob[12 + hlen :]
    if len(payload) % 4 or len(payload) < 4 * declared:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, expected {4 * declared}")
    expected = _count(enc_shapes) + _count(dec_shapes)
    if expected != declared or len(payload) != 4 * expected:
        raise ShapeMismatch(f"header shapes need {expected} parameters, payload holds {len(payload) // 4}")

    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    try:
        encoder, offset = _unpack(enc_shapes, flat, 0)
        decoder, _ = _unpack(dec_shapes, flat, offset)
        return VaeModel(encoder, decoder, latent_dim=latent_dim, seq_len=seq_len, vocab_size=vocab_size, beta=beta)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc


def load_checkpoint(path: str | Path) -> VaeModel:
    return from_bytes(Path(path).read_bytes())


def model_checksum(model: VaeModel) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()
