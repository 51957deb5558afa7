import numpy as np
import pytest

from les import grammar
from les.checkpoint import (
    BadMagic,
    ShapeMismatch,
    TruncatedPayload,
    VersionMismatch,
    from_bytes,
    load_checkpoint,
    model_checksum,
    save_checkpoint,
    to_bytes,
)
from les.vae import (
    TrainConfig,
    batch_loss,
    decode,
    decode_tokens,
    decoder_logits,
    encode_mean,
    kl_divergence,
    new_model,
    reconstruction_accuracy,
    reconstruction_ce,
    train,
)

from .conftest import REFERENCE_CKPT


@pytest.fixture(scope="module")
def small_data():
    rng = np.random.default_rng(11)
    return [grammar.sample_expression(rng) for _ in range(300)]


@pytest.fixture(scope="module")
def small_model(small_data):
    model, history = train(small_data, TrainConfig(epochs=3, batch_size=64, hidden_width=32, latent_dim=4, seed=3))
    return model, history


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0)


def test_kl_closed_form():
    assert kl_divergence(np.zeros(3), np.zeros(3)) == 0.0
    rng = np.random.default_rng(0)
    mu = rng.standard_normal((50, 4))
    logvar = rng.standard_normal((50, 4))
    assert np.all(kl_divergence(mu, logvar) >= 0)


def test_loss_is_ce_plus_beta_kl(small_model):
    _, history = small_model
    for row in history:
        assert abs(row.total - (row.ce + 0.1 * row.kl)) <= 1e-12


def test_batch_loss_gradient_matches_finite_differences(small_data):
    cfg = TrainConfig(hidden_width=8, latent_dim=2)
    model = new_model(cfg, np.random.default_rng(4))
    x = grammar.one_hot_batch(small_data[:5])
    ids = np.asarray(small_data[:5])
    eps = np.random.default_rng(5).standard_normal((5, 2))

    def total(m):
        ce, kl, _, _ = batch_loss(m, x, ids, eps)
        return ce + m.beta * kl

    _, _, g_enc, g_dec = batch_loss(model, x, ids, eps)
    h = 1e-6
    for params, grads in ((model.encoder, g_enc), (model.decoder, g_dec)):
        for li in range(len(params.weights)):
            idx = (0, 0)
            orig = params.weights[li][idx]
            params.weights[li][idx] = orig + h
            up = total(model)
            params.weights[li][idx] = orig - h
            down = total(model)
            params.weights[li][idx] = orig
            assert (up - down) / (2 * h) == pytest.approx(grads.weights[li][idx], rel=1e-4, abs=1e-7)


def test_training_is_deterministic(small_data, small_model):
    again, _ = train(small_data, TrainConfig(epochs=3, batch_size=64, hidden_width=32, latent_dim=4, seed=3))
    assert to_bytes(again) == to_bytes(small_model[0])


def test_large_beta_collapses_posterior_mean(small_data):
    model, _ = train(small_data, TrainConfig(beta=1e6, epochs=40, batch_size=64, hidden_width=32, latent_dim=4, seed=2))
    assert float(np.mean(np.abs(encode_mean(model, small_data)))) < 0.1


def test_encode_decode_shapes(small_model, small_data):
    model, _ = small_model
    z = encode_mean(model, small_data[0])
    assert z.shape == (4,)
    assert np.array_equal(z, encode_mean(model, small_data[0]))
    logits, ext, tokens = decode(model, z)
    assert logits.shape == (grammar.VOCAB_SIZE, grammar.SEQ_LEN)
    assert decode(model, z)[2] == tokens
    assert decode_tokens(model, z[None])[0] == tokens
    assert decoder_logits(model, np.stack([z, z])).shape == (2, grammar.VOCAB_SIZE, grammar.SEQ_LEN)
    assert reconstruction_ce(model, z[None], np.asarray([small_data[0]])).shape == (1,)


def test_training_data_is_valid(reference_data):
    assert all(grammar.is_valid(s) for s in reference_data)


def test_reference_model_quality(reference_model, reference_data):
    mu = encode_mean(reference_model, reference_data)
    ids = np.asarray(reference_data)
    ce = float(np.mean(reconstruction_ce(reference_model, mu, ids))) / grammar.SEQ_LEN
    token_acc, seq_acc = reconstruction_accuracy(reference_model, reference_data)
    assert ce < 0.25
    assert token_acc > 0.90
    assert seq_acc >= 0.90  # encode then decode recovers the input


def test_reference_header(reference_model):
    assert reference_model.beta == 0.1 and reference_model.latent_dim == 16


# -- checkpoint -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_model):
    model, _ = small_model
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    for a, b in zip(model.encoder.arrays() + model.decoder.arrays(), back.encoder.arrays() + back.decoder.arrays()):
        assert np.array_equal(a, b)
    assert back.beta == model.beta and back.latent_dim == model.latent_dim
    assert model_checksum(back) == model_checksum(model)


def test_checkpoint_errors(small_model):
    blob = to_bytes(small_model[0])
    with pytest.raises(BadMagic):
        from_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(TruncatedPayload):
        from_bytes(blob[:-8])
    with pytest.raises(TruncatedPayload):
        from_bytes(blob[:10])
    hlen = int.from_bytes(blob[8:12], "little")
    header = blob[12 : 12 + hlen]
    with pytest.raises(VersionMismatch):
        from_bytes(blob[:12] + header.replace(b'"format_version": 1', b'"format_version": 2') + blob[12 + hlen :])
    with pytest.raises(ShapeMismatch):
        from_bytes(blob + b"\0\0\0\0")
    shrunk = header.replace(b'"latent_dim": 4', b'"latent_dim": 5')
    with pytest.raises(ShapeMismatch):
        from_bytes(blob[:8] + len(shrunk).to_bytes(4, "little") + shrunk + blob[12 + hlen :])


@pytest.mark.slow
def test_reference_checkpoint_reproduces(reference_data):
    """Retrain the reference model from scratch; the bytes must match the fixture."""
    model, _ = train(reference_data, TrainConfig())
    assert to_bytes(model) == REFERENCE_CKPT.read_bytes()
