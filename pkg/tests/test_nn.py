import numpy as np
import pytest

from les.nn import (
    AdamState,
    MlpParams,
    TrainingError,
    adam_step,
    backward,
    extended_jacobian_blocks,
    forward,
    init_mlp,
    jacobian,
    softmax_extended,
    softmax_extended_jacobian,
)


def _naive_forward(params, x):
    h = list(x)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for r in range(w.shape[0]):
            s = b[r]
            for c in range(w.shape[1]):
                s += w[r, c] * h[c]
            out.append(s if i == len(params.weights) - 1 else max(s, 0.0))
        h = out
    return np.array(h)


def _kink_free(params, z, h):
    _, t0 = forward(params, z)
    for e in np.eye(len(z)):
        for sgn in (1, -1):
            _, t = forward(params, z + sgn * h * e)
            if any(np.any((a > 0) != (b > 0)) for a, b in zip(t0.pre[:-1], t.pre[:-1])):
                return False
    return True


def test_identity_network():
    p = MlpParams([np.eye(3)], [np.zeros(3)])
    x = np.array([1.0, -2.0, 3.0])
    out, trace = forward(p, x)
    assert np.array_equal(out, x)
    _, g_in = backward(p, trace, np.array([0.5, 1.0, -1.0]))
    assert np.array_equal(g_in, [0.5, 1.0, -1.0])


def test_hand_relu_layer():
    p = MlpParams([np.array([[1.0], [-1.0]]), np.eye(2)], [np.zeros(2), np.zeros(2)])
    _, trace = forward(p, np.array([2.0]))
    np.testing.assert_array_equal(trace.pre[0], [2.0, -2.0])
    np.testing.assert_array_equal(trace.post[1], [2.0, 0.0])


def test_forward_matches_naive():
    rng = np.random.default_rng(0)
    p = init_mlp([4, 7, 5, 3], rng)
    for x in rng.standard_normal((5, 4)):
        np.testing.assert_allclose(forward(p, x)[0], _naive_forward(p, x), atol=1e-12)
    batch = rng.standard_normal((6, 4))
    np.testing.assert_allclose(forward(p, batch)[0], np.array([_naive_forward(p, x) for x in batch]), atol=1e-12)


def test_linear_net_closed_form_gradient():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((3, 4))
    p = MlpParams([w], [np.zeros(3)])
    x = rng.standard_normal(4)
    out, trace = forward(p, x)
    grads, _ = backward(p, trace, out)  # loss = 1/2 |out|^2
    np.testing.assert_allclose(grads.weights[0], np.outer(out, x), atol=1e-14)
    np.testing.assert_allclose(grads.biases[0], out, atol=1e-14)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = init_mlp([3, 6, 4], rng)
    x = rng.standard_normal(3)
    direction = rng.standard_normal(4)
    while not _kink_free(p, x, 1e-5):
        x = rng.standard_normal(3)

    def loss(params, inp):
        return float(forward(params, inp)[0] @ direction)

    _, trace = forward(p, x)
    grads, g_in = backward(p, trace, direction)
    h = 1e-5
    for li, w in enumerate(p.weights):
        for idx in [(0, 0), (w.shape[0] - 1, w.shape[1] - 1)]:
            plus, minus = p.copy(), p.copy()
            plus.weights[li][idx] += h
            minus.weights[li][idx] -= h
            fd = (loss(plus, x) - loss(minus, x)) / (2 * h)
            assert fd == pytest.approx(grads.weights[li][idx], rel=1e-5, abs=1e-8)
    fd_in = np.array([(loss(p, x + h * e) - loss(p, x - h * e)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(fd_in, g_in, rtol=1e-5, atol=1e-8)


def test_jacobian_linear_case():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((5, 2))
    p = MlpParams([w], [rng.standard_normal(5)])
    for z in rng.standard_normal((3, 2)):
        assert np.array_equal(jacobian(p, z), w)


def test_jacobian_forward_vs_reverse_mode():
    rng = np.random.default_rng(4)
    p = init_mlp([4, 16, 16, 6], rng)
    z = rng.standard_normal(4)
    j = jacobian(p, z)
    _, trace = forward(p, z)
    for k in range(6):
        _, row = backward(p, trace, np.eye(6)[k])
        np.testing.assert_allclose(j[k], row, atol=1e-10)


def test_affine_within_region():
    rng = np.random.default_rng(5)
    p = init_mlp([3, 12, 12, 4], rng)
    z = rng.standard_normal(3)
    v = rng.standard_normal(3)
    t = 1e-6
    _, t0 = forward(p, z)
    _, t1 = forward(p, z + t * v)
    assert all(np.array_equal(a > 0, b > 0) for a, b in zip(t0.pre[:-1], t1.pre[:-1]))
    diff = forward(p, z + t * v)[0] - forward(p, z)[0]
    np.testing.assert_allclose(diff, t * jacobian(p, z) @ v, atol=1e-10)


def test_batched_jacobian_shape():
    rng = np.random.default_rng(6)
    p = init_mlp([3, 5, 7], rng)
    zs = rng.standard_normal((4, 3))
    jb = jacobian(p, zs)
    assert jb.shape == (4, 7, 3)
    for k in range(4):
        np.testing.assert_array_equal(jb[k], jacobian(p, zs[k]))


def test_softmax_extended_examples():
    ext = softmax_extended(np.zeros((2, 1)))
    np.testing.assert_allclose(ext.probs[:, 0], [0.5, 0.5])
    assert ext.inv_norms[0] == pytest.approx(0.5)
    ext = softmax_extended(np.array([[1000.0], [0.0]]))
    assert np.all(np.isfinite(ext.probs)) and np.isfinite(ext.inv_norms[0])
    assert ext.probs[0, 0] == 1.0 and ext.probs[1, 0] == 0.0


def test_softmax_extended_matches_naive():
    rng = np.random.default_rng(7)
    logits = rng.normal(0, 3, (5, 4))
    ext = softmax_extended(logits)
    e = np.exp(logits)
    np.testing.assert_allclose(ext.probs, e / e.sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(ext.inv_norms, 1.0 / e.sum(axis=0), rtol=1e-10)
    np.testing.assert_allclose(ext.probs.sum(axis=0), 1.0, atol=1e-12)


def test_softmax_jacobian_hand_case():
    ext = softmax_extended(np.zeros((2, 1)))
    np.testing.assert_allclose(softmax_extended_jacobian(ext, 0), [[0.25, -0.25], [-0.25, 0.25], [-0.25, -0.25]])
    sat = softmax_extended(np.array([[60.0], [0.0], [-5.0]]))
    assert np.max(np.abs(softmax_extended_jacobian(sat, 0))) < 1e-20
    with pytest.raises(IndexError):
        softmax_extended_jacobian(ext, 1)


def test_softmax_jacobian_finite_differences():
    rng = np.random.default_rng(8)
    logits = rng.normal(0, 1, (4, 3))
    ext = softmax_extended(logits)
    h = 1e-6
    for pos in range(3):
        block = softmax_extended_jacobian(ext, pos)
        for k in range(4):
            lp, lm = logits.copy(), logits.copy()
            lp[k, pos] += h
            lm[k, pos] -= h
            ep, em = softmax_extended(lp), softmax_extended(lm)
            col = np.concatenate([ep.probs[:, pos] - em.probs[:, pos], [ep.inv_norms[pos] - em.inv_norms[pos]]]) / (2 * h)
            np.testing.assert_allclose(block[:, k], col, atol=1e-6)
        # probability mass conservation
        np.testing.assert_allclose(block[:-1].sum(axis=0), 0.0, atol=1e-15)
    blocks = extended_jacobian_blocks(ext)
    for pos in range(3):
        np.testing.assert_allclose(blocks[pos], softmax_extended_jacobian(ext, pos), atol=1e-15)


def test_adam_zero_gradient_and_first_step():
    p = MlpParams([np.ones((2, 2))], [np.zeros(2)])
    state = AdamState(lr=0.1)
    zero = MlpParams([np.zeros((2, 2))], [np.zeros(2)])
    adam_step(state, p, zero)
    assert state.step == 1 and np.array_equal(p.weights[0], np.ones((2, 2)))
    state = AdamState(lr=0.1)
    g = MlpParams([np.array([[2.0, -3.0], [0.5, 0.0]])], [np.array([1.0, -1.0])])
    adam_step(state, p, g)
    expected = 1.0 - 0.1 * np.sign(g.weights[0]) * (np.abs(g.weights[0]) / (np.abs(g.weights[0]) + 1e-8))
    np.testing.assert_allclose(p.weights[0], expected, atol=1e-9)


def test_adam_decreases_quadratic():
    rng = np.random.default_rng(9)
    target = rng.standard_normal((3, 3))
    p = MlpParams([np.zeros((3, 3))], [np.zeros(3)])
    state = AdamState(lr=0.01)
    losses = []
    for _ in range(100):
        diff = p.weights[0] - target
        losses.append(0.5 * float(np.sum(diff * diff)))
        adam_step(state, p, MlpParams([diff], [np.zeros(3)]))
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_rejects_non_finite():
    p = MlpParams([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    bad = MlpParams([np.zeros((1, 1)), np.zeros((1, 1))], [np.zeros(1), np.array([np.nan])])
    with pytest.raises(TrainingError, match="layer 1 bias"):
        adam_step(AdamState(), p, bad)


def test_mlp_params_validation():
    with pytest.raises(ValueError):
        MlpParams([np.ones((2, 3))], [np.ones(3)])
    with pytest.raises(ValueError):
        MlpParams([np.ones((2, 3)), np.ones((2, 3))], [np.ones(2), np.ones(2)])
