import numpy as np
import pytest

from ppgsleep import neural
from ppgsleep.neural import (
    Adam,
    BatchTooSmall,
    EmptyMask,
    NoTape,
    Tensor,
    conv1d,
    dropout,
    dsu_forward,
    masked_cross_entropy,
    maxpool1d,
    batchnorm_train,
    batchnorm_eval,
    no_grad,
    softmax,
)
from ppgsleep.neural import ops, tensor as T
from ppgsleep.neural.checkpoint import load_checkpoint, save_checkpoint


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return (np.abs(a - b) / denom).max()


def finite_diff(f, arr, h=1e-5):
    """Central differences of a scalar function wrt one array argument."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = f()
        arr[i] = orig - h
        fm = f()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def check_gradients(build, arrays, tol=1e-4):
    """build(arrays) -> (loss Tensor, [leaf Tensors]); FD-check each leaf."""
    loss, leaves = build()
    loss.backward()
    grads = [leaf.grad.copy() for leaf in leaves]
    for arr, grad in zip(arrays, grads):
        fd = finite_diff(lambda: float(build()[0].data), arr)
        assert rel_err(fd, grad) < tol, f"gradient mismatch for shape {arr.shape}"


def _leaf(arr):
    t = Tensor(arr)
    t.requires_grad = True
    return t


def test_conv1d_gradients_with_dilation():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 14))
    w = rng.normal(size=(5, 3, 3))
    b = rng.normal(size=5)
    proj = rng.normal(size=(2, 5, 14))

    def build():
        xt, wt, bt = _leaf(x), _leaf(w), _leaf(b)
        out = conv1d(xt, wt, bt, dilation=3)
        return (out * Tensor(proj)).sum(), [xt, wt, bt]

    check_gradients(build, [x, w, b])


def test_conv1d_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 4, 9))
    w = np.zeros((4, 4, 1))
    for c in range(4):
        w[c, c, 0] = 1.0
    out = conv1d(Tensor(x), Tensor(w), None)
    np.testing.assert_array_equal(out.data, x)


def test_batchnorm_train_stats_and_gradients():
    rng = np.random.default_rng(2)
    x = 5.0 + 2.0 * rng.normal(size=(3, 2, 40))
    gamma = np.array([1.3, 0.7])
    beta = np.array([0.1, -0.2])
    out, batch_mean, batch_std = batchnorm_train(_leaf(x), Tensor(gamma), Tensor(beta))
    pre = (out.data - beta[None, :, None]) / gamma[None, :, None]
    # eps=1e-5 leaves the normalized variance 1 only to ~sigma^2/(sigma^2+eps)
    assert abs(pre.mean(axis=(0, 2))).max() < 1e-6
    assert np.abs(pre.var(axis=(0, 2)) - 1.0).max() < 1e-5
    assert batch_mean.shape == (2,) and batch_std.shape == (2,)

    proj = rng.normal(size=x.shape)

    def build():
        xt, gt, bt = _leaf(x), _leaf(gamma), _leaf(beta)
        out, _, _ = batchnorm_train(xt, gt, bt)
        return (out * Tensor(proj)).sum(), [xt, gt, bt]

    check_gradients(build, [x, gamma, beta])


def test_batchnorm_eval_identity_at_init():
    layer = neural.BatchNorm(3)
    x = np.random.default_rng(3).normal(size=(2, 3, 8))
    out = layer.forward(Tensor(x), neural.RunContext(training=False))
    assert out.data.tobytes() == x.tobytes()


def test_batchnorm_train_eval_coincide_when_stats_match():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 2, 64))
    layer = neural.BatchNorm(2, momentum=0.0)  # running <- batch immediately
    out_train = layer.forward(Tensor(x), neural.RunContext(training=True))
    out_eval = layer.forward(Tensor(x), neural.RunContext(training=False))
    np.testing.assert_allclose(out_train.data, out_eval.data, atol=1e-12)


def test_maxpool_shape_and_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 1024))
    out = maxpool1d(Tensor(x), 4)
    assert out.shape == (1, 2, 256)

    x_small = rng.normal(size=(2, 3, 12))
    proj = rng.normal(size=(2, 3, 6))

    def build():
        xt = _leaf(x_small)
        return (maxpool1d(xt, 2) * Tensor(proj)).sum(), [xt]

    check_gradients(build, [x_small])


def test_dense_gradients():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=(5, 3))

    def build():
        xt, wt, bt = _leaf(x), _leaf(w), _leaf(b)
        return ((xt @ wt + bt) * Tensor(proj)).sum(), [xt, wt, bt]

    check_gradients(build, [x, w, b])


def test_dropout_frozen_mask_gradients_and_eval():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 10))
    mask = (rng.random(x.shape) >= 0.35) / 0.65
    proj = rng.normal(size=x.shape)

    def build():
        xt = _leaf(x)
        return (dropout(xt, 0.35, mask=mask) * Tensor(proj)).sum(), [xt]

    check_gradients(build, [x])
    layer = neural.Dropout(0.5)
    out = layer.forward(Tensor(x), neural.RunContext(training=False))
    assert out.data.tobytes() == x.tobytes()


def test_softmax_rows_and_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 6))
    y = softmax(Tensor(x), axis=1)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-9)
    proj = rng.normal(size=x.shape)

    def build():
        xt = _leaf(x)
        return (softmax(xt, axis=1) * Tensor(proj)).sum(), [xt]

    check_gradients(build, [x])


def test_masked_cross_entropy_values():
    # uniform logits over 4 classes -> ln 4
    logits = np.zeros((1, 4, 3))
    labels = np.array([[0, 1, 2]])
    mask = np.ones((1, 3), bool)
    loss = masked_cross_entropy(Tensor(logits), labels, mask)
    assert float(loss.data) == pytest.approx(np.log(4.0), abs=1e-12)

    # near one-hot logits -> near zero
    big = np.full((1, 4, 2), -30.0)
    big[0, 2, 0] = 30.0
    big[0, 0, 1] = 30.0
    loss2 = masked_cross_entropy(Tensor(big), np.array([[2, 0]]), np.ones((1, 2), bool))
    assert float(loss2.data) < 1e-9


def test_masked_cross_entropy_empty_mask():
    with pytest.raises(EmptyMask):
        masked_cross_entropy(Tensor(np.zeros((1, 4, 2))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_masked_positions_get_zero_gradient():
    rng = np.random.default_rng(9)
    logits = _leaf(rng.normal(size=(2, 4, 5)))
    labels = rng.integers(0, 4, size=(2, 5))
    mask = np.array([[1, 1, 0, 1, 0], [0, 1, 1, 1, 1]], dtype=bool)
    loss = masked_cross_entropy(logits, labels, mask)
    loss.backward()
    assert (logits.grad[~np.broadcast_to(mask[:, None, :], logits.shape)] == 0.0).all()
    assert np.abs(logits.grad[np.broadcast_to(mask[:, None, :], logits.shape)]).sum() > 0


def test_masked_cross_entropy_gradients():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(2, 4, 6))
    labels = rng.integers(0, 4, size=(2, 6))
    mask = rng.random((2, 6)) > 0.3

    def build():
        lt = _leaf(logits)
        return masked_cross_entropy(lt, labels, mask), [lt]

    check_gradients(build, [logits])


# ---------------------------------------------------------------------------
# DSU

def test_dsu_eval_and_p0_are_bit_exact_identity():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(3, 2, 20)))
    assert dsu_forward(x, 0.5, rng, training=False) is x
    assert dsu_forward(x, 0.0, rng, training=True) is x


def test_dsu_degenerate_batch_identity():
    rng = np.random.default_rng(12)
    row = rng.normal(size=(1, 3, 25))
    x = Tensor(np.concatenate([row, row], axis=0))
    out = dsu_forward(x, 1.0, np.random.default_rng(0), training=True, force_apply=True)
    assert np.abs(out.data - x.data).max() < 1e-9


def test_dsu_batch_too_small():
    with pytest.raises(BatchTooSmall):
        dsu_forward(Tensor(np.zeros((1, 2, 5))), 0.5, np.random.default_rng(0), training=True)


def test_dsu_zero_mean_perturbation():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(3, 4, 50)) * 2.0 + 1.0)
    mu = x.data.mean(axis=2)  # [B, C]
    draws = 2000
    noise_rng = np.random.default_rng(99)
    acc = np.zeros_like(mu)
    for _ in range(draws):
        _, shift, _ = dsu_forward(
            x, 1.0, noise_rng, training=True, force_apply=True, return_shift_scale=True
        )
        acc += shift[:, :, 0]
    mean_shift = acc / draws
    spread_mu = mu.std(axis=0)  # [C]
    se = spread_mu / np.sqrt(draws)
    assert (np.abs(mean_shift.mean(axis=0) - mu.mean(axis=0)) <= 3 * se / np.sqrt(3) + 1e-12).all()


def test_dsu_gradients_frozen_noise():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 2, 12))
    e_m = rng.normal(size=(3, 2, 1))
    e_s = rng.normal(size=(3, 2, 1))
    proj = rng.normal(size=x.shape)

    def build():
        xt = _leaf(x)
        out = dsu_forward(xt, 1.0, None, training=True, noise=(e_m, e_s), force_apply=True)
        return (out * Tensor(proj)).sum(), [xt]

    check_gradients(build, [x])


# ---------------------------------------------------------------------------
# Optimizer, tape, checkpoints

def test_adam_first_step_magnitude():
    p = Tensor.param(np.array([1.0, -2.0, 3.0]))
    adam = Adam([p], lr=0.01)
    p.grad = np.array([0.5, -1.0, 2.0])
    before = p.data.copy()
    adam.step()
    delta = p.data - before
    np.testing.assert_allclose(np.abs(delta), 0.01, rtol=1e-6)
    assert (np.sign(delta) == -np.sign(p.grad)).all()


def test_adam_zero_grad_no_change():
    p = Tensor.param(np.array([1.0, 2.0]))
    adam = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    before = p.data.copy()
    adam.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_quadratic_bowl():
    w = Tensor.param(np.array([1.0]))
    adam = Adam([w], lr=0.1)
    for _ in range(200):
        loss = (w * w).sum()
        adam.zero_grad()
        loss.backward()
        adam.step()
    assert abs(float(w.data[0])) < 1e-2


def test_backward_requires_tape():
    with pytest.raises(NoTape):
        Tensor(np.array(1.0)).backward()


def test_zero_upstream_gives_zero_param_grads():
    rng = np.random.default_rng(15)
    w = Tensor.param(rng.normal(size=(3, 2, 3)))
    x = Tensor(rng.normal(size=(2, 2, 10)))
    out = conv1d(x, w, None)
    loss = (out * Tensor(np.zeros_like(out.data))).sum()
    loss.backward()
    assert (w.grad == 0.0).all()


def test_no_grad_builds_no_graph():
    w = Tensor.param(np.ones(3))
    with no_grad():
        out = (w * 2.0).sum()
    assert out._parents == ()
    with pytest.raises(NoTape):
        out.backward()


def test_determinism_fixed_seed():
    def run():
        from ppgsleep import models

        m = models.build("raw-mini-dsu", seed=3).train()
        adam = Adam(m.parameters(), lr=1e-3)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 1, 1024 * 2))
        labels = rng.integers(0, 4, size=(2, 2))
        mask = np.ones((2, 2), bool)
        losses = []
        for _ in range(3):
            m.rng = np.random.default_rng(7)
            loss = masked_cross_entropy(m.forward(x), labels, mask)
            adam.zero_grad()
            loss.backward()
            adam.step()
            losses.append(float(loss.data))
        return losses

    assert run() == run()


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    params = {"a.w": rng.normal(size=(3, 4)), "b.gamma": rng.normal(size=5)}
    buffers = {"b.run_mean": rng.normal(size=5)}
    m = {k: rng.normal(size=v.shape) for k, v in params.items()}
    v = {k: rng.normal(size=val.shape) for k, val in params.items()}
    path = save_checkpoint(tmp_path / "w.spw2", params, buffers, (m, v, 17))
    assert path.read_bytes()[:4] == b"SPW2"
    p2, b2, moments = load_checkpoint(path)
    for k in params:
        np.testing.assert_array_equal(p2[k], params[k])
    np.testing.assert_array_equal(b2["b.run_mean"], buffers["b.run_mean"])
    m2, v2, t2 = moments
    assert t2 == 17
    np.testing.assert_array_equal(m2["a.w"], m["a.w"])
    np.testing.assert_array_equal(v2["b.gamma"], v["b.gamma"])


def test_checkpoint_without_moments(tmp_path):
    path = save_checkpoint(tmp_path / "w.spw2", {"x": np.ones(2)}, {})
    _, _, moments = load_checkpoint(path)
    assert moments is None
