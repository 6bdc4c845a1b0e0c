import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtl import nn
from gtl.rng import make_rng


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def test_dense_identity():
    eye = np.eye(2)
    out = nn.dense_forward(eye, eye, np.zeros(2))
    np.testing.assert_array_equal(out, eye)


def test_dense_hand_case():
    out = nn.dense_forward([[1.0, 2.0]], [[1.0], [1.0]], [1.0])
    np.testing.assert_array_equal(out, [[4.0]])


def test_dense_matches_naive_matmul():
    rng = make_rng(7)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    out = nn.dense_forward(x, w, b)
    naive = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            acc = b[j]
            for k in range(5):
                acc += x[i, k] * w[k, j]
            naive[i, j] = acc
    assert np.abs(out - naive).max() <= 1e-12


def test_dense_shape_mismatch():
    with pytest.raises(nn.DimensionError):
        nn.dense_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


def test_dense_backward_zero():
    x = np.ones((2, 3))
    w = np.ones((3, 4))
    dx, dw, db = nn.dense_backward(x, w, np.zeros((2, 4)))
    assert not dx.any() and not dw.any() and not db.any()


def test_dense_backward_scalar_case():
    dx, dw, db = nn.dense_backward([[2.0]], [[3.0]], [[1.0]])
    assert dx[0, 0] == 3.0 and dw[0, 0] == 2.0 and db[0] == 1.0


def test_dense_backward_matches_finite_differences():
    rng = make_rng(11)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=5)
    proj = rng.normal(size=(4, 5))  # random scalarization

    def loss(xv, wv, bv):
        return float((nn.dense_forward(xv, wv, bv) * proj).sum())

    dx, dw, db = nn.dense_backward(x, w, proj)
    h = 1e-5
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(x, w, b)
            flat[i] = orig - h
            lm = loss(x, w, b)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = grad.reshape(-1)[i]
            assert abs(ana - num) / max(abs(ana), abs(num), 1.0) < 1e-6


# ---------------------------------------------------------------------------
# relu / dropout / batchnorm
# ---------------------------------------------------------------------------

def test_relu_definition():
    np.testing.assert_array_equal(
        nn.relu_forward(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]]
    )


def test_relu_backward_mask():
    x = np.array([[-1.0, 0.5, 0.0]])
    d = np.ones_like(x)
    np.testing.assert_array_equal(nn.relu_backward(x, d), [[0.0, 1.0, 0.0]])


def test_dropout_rate_zero_identity():
    x = make_rng(1).normal(size=(3, 4))
    for train in (True, False):
        out, mask = nn.dropout_forward(x, 0.0, None, train)
        assert mask is None
        np.testing.assert_array_equal(out, x)


def test_dropout_eval_identity():
    x = make_rng(2).normal(size=(3, 4))
    out, mask = nn.dropout_forward(x, 0.5, None, train=False)
    assert mask is None
    np.testing.assert_array_equal(out, x)


def test_dropout_inverted_scaling():
    rng = make_rng(3)
    x = np.ones((200, 50))
    out, mask = nn.dropout_forward(x, 0.25, rng, train=True)
    # kept units are scaled by 1/keep so the expectation matches the input
    kept = mask > 0
    np.testing.assert_allclose(out[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 3 * math.sqrt(0.25 * 0.75 / mask.size)


def test_dropout_backward_uses_mask():
    rng = make_rng(4)
    x = rng.normal(size=(5, 6))
    _, mask = nn.dropout_forward(x, 0.5, rng, train=True)
    d = rng.normal(size=(5, 6))
    np.testing.assert_array_equal(nn.dropout_backward(mask, d), d * mask)


def test_batchnorm_hand_case():
    state = nn.BatchNormState.create(1)
    out, _ = nn.batchnorm_forward(np.array([[1.0], [3.0]]), state, train=True)
    np.testing.assert_allclose(out, [[-1.0], [1.0]], atol=1e-4)
    # exact value under the declared eps
    np.testing.assert_allclose(out[1, 0], 1.0 / math.sqrt(1.0 + 1e-5), rtol=1e-15)


def test_batchnorm_train_needs_two_samples():
    state = nn.BatchNormState.create(3)
    with pytest.raises(ValueError, match="at least 2"):
        nn.batchnorm_forward(np.ones((1, 3)), state, train=True)


def test_batchnorm_eval_uses_running_stats():
    state = nn.BatchNormState.create(2)
    rng = make_rng(5)
    for _ in range(50):
        nn.batchnorm_forward(rng.normal(2.0, 3.0, size=(64, 2)), state, train=True)
    x = rng.normal(size=(4, 2))
    out1, _ = nn.batchnorm_forward(x, state, train=False)
    out2, _ = nn.batchnorm_forward(x, state, train=False)
    np.testing.assert_array_equal(out1, out2)
    expected = (x - state.running_mean) / np.sqrt(state.running_var + state.eps)
    np.testing.assert_allclose(out1, expected, rtol=1e-12)


def test_relu_dropout_chain_matches_finite_differences():
    # fixed dropout mask, inputs away from the relu kink
    rng = make_rng(15)
    x = rng.normal(size=(5, 4)) + np.sign(rng.normal(size=(5, 4))) * 0.2
    _, mask = nn.dropout_forward(np.ones_like(x), 0.5, rng, train=True)
    proj = rng.normal(size=(5, 4))

    def loss():
        return float((nn.dropout_backward(mask, nn.relu_forward(x).copy())
                      * proj).sum())  # dropout_backward doubles as mask apply

    d_relu = nn.dropout_backward(mask, proj)
    dx = nn.relu_backward(x, d_relu)
    h = 1e-5
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss()
        flat[i] = orig - h
        lm = loss()
        flat[i] = orig
        num = (lp - lm) / (2 * h)
        ana = dx.reshape(-1)[i]
        assert abs(ana - num) / max(abs(ana), abs(num), 1.0) < 1e-4


def test_batchnorm_backward_matches_finite_differences():
    rng = make_rng(6)
    x = rng.normal(size=(6, 3))
    state = nn.BatchNormState.create(3)
    state.gamma[:] = rng.normal(size=3)
    state.beta[:] = rng.normal(size=3)
    proj = rng.normal(size=(6, 3))

    def loss():
        out, _ = nn.batchnorm_forward(x, state, train=True, update_running=False)
        return float((out * proj).sum())

    out, cache = nn.batchnorm_forward(x, state, train=True, update_running=False)
    dx, dgamma, dbeta = nn.batchnorm_backward(cache, proj)
    h = 1e-5
    for arr, grad in ((x, dx), (state.gamma, dgamma), (state.beta, dbeta)):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = grad.reshape(-1)[i]
            assert abs(ana - num) / max(abs(ana), abs(num), 1.0) < 1e-4


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def test_softmax_ce_uniform_logits():
    for c in (2, 5, 17):
        loss, _ = nn.softmax_cross_entropy(np.zeros((3, c)), np.zeros(3, dtype=int))
        assert abs(loss - math.log(c)) < 1e-12


def test_softmax_ce_saturated():
    logits = np.zeros((2, 4))
    logits[0, 1] = 1e6
    logits[1, 3] = 1e6
    loss, _ = nn.softmax_cross_entropy(logits, np.array([1, 3]))
    assert loss < 1e-9


def test_softmax_ce_matches_logsumexp_oracle():
    rng = make_rng(8)
    logits = rng.normal(size=(4, 3)) * 3.0
    labels = rng.integers(0, 3, size=4)
    loss, d = nn.softmax_cross_entropy(logits, labels)
    per_row = [
        math.log(sum(math.exp(v) for v in row)) - row[y]
        for row, y in zip(logits.tolist(), labels.tolist())
    ]
    assert abs(loss - sum(per_row) / 4) < 1e-10
    # gradient: (softmax - one_hot) / B
    p = nn.softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(4), labels] = 1.0
    np.testing.assert_allclose(d, (p - onehot) / 4, atol=1e-12)


def test_softmax_ce_label_out_of_range():
    with pytest.raises(IndexError):
        nn.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    logits = make_rng(seed).normal(size=(5, 7)) * 50.0
    rows = nn.softmax(logits).sum(axis=1)
    assert np.abs(rows - 1.0).max() <= 1e-12


# ---------------------------------------------------------------------------
# gaussian KL
# ---------------------------------------------------------------------------

def test_kl_zero_at_prior():
    assert nn.gaussian_kl(np.zeros((3, 4)), np.zeros((3, 4))) == 0.0


def test_kl_unit_mean_closed_form():
    assert abs(nn.gaussian_kl(np.ones((1, 1)), np.zeros((1, 1))) - 0.5) < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_kl_nonnegative(seed):
    rng = make_rng(seed)
    mu = rng.normal(size=(4, 6)) * 3
    logvar = rng.normal(size=(4, 6)) * 2
    assert nn.gaussian_kl(mu, logvar) >= 0.0


def test_kl_matches_monte_carlo_oracle():
    rng = make_rng(9)
    mu = rng.normal(size=(1, 3))
    logvar = rng.normal(size=(1, 3)) * 0.5
    analytic = nn.gaussian_kl(mu, logvar)

    n = 10**5
    std = np.exp(0.5 * logvar)
    z = mu + std * rng.standard_normal((n, 3))
    # log q(z) - log p(z), model and prior both diagonal Gaussians
    log_q = -0.5 * (((z - mu) / std) ** 2 + np.log(2 * np.pi) + logvar).sum(axis=1)
    log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(axis=1)
    samples = log_q - log_p
    mc = samples.mean()
    se = samples.std(ddof=1) / math.sqrt(n)
    assert abs(analytic - mc) < 3 * se


def test_kl_backward_matches_finite_differences():
    rng = make_rng(10)
    mu = rng.normal(size=(3, 4))
    logvar = rng.normal(size=(3, 4))
    d_mu, d_lv = nn.gaussian_kl_backward(mu, logvar)
    h = 1e-6
    for arr, grad in ((mu, d_mu), (logvar, d_lv)):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = nn.gaussian_kl(mu, logvar)
            flat[i] = orig - h
            lm = nn.gaussian_kl(mu, logvar)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            assert abs(grad.reshape(-1)[i] - num) < 1e-6


# ---------------------------------------------------------------------------
# reparameterization
# ---------------------------------------------------------------------------

def test_reparameterize_zero_variance_limit():
    mu = make_rng(12).normal(size=(4, 5))
    logvar = np.full((4, 5), nn.LOGVAR_MIN)
    z, _ = nn.reparameterize(mu, logvar, make_rng(0))
    assert np.abs(z - mu).max() < 1e-6


def test_reparameterize_deterministic_given_seed():
    mu = np.zeros((3, 4))
    logvar = np.zeros((3, 4))
    z1, _ = nn.reparameterize(mu, logvar, make_rng(42))
    z2, _ = nn.reparameterize(mu, logvar, make_rng(42))
    np.testing.assert_array_equal(z1, z2)


def test_reparameterize_moments():
    rng = make_rng(13)
    n = 10**5
    mu = np.full((n, 1), 0.7)
    logvar = np.full((n, 1), -0.4)
    z, _ = nn.reparameterize(mu, logvar, rng)
    var = math.exp(-0.4)
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2.0 / (n - 1))
    assert abs(z.mean() - 0.7) < 3 * se_mean
    assert abs(z.var(ddof=1) - var) < 3 * se_var


def test_reparameterize_backward():
    rng = make_rng(14)
    logvar = rng.normal(size=(2, 3))
    eps = rng.standard_normal((2, 3))
    d_z = rng.normal(size=(2, 3))
    d_mu, d_lv = nn.reparameterize_backward(logvar, eps, d_z)
    np.testing.assert_array_equal(d_mu, d_z)
    np.testing.assert_allclose(d_lv, d_z * 0.5 * np.exp(0.5 * logvar) * eps)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def _group_with(w):
    g = nn.ParamGroup("g")
    g.add("w", w)
    return g


def test_adam_zero_grad_no_decay_is_noop():
    g = _group_with(np.array([[1.0, -2.0]]))
    before = g.weights["w"].copy()
    state = nn.AdamState.for_group(g, lr=0.1)
    nn.adam_step(g, state)
    np.testing.assert_array_equal(g.weights["w"], before)


def test_adam_converges_on_quadratic():
    g = _group_with(np.array([[3.0]]))
    state = nn.AdamState.for_group(g, lr=0.1)
    for _ in range(200):
        g.grads["w"][...] = 2.0 * g.weights["w"]  # d/dw of w^2
        nn.adam_step(g, state)
    assert abs(g.weights["w"][0, 0]) < 1e-3


def test_adam_frozen_group_untouched():
    g = _group_with(np.array([[1.0, 2.0]]))
    g.frozen = True
    g.grads["w"][...] = 5.0
    before = g.weights["w"].tobytes()
    state = nn.AdamState.for_group(g, lr=0.1, weight_decay=0.1)
    with pytest.warns(UserWarning, match="frozen"):
        nn.adam_step(g, state)
    assert g.weights["w"].tobytes() == before
    assert state.step_count == 0


def test_adam_decoupled_weight_decay():
    g = _group_with(np.array([[2.0]]))
    state = nn.AdamState.for_group(g, lr=0.5, weight_decay=0.1)
    g.grads["w"][...] = 0.0
    nn.adam_step(g, state)
    # zero gradient: only the decay term acts, w <- w - lr*wd*w
    np.testing.assert_allclose(g.weights["w"], [[2.0 * (1 - 0.05)]])


def test_adam_step_counter():
    g = _group_with(np.zeros((2, 2)))
    state = nn.AdamState.for_group(g, lr=0.01)
    for i in range(1, 6):
        nn.adam_step(g, state)
        assert state.step_count == i


# ---------------------------------------------------------------------------
# gradient checker
# ---------------------------------------------------------------------------

def _linear_mse_setup(seed=20):
    rng = make_rng(seed)
    x = rng.normal(size=(8, 3))
    y = rng.normal(size=(8, 2))
    g = nn.ParamGroup("linear")
    g.add("w", rng.normal(size=(3, 2)))
    g.add("b", np.zeros(2))

    def closure(compute_grads):
        out = nn.dense_forward(x, g.weights["w"], g.weights["b"])
        loss = float(((out - y) ** 2).mean())
        if compute_grads:
            g.zero_grads()
            d_out = 2.0 * (out - y) / out.size
            _, dw, db = nn.dense_backward(x, g.weights["w"], d_out)
            g.grads["w"] += dw
            g.grads["b"] += db
        return loss

    return closure, g


def test_grad_check_linear_mse():
    closure, g = _linear_mse_setup()
    report = nn.gradient_check(closure, [g], tol=1e-8)
    assert report.passed, report.summary()
    assert report.max_rel_err < 1e-8
    assert report.entries_checked == 8


def test_grad_check_flags_corrupted_backward():
    closure, g = _linear_mse_setup()

    def corrupted(compute_grads):
        loss = closure(compute_grads)
        if compute_grads:
            g.grads["w"] *= 1.5  # deliberately wrong scale
        return loss

    report = nn.gradient_check(corrupted, [g], tol=1e-8)
    assert not report.passed
    assert report.worst.group == "linear"
    assert "FAIL" in report.summary()


def test_grad_check_skips_frozen_groups():
    closure, g = _linear_mse_setup()
    g.frozen = True
    report = nn.gradient_check(closure, [g], tol=1e-8)
    assert report.entries_checked == 0
    assert report.worst is None


def test_grad_check_subsamples_large_tensors():
    closure, g = _linear_mse_setup()
    report = nn.gradient_check(closure, [g], tol=1e-8,
                               max_entries_per_tensor=2, rng=make_rng(0))
    assert report.entries_checked == 4
