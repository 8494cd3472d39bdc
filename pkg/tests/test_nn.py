import numpy as np
import numpy.testing as npt
import pytest

from fliplab import nn
from fliplab.errors import ConfigError, NonFiniteError
from fliplab.oracles import gradient_check, small_network

from conftest import make_store


def _dense_net(w, b):
    net = [nn.dense(*w.shape)]
    params = nn.ParameterStore(
        [nn.ParamGroup("0.dense.weight", "weight", 0, w.astype(float)),
         nn.ParamGroup("0.dense.bias", "bias", 0, b.astype(float))],
        [np.zeros_like(w, dtype=float), np.zeros_like(b, dtype=float)])
    return net, params


def _randomize_affine(params, rng):
    for g in params.groups:
        if g.role in ("bias", "bn_beta"):
            g.value[...] = rng.normal(0, 0.1, g.value.shape)
        elif g.role == "bn_gamma":
            g.value[...] = rng.uniform(0.5, 1.5, g.value.shape)


# -- forward -----------------------------------------------------------------

def test_identity_dense_returns_input():
    net, params = _dense_net(np.eye(3), np.zeros(3))
    x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]])
    logits, _ = nn.forward(net, params, x, "eval")
    npt.assert_array_equal(logits, x)


def test_relu_definition():
    net = [nn.relu()]
    params = nn.ParameterStore([], [])
    out, _ = nn.forward(net, params, np.array([[-1.0, 0.0, 2.0]]), "train")
    npt.assert_array_equal(out, [[0.0, 0.0, 2.0]])


def test_bn_eval_with_unit_stats_is_identity():
    state = nn.BatchNormState.fresh(3)
    x = np.array([[0.5, -1.0, 2.0], [3.0, 0.0, -4.0]])
    y, cache = nn.batchnorm_forward(x, np.ones(3), np.zeros(3), state, "eval")
    assert cache is None
    npt.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=0, atol=1e-12)
    npt.assert_allclose(y, x, atol=1e-4)


def test_bn_train_two_samples():
    state = nn.BatchNormState.fresh(1)
    y, _ = nn.batchnorm_forward(np.array([[1.0], [3.0]]), np.ones(1), np.zeros(1), state, "train")
    npt.assert_allclose(y.ravel(), [-1.0, 1.0], atol=1e-5)


def test_bn_zero_gamma_gives_beta():
    state = nn.BatchNormState.fresh(2)
    x = np.random.default_rng(0).normal(size=(6, 2))
    y, _ = nn.batchnorm_forward(x, np.zeros(2), np.full(2, 5.0), state, "train")
    npt.assert_array_equal(y, 5.0)


def test_bn_gamma_scales_standardized_input():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 3))
    x = (x - x.mean(0)) / x.std(0)
    y, _ = nn.batchnorm_forward(x, np.full(3, 2.0), np.zeros(3), nn.BatchNormState.fresh(3), "train")
    npt.assert_allclose(y, 2 * x, atol=1e-4)


def test_bn_running_stats_update():
    state = nn.BatchNormState.fresh(1)
    nn.batchnorm_forward(np.array([[1.0], [3.0]]), np.ones(1), np.zeros(1), state, "train")
    # mean 2, unbiased variance 2, momentum 0.1
    npt.assert_allclose(state.running_mean, [0.2])
    npt.assert_allclose(state.running_var, [0.9 * 1 + 0.1 * 2.0])


def test_bn_eval_ignores_batch_statistics(rng):
    state = nn.BatchNormState(rng.normal(size=4), rng.uniform(0.5, 2, 4))
    x = rng.normal(size=(8, 4))
    y_full, _ = nn.batchnorm_forward(x, np.ones(4), np.zeros(4), state, "eval")
    y_one, _ = nn.batchnorm_forward(x[:1], np.ones(4), np.zeros(4), state, "eval")
    npt.assert_array_equal(y_full[:1], y_one)


def test_bn_per_channel_on_images(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    y, _ = nn.batchnorm_forward(x, np.ones(3), np.zeros(3), nn.BatchNormState.fresh(3), "train")
    npt.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    npt.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_shape_mismatch_is_config_error():
    net, params = _dense_net(np.eye(3), np.zeros(3))
    with pytest.raises(ConfigError):
        nn.forward(net, params, np.ones((2, 4)))
    with pytest.raises(ConfigError):
        nn.infer_shapes([nn.dense(4, 5), nn.dense(6, 2)], (4,))
    with pytest.raises(ConfigError):
        nn.infer_shapes([nn.conv2d(1, 2, 3), nn.flatten(), nn.dense(10, 2)], (1, 5, 5))


def test_infer_shapes_chain():
    net = [nn.conv2d(1, 4, 5), nn.relu(), nn.flatten(), nn.dense(2304, 10)]
    assert nn.infer_shapes(net, (1, 28, 28))[-1] == (10,)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out, _ = nn.conv2d_forward(x, w, b, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 5))
    for n in range(2):
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    npt.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_logits_shape():
    net, shape = small_network("mixed")
    params = nn.init_params(net, np.random.default_rng(0))
    logits, cache = nn.forward(net, params, np.zeros((7, *shape)), "train")
    assert logits.shape == (7, 3)
    assert len(cache) == len(net)


# -- backward ----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["dense", "mixed"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    net, shape = small_network(kind)
    params = nn.init_params(net, rng)
    _randomize_affine(params, rng)
    x = rng.standard_normal((5, *shape))
    y = rng.integers(0, 3, 5)
    errors = gradient_check(net, params, x, y)
    assert set(errors) == {g.name for g in params.groups}
    assert max(errors.values()) <= 1e-5, errors


def test_zero_last_layer_logit_gradient():
    net, params = _dense_net(np.zeros((4, 3)), np.zeros(3))
    x = np.random.default_rng(0).normal(size=(2, 4))
    y = np.array([0, 2])
    logits, _ = nn.forward(net, params, x)
    _, dlogits = nn.softmax_cross_entropy(logits, y)
    expected = (np.full((2, 3), 1 / 3) - np.eye(3)[y]) / 2
    npt.assert_allclose(dlogits, expected, rtol=1e-15)


def test_masked_weight_gradient_zero_after_mask_grads(rng):
    from fliplab.pruning import Mask, mask_grads

    net, shape = small_network("dense")
    params = nn.init_params(net, rng)
    mask = Mask.full(params)
    mask.bits[0][1, 2] = False
    _, grads, _ = nn.loss_and_grads(net, params, rng.normal(size=(5, *shape)), rng.integers(0, 3, 5))
    mask_grads(grads, mask)
    assert grads[mask.slots[0]][1, 2] == 0.0


def test_softmax_cross_entropy_value():
    loss, _ = nn.softmax_cross_entropy(np.zeros((4, 5)), np.arange(4))
    assert loss == pytest.approx(np.log(5))


# -- optimizer ---------------------------------------------------------------

def test_plain_sgd_arithmetic():
    params = make_store([1.0])
    opt = nn.OptimizerConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    nn.sgd_step(params, [np.array([2.0])], opt, 0)
    npt.assert_allclose(params.groups[0].value, [0.8])


def test_momentum_coasting():
    params = make_store([1.0])
    params.momentum[0][...] = 1.0
    opt = nn.OptimizerConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    nn.sgd_step(params, [np.array([0.0])], opt, 0)
    npt.assert_allclose(params.groups[0].value, [1.0 - 0.09])


def test_two_momentum_steps_match_hand_recurrence():
    theta, g1, g2, lr, mu, wd = 0.7, 0.3, -1.1, 0.05, 0.9, 0.01
    # hand-unrolled
    v1 = g1 + wd * theta
    t1 = theta - lr * v1
    v2 = mu * v1 + g2 + wd * t1
    t2 = t1 - lr * v2
    params = make_store([theta])
    opt = nn.OptimizerConfig(learning_rate=lr, momentum=mu, weight_decay=wd)
    nn.sgd_step(params, [np.array([g1])], opt, 0)
    nn.sgd_step(params, [np.array([g2])], opt, 0)
    npt.assert_allclose(params.groups[0].value, [t2], rtol=1e-15)
    npt.assert_allclose(params.momentum[0], [v2], rtol=1e-15)


@pytest.mark.parametrize("epoch,expected", [(0, 0.1), (149, 0.1), (150, 0.01), (249, 0.01), (250, 0.001)])
def test_lr_schedule_defaults(epoch, expected):
    assert nn.lr_at(nn.OptimizerConfig(), epoch) == pytest.approx(expected, rel=1e-12)


def test_optimizer_defaults():
    opt = nn.OptimizerConfig()
    assert (opt.learning_rate, opt.momentum, opt.weight_decay, opt.lr_decay_factor) == (0.1, 0.9, 5e-4, 10)
    assert opt.lr_decay_epochs == (150, 250)


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        nn.OptimizerConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        nn.OptimizerConfig(lr_decay_epochs=(250, 150))
    with pytest.raises(ConfigError):
        nn.OptimizerConfig(learning_rate=-1)


def test_non_finite_update_aborts():
    params = make_store([1.0])
    with pytest.raises(NonFiniteError):
        nn.sgd_step(params, [np.array([np.inf])], nn.OptimizerConfig(), 0)
    assert params.groups[0].value[0] == 1.0


def test_zero_learning_rate_keeps_params_bit_identical(rng):
    net, shape = small_network("mixed")
    params = nn.init_params(net, rng)
    before = [g.value.copy() for g in params.groups]
    opt = nn.OptimizerConfig(learning_rate=0.0)
    for _ in range(20):
        _, grads, _ = nn.loss_and_grads(net, params, rng.normal(size=(4, *shape)), rng.integers(0, 3, 4))
        nn.sgd_step(params, grads, opt, 0)
    for b, g in zip(before, params.groups):
        npt.assert_array_equal(b, g.value)


# -- whole loop --------------------------------------------------------------

def test_memorizes_fifty_samples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 10))
    y = rng.integers(0, 5, 50)
    net = [nn.dense(10, 128), nn.relu(), nn.dense(128, 5)]
    params = nn.init_params(net, rng)
    opt = nn.OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=0.0)
    loss = np.inf
    for step in range(500):
        loss, grads, _ = nn.loss_and_grads(net, params, x, y)
        if loss < 0.01:
            break
        nn.sgd_step(params, grads, opt, 0)
    assert loss < 0.01, (step, loss)


def test_eval_is_batch_size_invariant(rng):
    net, shape = small_network("mixed")
    params = nn.init_params(net, rng)
    # move running stats off their defaults
    for _ in range(3):
        nn.forward(net, params, rng.normal(size=(6, *shape)), "train")
    x = rng.normal(size=(9, *shape))
    full, _ = nn.forward(net, params, x, "eval")
    for i in range(9):
        single, _ = nn.forward(net, params, x[i:i + 1], "eval")
        npt.assert_allclose(single[0], full[i], rtol=1e-12, atol=1e-14)
    again, _ = nn.forward(net, params, x, "eval")
    npt.assert_array_equal(full, again)


def test_init_conventions(rng):
    net = [nn.conv2d(2, 3, 3), nn.batchnorm(3), nn.flatten(), nn.dense(27, 4)]
    params = nn.init_params(net, rng)
    w = params.find(0, "weight").value
    assert np.abs(w).max() <= np.sqrt(6 / 18)
    npt.assert_array_equal(params.find(0, "bias").value, 0)
    npt.assert_array_equal(params.find(1, "bn_gamma").value, 1)
    npt.assert_array_equal(params.find(1, "bn_beta").value, 0)
    assert all(v.shape == g.value.shape for v, g in zip(params.momentum, params.groups))
    assert all(g.value.dtype == np.float64 for g in params.groups)
