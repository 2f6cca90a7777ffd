import numpy as np
import pytest
import torch

from d4pm.denoiser import DenoiserConfig, film, forward, init_params, loss_and_grad
from d4pm.gradcheck import check_gradients
from d4pm.schedule import ContinuousLevel


def small(**kw):
    base = dict(n=16, channels=8, encoder_blocks=1, heads=4, film_embed_dim=8)
    base.update(kw)
    return DenoiserConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(channels=6, heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(encoder_blocks=0)


def test_init_deterministic():
    a, b = init_params(small(), 3), init_params(small(), 3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        assert torch.equal(va, vb)
    c = init_params(small(), 4)
    assert not torch.equal(a.path_a.conv1.weight, c.path_a.conv1.weight)


def test_parameter_names_stable():
    keys = list(init_params(small(), 0).state_dict())
    assert "film.class_embed.weight" in keys
    assert "path_a.blocks.0.qkv.weight" in keys and "path_b.pos_bias" in keys
    assert "fuse.weight" in keys and "out.weight" in keys


def test_identity_film_at_init():
    net = init_params(small(encoder_blocks=2), 0)
    for z in ("EOG", "EMG", "ECG"):
        sites = film(net, ContinuousLevel(0.37, 5), z)
        assert len(sites) == 2 * (2 + 1)
        for gamma, xi in sites:
            np.testing.assert_array_equal(gamma, 1.0)
            np.testing.assert_array_equal(xi, 0.0)


def test_film_rejects_unknown_class():
    with pytest.raises(ValueError):
        film(init_params(small(), 0), 0.5, "CLEAN")


@pytest.mark.parametrize("n", [16, 64])
def test_forward_shape_and_determinism(n):
    net = init_params(small(n=n), 1)
    r = np.random.default_rng(0)
    x, y = r.standard_normal(n), r.standard_normal(n)
    a = forward(net, x, y, 0.5, "EOG")
    b = forward(net, x, y, 0.5, "EOG")
    assert a.shape == (n,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)
    batch = forward(net, np.stack([x, y]), np.stack([y, x]), [0.5, 0.2], ["EOG", "ECG"])
    assert batch.shape == (2, n)


def test_forward_output_independent_of_condition_at_init():
    net = init_params(small(), 2)
    r = np.random.default_rng(1)
    x, y = r.standard_normal(16), r.standard_normal(16)
    ref = forward(net, x, y, 0.9, "EOG")
    np.testing.assert_array_equal(ref, forward(net, x, y, 0.1, "EMG"))


def test_forward_errors():
    net = init_params(small(), 0)
    with pytest.raises(ValueError):
        forward(net, np.zeros(16), np.zeros(15), 0.5, "EOG")
    with pytest.raises(ValueError):
        forward(net, np.full(16, np.nan), np.zeros(16), 0.5, "EOG")


def test_weight_perturbation_is_first_order():
    net = init_params(small(), 5).double()
    r = np.random.default_rng(2)
    x, y = r.standard_normal(16), r.standard_normal(16)
    base = forward(net, x, y, 0.5, "ECG")
    w = net.out.weight
    diffs = []
    for delta in (1e-3, 1e-4):
        with torch.no_grad():
            w[0, 3, 2] += delta
        diffs.append(np.abs(forward(net, x, y, 0.5, "ECG") - base).max())
        with torch.no_grad():
            w[0, 3, 2] -= delta
    assert diffs[0] > 0
    assert diffs[0] / diffs[1] == pytest.approx(10.0, rel=1e-3)


def _batch(net_n, size, seed):
    r = np.random.default_rng(seed)
    return [(r.standard_normal(net_n), r.standard_normal(net_n), float(r.uniform(0.1, 1.0)),
             ["EOG", "EMG", "ECG"][i % 3], r.standard_normal(net_n)) for i in range(size)]


def test_loss_zero_when_target_is_output():
    net = init_params(small(), 0).double()
    b = _batch(16, 2, 0)
    b = [(x, y, lv, z, forward(net, x, y, lv, z)) for x, y, lv, z, _ in b]
    loss, grads = loss_and_grad(net, b)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_loss_mean_invariance():
    net = init_params(small(), 0).double()
    item = _batch(16, 1, 3)[0]
    one, _ = loss_and_grad(net, [item])
    many, _ = loss_and_grad(net, [item] * 4)
    assert one == pytest.approx(many, rel=1e-12)
    with pytest.raises(ValueError):
        loss_and_grad(net, [])


def randomized_net(seed):
    """Float64 network with the FiLM heads moved off zero so every path carries gradient."""
    net = init_params(small(), seed).double()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for head in net.film.heads:
            head.weight.copy_(0.3 * torch.randn(head.weight.shape, generator=g, dtype=torch.float64))
            head.bias.copy_(0.1 * torch.randn(head.bias.shape, generator=g, dtype=torch.float64))
        net.path_a.pos_bias.copy_(0.1 * torch.randn(16, generator=g, dtype=torch.float64))
        net.path_b.pos_bias.copy_(0.1 * torch.randn(16, generator=g, dtype=torch.float64))
    return net


def test_gradients_match_finite_differences():
    net = randomized_net(7)
    samples = check_gradients(net, _batch(16, 3, 7), 80, np.random.default_rng(7))
    worst = max(samples, key=lambda s: s.error())
    assert worst.error() <= 1e-3, worst
