import numpy as np
import pytest

from helpers import small_mixed_net
from latentadv.attacks import AttackConfig, pgd, pgd_latent
from latentadv.data import Dataset, batches, synthetic_two_gaussians
from latentadv.network import Dense, Network, accuracy, cross_entropy_per_sample, loss_cross_entropy, mlp, mnist_cnn
from latentadv.tensor import make_rng
from latentadv.training import (TrainConfig, _latent_loss_grads, _streams, batch_latent_epsilon, budget_ramp,
                                finetune_fnt, finetune_lat, sgd_update, train, train_adversarial, train_natural)

ATK = AttackConfig(0.1, 0.03, 3, random_start=True)
LAT_TEMPLATE = AttackConfig(1.0, 0.25, 3, random_start=True)


def image_data(n=40, seed=0):
    rng = make_rng(seed)
    return Dataset(rng.uniform(size=(n, 2, 6, 6)), rng.integers(0, 4, size=n), "noise", 4)


def same_params(a: Network, b: Network) -> bool:
    return all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))


def cfg(**kw):
    base = dict(lr=0.05, batch_size=8, steps=6, attack=ATK, latent_attack=LAT_TEMPLATE, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_zero_lr_is_identity(mixed_net, rng):
    gb = mixed_net.loss_and_grads(rng.uniform(size=mixed_net.input_shape), 0)[1]
    assert same_params(sgd_update(mixed_net, gb, 0.0), mixed_net)


def test_sgd_scalar_hand_arithmetic():
    net = Network([Dense(np.array([[1.0]]), np.array([0.0]))], (1,), 1)
    new = sgd_update(net, [[np.array([[2.0]]), np.array([0.0])]], 0.1)
    assert new.parameters()[0][0, 0] == pytest.approx(0.8)


def test_sgd_two_steps_equal_one_summed_step():
    net = Network([Dense(np.array([[1.5]]), np.array([0.0]))], (1,), 1)
    g1 = [[np.array([[0.3]]), np.array([0.0])]]
    g2 = [[np.array([[-1.1]]), np.array([0.0])]]
    two = sgd_update(sgd_update(net, g1, 0.1), g2, 0.1)
    one = sgd_update(net, [[np.array([[0.3 - 1.1]]), np.array([0.0])]], 0.1)
    assert two.parameters()[0][0, 0] == pytest.approx(one.parameters()[0][0, 0], abs=1e-15)


def test_sgd_shape_mismatch(mixed_net):
    bad = [[np.zeros((1, 1)), np.zeros(1)] if layer.params else None for layer in mixed_net.layers]
    with pytest.raises(ValueError):
        sgd_update(mixed_net, bad, 0.1)


def test_natural_zero_lr_unchanged(mixed_net):
    net, log = train_natural(mixed_net, image_data(), cfg(lr=0.0, steps=1))
    assert same_params(net, mixed_net) and len(log.steps) == 1


def test_natural_two_gaussians_reaches_99():
    d = synthetic_two_gaussians(make_rng(0), 500, dim=2, separation=10.0)
    net = Network([Dense(np.zeros((2, 2)), np.zeros(2))], (2,), 2)
    net, log = train_natural(net, d, TrainConfig(lr=2.0, batch_size=50, steps=500, seed=0))
    assert len(log.steps) == 500
    assert accuracy(net, d.images, d.labels) >= 0.99


def test_at_zero_budget_equals_natural(mixed_net):
    d = image_data()
    zero = AttackConfig(0.0, 0.03, 3, random_start=True)
    a, _ = train_adversarial(mixed_net, d, cfg(technique="at", attack=zero))
    b, _ = train_natural(mixed_net, d, cfg(attack=zero))
    assert same_params(a, b)


def test_lat_omega_one_equals_at(mixed_net):
    d = image_data()
    a, _ = train_adversarial(mixed_net, d, cfg(technique="at"))
    b, log = finetune_lat(mixed_net, d, cfg(technique="lat", layer=3, omega=1.0))
    assert same_params(a, b)
    assert all(r["loss"] == r["j_adv"] for r in log.steps)


def test_fnt_zero_noise_reductions(mixed_net):
    d = image_data()
    at, _ = train_adversarial(mixed_net, d, cfg(technique="at"))
    fnt1, _ = finetune_fnt(mixed_net, d, cfg(technique="fnt", layer=3, omega=1.0, noise_scale=0.0))
    assert same_params(at, fnt1)
    # with omega < 1, zero noise is LAT with a zero latent budget
    fnt, _ = finetune_fnt(mixed_net, d, cfg(technique="fnt", layer=3, omega=0.2, noise_scale=0.0))
    lat, _ = finetune_lat(mixed_net, d, cfg(technique="lat", layer=3, omega=0.2, eps_scale=0.0))
    assert same_params(fnt, lat)


def test_combined_loss_identity(mixed_net):
    _, log = finetune_lat(mixed_net, image_data(), cfg(technique="lat", layer=4, omega=0.3))
    for r in log.steps:
        assert abs(r["loss"] - (0.3 * r["j_adv"] + 0.7 * r["j_latent"])) <= 1e-12


def test_lat_update_is_gradient_of_combined_loss():
    rng = make_rng(8)
    net = small_mixed_net(rng)
    d = image_data(8, seed=2)
    m, w, lr = 3, 0.4, 1e-3
    c = cfg(technique="lat", layer=m, omega=w, lr=lr, steps=1, batch_size=8)
    new, log = finetune_lat(net, d, c)
    # replay the step's random draws to freeze the batch and both perturbations
    shuffle_rng, attack_rng, latent_rng, _ = _streams(c.seed)
    xb, yb = next(batches(d, 8, shuffle_rng))
    x_adv = pgd(net, xb, yb, c.attack, attack_rng)
    h = net.latent(xb, m)
    eps = batch_latent_epsilon(net, xb, x_adv, m)
    delta = pgd_latent(net, xb, yb, c.latent_attack.with_budget(eps).at_layer(m), latent_rng, latent=h) - h
    assert log.steps[0]["latent_eps"] == eps

    params = net.parameters()

    def combined():
        n = net.with_parameters(params)
        j_adv = loss_cross_entropy(n.logits(x_adv), yb)
        j_lat = loss_cross_entropy(n.forward(n.latent(xb, m) + delta, start=m).logits, yb)
        return w * j_adv + (1 - w) * j_lat

    assert abs(combined() - log.steps[0]["loss"]) <= 1e-12
    step = [(p - q) / lr for p, q in zip(params, new.parameters())]
    h_fd = 1e-6
    checked = 0
    for p, g in zip(params, step):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h_fd
            up = combined()
            p[idx] = old - h_fd
            down = combined()
            p[idx] = old
            fd = (up - down) / (2 * h_fd)
            assert abs(fd - g[idx]) <= max(1e-5 * abs(fd), 1e-6)
            checked += 1
    assert checked > 20


def test_latent_loss_grads_flow_through_h(mixed_net, rng):
    x = rng.uniform(size=(3,) + mixed_net.input_shape)
    y = np.array([0, 1, 2])
    delta = rng.standard_normal((3,) + mixed_net.shapes[4]) * 0.1
    loss, grads = _latent_loss_grads(mixed_net, x, y, 4, delta)
    assert abs(grads[0]).sum() > 0  # first conv receives gradient through h_4
    params = mixed_net.parameters()

    def f():
        n = mixed_net.with_parameters(params)
        return loss_cross_entropy(n.forward(n.latent(x, 4) + delta, start=4).logits, y)

    assert abs(f() - loss) < 1e-12
    p = params[0]
    old = p[0, 0, 0, 0]
    p[0, 0, 0, 0] = old + 1e-6
    up = f()
    p[0, 0, 0, 0] = old - 1e-6
    down = f()
    p[0, 0, 0, 0] = old
    assert abs((up - down) / 2e-6 - grads[0][0, 0, 0, 0]) < 1e-6


def test_training_deterministic(mixed_net):
    d = image_data()
    for c in (cfg(technique="lat", layer=2), cfg(technique="fnt", layer=5),
              cfg(technique="lat-random", layer_pool=(1, 3, 6))):
        a, la = train(mixed_net, d, c)
        b, lb = train(mixed_net, d, c)
        assert same_params(a, b)
        assert la.to_jsonl() == lb.to_jsonl()


def test_lat_random_draws_from_pool(mixed_net):
    _, log = finetune_lat(mixed_net, image_data(80), cfg(technique="lat-random", layer_pool=(1, 3, 6), steps=10))
    layers = [r["layer"] for r in log.steps]
    assert set(layers) <= {1, 3, 6} and len(set(layers)) > 1


def test_invalid_layers_rejected():
    net = mnist_cnn(make_rng(0), width=0.125)
    d = Dataset(np.zeros((2, 1, 28, 28)), np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        finetune_lat(net, d, cfg(technique="lat-random", layer_pool=(5, 7, 9, 11)))
    with pytest.raises(ValueError):
        finetune_lat(net, d, cfg(technique="lat", layer=0))
    with pytest.raises(ValueError):
        finetune_fnt(net, d, cfg(technique="fnt", layer=10))


def test_train_config_lists_every_problem():
    with pytest.raises(ValueError) as info:
        TrainConfig(technique="lat", omega=1.5, lr=-1, batch_size=0)
    msg = str(info.value)
    for word in ("omega", "lr", "batch_size", "layer"):
        assert word in msg
    with pytest.raises(ValueError):
        TrainConfig(technique="sgd")


def test_fnt_latent_loss_below_lat(mnist_mlp):
    net, test = mnist_mlp
    x, y = test.images[:200], test.labels[:200]
    x_adv = pgd(net, x, y, AttackConfig(0.1, 0.01, 20))
    m = 2
    h = net.latent(x, m)
    eps = batch_latent_epsilon(net, x, x_adv, m)
    adv = pgd_latent(net, x, y, AttackConfig(eps, eps / 4, 10, layer=m, random_start=True), make_rng(0), latent=h)
    noise = make_rng(0).standard_normal(h.shape) * eps
    j_lat = cross_entropy_per_sample(net.forward(adv, start=m).logits, y).mean()
    j_fnt = cross_entropy_per_sample(net.forward(h + noise, start=m).logits, y).mean()
    assert j_fnt <= j_lat


def test_epoch_records(mixed_net):
    d = image_data(24)
    _, log = train_natural(mixed_net, d, cfg(steps=None, epochs=2, batch_size=8),
                           eval_fn=lambda n: {"clean": accuracy(n, d.images, d.labels)})
    assert [e["steps"] for e in log.epochs] == [3, 3]
    assert all("clean" in e for e in log.epochs)


@pytest.mark.slow
def test_natural_mnist_cnn_one_epoch(mnist_dir):
    from latentadv.data import load_mnist_dir

    train_set = load_mnist_dir(mnist_dir, "train").astype(np.float32)
    test_set = load_mnist_dir(mnist_dir, "test").astype(np.float32)
    net = mnist_cnn(make_rng(0)).astype(np.float32)
    net, _ = train_natural(net, train_set, TrainConfig(lr=0.05, batch_size=50, epochs=1, seed=0))
    assert accuracy(net, test_set.images, test_set.labels) >= 0.96


def test_budget_ramp_phases(mixed_net):
    d = image_data()
    net, log = budget_ramp(mixed_net, d, cfg(technique="at"), [0.05, 0.1], 3, attack_steps=2)
    assert [r["ramp_eps"] for r in log.steps] == [0.05] * 3 + [0.1] * 3
    again, _ = budget_ramp(mixed_net, d, cfg(technique="at"), [0.05, 0.1], 3, attack_steps=2)
    assert same_params(net, again) and not same_params(net, mixed_net)
    # each phase is plain AT at its own budget
    first, _ = train_adversarial(mixed_net, d, cfg(technique="at", steps=3, seed=5,
                                                   attack=AttackConfig(0.05, 0.0625, 2, random_start=True)))
    one, _ = budget_ramp(mixed_net, d, cfg(technique="at"), [0.05], 3, attack_steps=2)
    assert same_params(first, one)
    with pytest.raises(ValueError):
        budget_ramp(mixed_net, d, cfg(technique="at"), [0.0], 3)


def test_mlp_builder():
    net = mlp(make_rng(0), [3, 4, 2])
    assert [type(layer).__name__ for layer in net.layers] == ["Dense", "ReLU", "Dense"]
