import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mald2gan import container, data, detectors, gan, numnet
from mald2gan.dataset import DatasetError
from mald2gan.gan import MALD2GAN, MALGAN, MALLSGAN, GanConfig

TOY = GanConfig(M=4, Z=2, hidden=8, batch_size=2, epochs=1)


def constant_detector(M, value):
    """Dense stack whose output is sigmoid(logit(value)) for every input."""
    net = gan.build_detector(M, 3, np.random.default_rng(0))
    params = net.params()
    params["2.weights"][...] = 0.0
    params["2.bias"][...] = np.log(value / (1 - value)) if 0 < value < 1 else -1e4
    return net


class FeatureZero:
    """Toy black box: malware iff feature 0 is set."""

    def predict(self, X):
        return (np.asarray(X)[:, 0] == 1).astype(np.uint8)


class Recorder:
    """Plain gradient descent that logs which network it updated."""

    def __init__(self, name, log, lr=0.0):
        self.name, self.log, self.lr = name, log, lr
        self.step_count = 0

    def step(self, params, grads):
        self.log.append((self.name, {k: g.copy() for k, g in grads.items()}))
        for k, p in params.items():
            p -= self.lr * grads[k]
        self.step_count += 1


def fd_grad(net, fn, h=1e-6):
    out = {}
    for name, p in net.params().items():
        flat = p.reshape(-1)
        g = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn()
            flat[j] = orig - h
            down = fn()
            flat[j] = orig
            g[j] = (up - down) / (2 * h)
        out[name] = g.reshape(p.shape)
    return out


def assert_grads_close(analytic, numeric, tol=1e-4):
    for k in numeric:
        err = numnet.relative_error(analytic[k].reshape(-1), numeric[k].reshape(-1))
        assert err.max() < tol, k


# ---------------------------------------------------------------- config / variants

def test_config_defaults_and_validation():
    c = GanConfig()
    assert (c.M, c.Z, c.alpha, c.epochs, c.retrain_epochs, c.batch_size) == (160, 10, 0.5, 20, 5, 128)
    for bad in ({"alpha": 1.5}, {"alpha": -0.1}, {"M": 0}, {"batch_size": 0}, {"epochs": 0}):
        with pytest.raises(ValueError):
            GanConfig(**bad)


def test_build_variant_shapes():
    d2 = gan.build_variant(MALD2GAN)
    assert d2.d2 is not None and d2.loss_kind == numnet.LEAST_SQUARES
    assert d2.generator.in_width == 170 and d2.generator.out_width == 160
    widths = [l.n_out for l in d2.generator.layers if isinstance(l, numnet.Dense)]
    assert widths == [256, 256, 256, 160]
    assert sum(isinstance(l, numnet.BatchNorm) for l in d2.generator.layers) == 3
    for v in (MALLSGAN, MALGAN):
        assert gan.build_variant(v).d2 is None
    assert gan.build_variant(MALGAN).loss_kind == numnet.BCE
    assert isinstance(gan.build_variant(MALLSGAN).d1.layers[1], numnet.LeakyReLU)
    assert isinstance(gan.build_variant(MALGAN).d1.layers[1], numnet.Sigmoid)
    with pytest.raises(ValueError, match="unknown variant"):
        gan.build_variant("WGAN")


def test_malgan_perfect_detector_loss_is_zero():
    x = np.eye(4)
    zero, one = constant_detector(4, 0.0), constant_detector(4, 1 - 1e-16)
    # cross-entropy clamps predictions to [1e-7, 1 - 1e-7], so "zero" means
    # the clamp floor 0.5 * -log(1 - 1e-7) per term
    floor = -0.5 * np.log1p(-numnet.BCE_CLAMP)
    assert gan.d1_loss(zero, x, np.zeros((0, 4)), numnet.BCE)[0] <= floor + 1e-15
    assert gan.d1_loss(one, np.zeros((0, 4)), x, numnet.BCE)[0] <= floor + 1e-15
    assert floor < 1e-7


# ---------------------------------------------------------------- noise

def test_noise_range_mean_and_determinism():
    z = gan.sample_noise(10_000, 10, np.random.default_rng(0))
    assert z.shape == (10_000, 10)
    assert z.min() >= 0.0 and z.max() < 1.0
    assert abs(z.mean() - 0.5) < 0.01
    again = gan.sample_noise(10_000, 10, np.random.default_rng(0))
    assert np.array_equal(z, again)
    with pytest.raises(ValueError):
        gan.sample_noise(0, 3, np.random.default_rng(0))


# ---------------------------------------------------------------- generator / smoothing

def test_all_ones_malware_is_fixed_point():
    g = gan.build_variant(MALD2GAN, TOY)
    m = np.ones((3, 4))
    z = gan.sample_noise(3, 2, np.random.default_rng(1))
    assert np.array_equal(gan.generator_forward(g.generator, m, z), m)


def test_smoothing_example():
    m, o = np.array([[1.0, 0.0]]), np.array([[0.3, 0.7]])
    assert np.array_equal(np.maximum(m, o), [[1.0, 0.7]])
    assert np.array_equal(gan.smoothing_backward(m, o, np.ones((1, 2))), [[0.0, 1.0]])


def test_smoothing_routes_gradient_by_finite_differences():
    rng = np.random.default_rng(2)
    m = (rng.random((5, 6)) < 0.5).astype(float)
    o = rng.random((5, 6))
    w = rng.normal(size=(5, 6))
    f = lambda oo: np.sum(w * np.maximum(m, oo))
    num = np.empty_like(o)
    h = 1e-7
    for idx in np.ndindex(o.shape):
        up, down = o.copy(), o.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = (f(up) - f(down)) / (2 * h)
    assert np.allclose(gan.smoothing_backward(m, o, w), num, atol=1e-6)


def test_generator_rejects_bad_input():
    g = gan.build_variant(MALD2GAN, TOY)
    z = np.zeros((1, 2))
    with pytest.raises(DatasetError, match="non-binary"):
        gan.generator_forward(g.generator, np.array([[0.5, 0, 0, 0]]), z)
    with pytest.raises(numnet.ShapeError):
        gan.generator_forward(g.generator, np.zeros((1, 5)), z)
    with pytest.raises(numnet.ShapeError):
        gan.generator_forward(g.generator, np.zeros((1, 4)), np.zeros((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_smoothed_output_dominates_input(seed):
    rng = np.random.default_rng(seed)
    g = gan.build_variant(MALD2GAN, TOY.replace(seed=seed % 1000))
    m = (rng.random((6, 4)) < 0.5).astype(np.uint8)
    s = gan.generator_forward(g.generator, m, gan.sample_noise(6, 2, rng))
    assert np.all(s >= m) and np.all((s >= 0) & (s <= 1))


# ---------------------------------------------------------------- make_adversarial

def test_make_adversarial_example():
    out = gan.make_adversarial(np.array([1, 0, 0]), np.array([0.2, 0.9, 0.5]))
    assert out.tolist() == [1, 1, 0]
    m = np.array([[0, 1, 1, 0]])
    assert np.array_equal(gan.make_adversarial(m, np.zeros((1, 4))), m)


def test_make_adversarial_property_sweep():
    rng = np.random.default_rng(3)
    m = (rng.random((10_000, 16)) < 0.3).astype(np.uint8)
    o = rng.random((10_000, 16))
    out = gan.make_adversarial(m, o)
    assert out.dtype == np.uint8 and set(np.unique(out)) <= {0, 1}
    assert np.array_equal(out & m, m)
    assert np.array_equal(out, m | (o > 0.5))


# ---------------------------------------------------------------- losses

def test_detector_loss_unit_values():
    half = constant_detector(4, 0.5)
    x = np.zeros((1, 4))
    assert abs(gan.d1_loss(half, x, x)[0] - 0.25) < 1e-12
    assert abs(gan.d2_loss(half, x, x)[0] - 0.25) < 1e-12
    zero, one = constant_detector(4, 0.0), constant_detector(4, 1 - 1e-16)
    assert gan.d1_loss(zero, x, np.zeros((0, 4)))[0] < 1e-24
    assert gan.d2_loss(one, np.zeros((0, 4)), x)[0] < 1e-24


def test_combined_values():
    assert abs(gan.combined_d_loss(0.2, 0.4, 0.5) - 0.3) < 1e-12
    assert gan.combined_d_loss(0.2, 0.4, 1.0) == 0.2
    assert gan.combined_d_loss(0.2, 0.4, 0.0) == 0.4
    with pytest.raises(ValueError):
        gan.combined_d_loss(0.2, 0.4, 1.1)
    x = np.zeros((2, 4))
    out = gan.combined_detector_output(constant_detector(4, 0.2), constant_detector(4, 0.6), x, 0.5)
    assert np.allclose(out, 0.4, atol=1e-12)
    same = gan.combined_detector_output(constant_detector(4, 0.3), constant_detector(4, 0.3), x, 0.9)
    assert np.allclose(same, 0.3, atol=1e-12)


def test_generator_loss_unit_values():
    g = gan.build_variant(MALD2GAN, TOY)
    g.d1, g.d2 = constant_detector(4, 0.5), constant_detector(4, 0.5)
    m = np.array([[1, 0, 0, 1], [0, 0, 1, 0]])
    z = gan.sample_noise(2, 2, np.random.default_rng(0))
    assert abs(gan.g_loss(g, m, z)[0] - 0.125) < 1e-12
    g.d1, g.d2 = constant_detector(4, 0.0), constant_detector(4, 0.0)
    assert gan.g_loss(g, m, z)[0] < 1e-24


@pytest.mark.parametrize("variant", gan.VARIANTS)
def test_loss_gradients_match_finite_differences(variant):
    cfg = GanConfig(M=8, Z=4, hidden=16, seed=3)
    g = gan.build_variant(variant, cfg)
    rng = np.random.default_rng(4)
    neg = (rng.random((3, 8)) < 0.5).astype(float)
    pos = (rng.random((4, 8)) < 0.5).astype(float)
    kind = g.loss_kind
    assert_grads_close(gan.d1_loss(g.d1, neg, pos, kind)[1],
                       fd_grad(g.d1, lambda: gan.d1_loss(g.d1, neg, pos, kind)[0]))
    if g.d2 is not None:
        assert_grads_close(gan.d2_loss(g.d2, neg, pos, kind)[1],
                           fd_grad(g.d2, lambda: gan.d2_loss(g.d2, neg, pos, kind)[0]))
    m = (rng.random((6, 8)) < 0.4).astype(np.uint8)
    z = gan.sample_noise(6, 4, rng)
    assert_grads_close(gan.g_loss(g, m, z)[1], fd_grad(g.generator, lambda: gan.g_loss(g, m, z)[0]),
                       tol=1e-4)


def test_gradcheck_helper_passes():
    errs = gan.gan_gradcheck(seed=5)
    assert set(errs) == {"Mal-D2GAN/L_D1", "Mal-D2GAN/L_D2", "Mal-D2GAN/L_G", "Mal-LSGAN/L_D1",
                         "Mal-LSGAN/L_G", "MalGAN/L_D1", "MalGAN/L_G"}
    assert max(errs.values()) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    g = gan.build_variant(MALD2GAN, TOY.replace(seed=seed % 97))
    a, b = rng.random((3, 4)) < 0.5, rng.random((2, 4)) < 0.5
    l1, l2 = gan.d1_loss(g.d1, a, b)[0], gan.d2_loss(g.d2, a, b)[0]
    assert l1 >= 0 and l2 >= 0 and gan.combined_d_loss(l1, l2, 0.5) >= 0
    assert gan.g_loss(g, a.astype(np.uint8), rng.random((3, 2)))[0] >= 0


# ---------------------------------------------------------------- train_step

def toy_source():
    return gan.TrainingData(np.array([[1, 0, 1, 0], [1, 1, 0, 0]], dtype=np.uint8),
                            np.array([[0, 0, 1, 1], [0, 1, 0, 1]], dtype=np.uint8))


def test_train_step_sanity():
    g = gan.build_variant(MALD2GAN, TOY)
    s = gan.train_step(g, FeatureZero(), toy_source())
    assert all(np.isfinite(v) for v in (s.L_G, s.L_D1, s.L_D2, s.L_D))
    for net in g.networks().values():
        assert all(np.all(np.isfinite(p)) for p in net.params().values())
    assert g.opt_g.step_count == g.opt_d1.step_count == g.opt_d2.step_count == 1


def test_zero_detectors_leave_generator_unchanged():
    g = gan.build_variant(MALD2GAN, TOY)
    g.d1, g.d2 = constant_detector(4, 0.0), constant_detector(4, 0.0)
    log = []
    g.opt_d1, g.opt_d2 = Recorder("d1", log), Recorder("d2", log)
    before = {k: v.copy() for k, v in g.generator.params().items()}
    gan.train_step(g, FeatureZero(), toy_source())
    for k, v in g.generator.params().items():
        assert np.array_equal(v, before[k]), k


def test_hand_traced_step():
    """M=4, Z=2, batch=2: d1 then d2 then g, each gradient checked against
    finite differences of the loss it should be minimizing at that moment."""
    cfg = TOY.replace(alpha=0.3)
    g = gan.build_variant(MALD2GAN, cfg)
    log = []
    g.opt_d1, g.opt_d2, g.opt_g = (Recorder("d1", log, 0.5), Recorder("d2", log, 0.5),
                                   Recorder("g", log, 0.5))
    gen0 = g.generator.copy()
    src = toy_source()
    rng = np.random.default_rng(7)
    # replay the draws: malware rows, noise, benign rows
    trace = np.random.default_rng(7)
    m = src.malware[trace.choice(2, 2, replace=False)]
    z = trace.random((2, 2))
    b = src.benign[trace.choice(2, 2, replace=False)]
    o = numnet.network_forward(gen0, np.hstack([m, z]).astype(float), numnet.TRAIN)[0]
    hard = (m | (o > 0.5)).astype(float)
    pool = np.vstack([hard, b])
    lab = FeatureZero().predict(pool)

    d1_0, d2_0 = g.d1.copy(), g.d2.copy()
    gan.train_step(g, FeatureZero(), src, rng)
    assert [name for name, _ in log] == ["d1", "d2", "g"]

    def ls(net, neg, pos):
        out = 0.0
        if len(neg):
            out += 0.5 * np.mean(net(neg)[:, 0] ** 2)
        if len(pos):
            out += 0.5 * np.mean((net(pos)[:, 0] - 1) ** 2)
        return out

    assert_grads_close(log[0][1], fd_grad(d1_0, lambda: ls(d1_0, pool[lab == 0], pool[lab == 1])))
    assert_grads_close(log[1][1], fd_grad(d2_0, lambda: ls(d2_0, b.astype(float), hard)))

    # generator is scored by the detectors *after* their updates
    def lg():
        out = numnet.network_forward(gen0, np.hstack([m, z]).astype(float), numnet.TRAIN)[0]
        s = np.maximum(m, out)
        D = 0.3 * g.d1(s)[:, 0] + 0.7 * g.d2(s)[:, 0]
        return 0.5 * np.mean(D ** 2)

    # BatchNorm over a batch of two is badly conditioned; use its 1e-3 tolerance
    assert_grads_close(log[2][1], fd_grad(gen0, lg), tol=1e-3)


def test_zero_epochs_leaves_gan_unchanged():
    g = gan.build_variant(MALD2GAN, TOY)
    before = {n: net.state() for n, net in g.networks().items()}
    stats = gan.train(g, FeatureZero(), toy_source(), epochs=0)
    assert stats.epochs == []
    for n, net in g.networks().items():
        after = net.state()
        assert all(np.array_equal(after[k], before[n][k]) for k in after)


# ---------------------------------------------------------------- training runs

@pytest.fixture(scope="module")
def small_run():
    spec = data.default_synthetic_spec(M=40, n=2000)
    train, test = data.split(data.synth_generate(spec, seed=1), 0.8, seed=2)
    bb = detectors.fit("LR", train, seed=3)
    cfg = GanConfig(M=40, hidden=64, epochs=5, batch_size=64, seed=4)
    g = gan.build_variant(MALD2GAN, cfg)
    d1_init = g.d1.copy()
    stats = gan.train(g, bb, train, probe=test.malware)
    return train, test, bb, g, d1_init, stats


def test_training_reduces_adversarial_tpr(small_run):
    train, test, bb, g, _, stats = small_run
    assert len(stats.epochs) == 5
    assert stats.epochs[-1].adv_tpr < stats.initial_adv_tpr
    orig = detectors.true_positive_rate(bb, test.malware)
    assert gan.adversarial_tpr(g, bb, test.malware, np.random.default_rng(0)) < orig
    for e in stats.epochs:
        assert all(np.isfinite([e.L_G, e.L_D1, e.L_D2, e.L_D]))


def test_substitute_fits_black_box(small_run):
    train, test, bb, g, d1_init, _ = small_run
    adv = gan.generate_adversarial_dataset(g, test.malware, np.random.default_rng(1))
    probe = np.vstack([test.X, adv])
    target = bb.predict(probe)
    agree = lambda net: np.mean((net(probe.astype(float))[:, 0] > 0.5) == target)
    assert agree(g.d1) > agree(d1_init)


def test_adversarial_dataset_is_superset(small_run):
    _, test, _, g, _, _ = small_run
    adv = gan.generate_adversarial_dataset(g, test.malware, np.random.default_rng(2), chunk=100)
    assert adv.shape == test.malware.shape and adv.dtype == np.uint8
    assert np.array_equal(adv & test.malware, test.malware)
    fresh = gan.build_variant(MALD2GAN, g.config.replace(seed=9))
    adv0 = gan.generate_adversarial_dataset(fresh, test.malware, np.random.default_rng(3))
    assert np.array_equal(adv0 & test.malware, test.malware) and adv0.max() <= 1


def test_training_is_deterministic(small_run):
    train, test, bb, _, _, stats = small_run
    cfg = GanConfig(M=40, hidden=64, epochs=5, batch_size=64, seed=4)
    again = gan.train(gan.build_variant(MALD2GAN, cfg), bb, train, probe=test.malware)
    assert again == stats


def test_train_stats_csv_round_trip(small_run, tmp_path):
    stats = small_run[5]
    stats.to_csv(tmp_path / "s.csv")
    back = gan.TrainStats.from_csv(tmp_path / "s.csv")
    assert back.epochs == stats.epochs
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "epoch,L_G,L_D1,L_D2,L_D,adv_tpr"


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("variant", gan.VARIANTS)
def test_checkpoint_round_trip(variant, tmp_path):
    cfg = TOY.replace(M=6, hidden=5, batch_size=3)
    src = gan.TrainingData((np.random.default_rng(0).random((9, 6)) < 0.5).astype(np.uint8),
                           (np.random.default_rng(1).random((9, 6)) < 0.5).astype(np.uint8))
    a = gan.build_variant(variant, cfg)
    gan.train(a, FeatureZero(), src, epochs=2)
    gan.save_gan(a, tmp_path / "g.bin")
    b = gan.load_gan(tmp_path / "g.bin")
    assert b.variant == variant and b.config == a.config
    m = src.malware
    assert np.array_equal(gan.generate_adversarial_dataset(a, m, np.random.default_rng(5)),
                          gan.generate_adversarial_dataset(b, m, np.random.default_rng(5)))
    # optimizer state survives: one more identical step gives identical weights
    sa = gan.train_step(a, FeatureZero(), src, np.random.default_rng(6))
    sb = gan.train_step(b, FeatureZero(), src, np.random.default_rng(6))
    assert sa == sb
    for name, net in a.networks().items():
        other = b.networks()[name].params()
        assert all(np.array_equal(p, other[k]) for k, p in net.params().items())


def test_checkpoint_rejects_other_kinds(tmp_path):
    net = gan.build_detector(4, 3, np.random.default_rng(0))
    numnet.save_network(net, tmp_path / "n.bin")
    with pytest.raises(container.ContainerError, match="expected .gan."):
        gan.load_gan(tmp_path / "n.bin")
