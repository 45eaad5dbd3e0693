"""Generator, attacker-side detectors and the adversarial training loop.

Three variants share one generator shape:

* ``Mal-D2GAN`` - substitute detector D1 (fit to black-box labels) plus an
  additional detector D2 (ground-truth benign vs generated), least-squares
  losses, generator scored by ``alpha * D1 + (1 - alpha) * D2``;
* ``Mal-LSGAN`` - D1 only, least-squares losses, LeakyReLU hidden layer;
* ``MalGAN`` - D1 only, cross-entropy losses, sigmoid hidden layer.

The generator outputs ``o`` in (0, 1)^M. Training routes gradients through
the smoothed vector ``max(m, o)``; anything shown to the black box is the
hard vector ``m | (o > 0.5)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container, numnet
from .dataset import LabeledDataset, as_binary_matrix
from .numnet import BCE, INFER, LEAST_SQUARES, TRAIN, Adam, Network

MALD2GAN = "Mal-D2GAN"
MALLSGAN = "Mal-LSGAN"
MALGAN = "MalGAN"
VARIANTS = (MALD2GAN, MALLSGAN, MALGAN)


@dataclass
class GanConfig:
    M: int = 160
    Z: int = 10
    alpha: float = 0.5
    batch_size: int = 128
    epochs: int = 20
    retrain_epochs: int = 5
    hidden: int = 256
    lr_generator: float = 1e-3
    lr_d1: float = 1e-3
    lr_d2: float = 1e-3
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("M", "Z", "batch_size", "epochs", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.retrain_epochs < 0:
            raise ValueError("retrain_epochs must be non-negative")
        for name in ("lr_generator", "lr_d1", "lr_d2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def replace(self, **changes) -> "GanConfig":
        return GanConfig(**{**asdict(self), **changes})


# ---------------------------------------------------------------- networks

def build_generator(M: int, Z: int, hidden: int, rng, slope: float = 0.2) -> Network:
    """(M + Z) -> 3 x [Dense, LeakyReLU, BatchNorm] -> Dense(M) -> Sigmoid."""
    return numnet.dense_stack([M + Z, hidden, hidden, hidden, M],
                              lambda: numnet.LeakyReLU(slope), numnet.Sigmoid, rng,
                              batchnorm=True)


def build_detector(M: int, hidden: int, rng, hidden_activation=numnet.Sigmoid) -> Network:
    return numnet.dense_stack([M, hidden, 1], hidden_activation, numnet.Sigmoid, rng)


class Gan:
    def __init__(self, variant: str, config: GanConfig, generator: Network, d1: Network,
                 d2: Network | None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if (d2 is not None) != (variant == MALD2GAN):
            raise ValueError("only Mal-D2GAN carries an additional detector")
        self.variant = variant
        self.config = config
        self.generator = generator
        self.d1 = d1
        self.d2 = d2
        self.opt_g = Adam(config.lr_generator)
        self.opt_d1 = Adam(config.lr_d1)
        self.opt_d2 = Adam(config.lr_d2) if d2 is not None else None
        # training stream is independent of the init stream
        self.rng = np.random.default_rng([config.seed, 1])

    @property
    def loss_kind(self) -> str:
        return BCE if self.variant == MALGAN else LEAST_SQUARES

    @property
    def alpha(self) -> float:
        return self.config.alpha if self.d2 is not None else 1.0

    def networks(self) -> dict[str, Network]:
        nets = {"generator": self.generator, "d1": self.d1}
        if self.d2 is not None:
            nets["d2"] = self.d2
        return nets


def build_variant(variant: str, config: GanConfig | None = None) -> Gan:
    config = config or GanConfig()
    rng = np.random.default_rng([config.seed, 0])
    gen = build_generator(config.M, config.Z, config.hidden, rng, config.leaky_slope)
    if variant == MALLSGAN:
        d1 = build_detector(config.M, config.hidden, rng,
                            lambda: numnet.LeakyReLU(config.leaky_slope))
    else:
        d1 = build_detector(config.M, config.hidden, rng)
    d2 = build_detector(config.M, config.hidden, rng) if variant == MALD2GAN else None
    return Gan(variant, config, gen, d1, d2)


# ---------------------------------------------------------------- primitives

def sample_noise(batch: int, Z: int, rng: np.random.Generator) -> np.ndarray:
    if batch <= 0 or Z <= 0:
        raise ValueError("batch and Z must be positive")
    return rng.random((batch, Z))


def _check_malware(m, M):
    m = as_binary_matrix(m, "malware batch")
    if m.shape[1] != M:
        raise numnet.ShapeError(f"malware batch has {m.shape[1]} features, generator expects {M}")
    return m


def generator_pass(generator: Network, m, z, mode: str = TRAIN):
    """Returns ``(smoothed, o, cache)`` with ``smoothed = max(m, o)``."""
    M = generator.out_width
    m = _check_malware(m, M)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) != len(m) or z.shape[1] != generator.in_width - M:
        raise numnet.ShapeError(f"noise has shape {z.shape}, expected ({len(m)}, "
                                f"{generator.in_width - M})")
    o, cache = numnet.network_forward(generator, np.hstack([m, z]), mode)
    return np.maximum(m, o), o, cache


def generator_forward(generator: Network, m, z, mode: str = TRAIN) -> np.ndarray:
    return generator_pass(generator, m, z, mode)[0]


def smoothing_backward(m, o, d_smoothed):
    """d(max(m, o))/do: the upstream gradient where ``o > m``, zero elsewhere."""
    return np.where(o > m, d_smoothed, 0.0)


def make_adversarial(m, o) -> np.ndarray:
    """Binary feature addition: ``m | (o > 0.5)``."""
    m = np.asarray(m)
    m = as_binary_matrix(np.atleast_2d(m), "malware").reshape(m.shape)
    return (m | (np.asarray(o) > 0.5)).astype(np.uint8)


# ---------------------------------------------------------------- losses

def _two_term_loss(kind, net, negatives, positives):
    """``0.5 E_neg[l(D(x), 0)] + 0.5 E_pos[l(D(x), 1)]`` with ``l`` the squared or
    log loss; least squares already carries the 0.5. An empty set contributes 0."""
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, net.in_width)
    positives = np.asarray(positives, dtype=np.float64).reshape(-1, net.in_width)
    n_neg, n_pos = len(negatives), len(positives)
    X = np.vstack([negatives, positives])
    if len(X) == 0:
        return 0.0, {k: np.zeros_like(v) for k, v in net.params().items()}
    pred, cache = numnet.network_forward(net, X, TRAIN)
    target = np.concatenate([np.zeros(n_neg), np.ones(n_pos)])[:, None]
    scale = 1.0 if kind == LEAST_SQUARES else 0.5
    value = 0.0
    d = np.zeros_like(pred)
    for rows in (slice(0, n_neg), slice(n_neg, n_neg + n_pos)):
        if rows.stop > rows.start:
            v, g = numnet.loss(kind, pred[rows], target[rows])
            value += scale * v
            d[rows] = scale * g
    grads, _ = numnet.network_backward(net, cache, d)
    return value, grads


def d1_loss(d1: Network, bb_benign, bb_malware, kind: str = LEAST_SQUARES):
    """Substitute detector loss on black-box labelled benign / malware sets."""
    return _two_term_loss(kind, d1, bb_benign, bb_malware)


def d2_loss(d2: Network, s_benign, g_adversarial, kind: str = LEAST_SQUARES):
    """Additional detector loss: ground-truth benign vs generator output."""
    return _two_term_loss(kind, d2, s_benign, g_adversarial)


def combined_d_loss(l_d1: float, l_d2: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * l_d1 + (1.0 - alpha) * l_d2


def combined_detector_output(d1: Network, d2: Network | None, x, alpha: float) -> np.ndarray:
    """``alpha * D1(x) + (1 - alpha) * D2(x)``; just ``D1(x)`` without D2."""
    x = np.asarray(x, dtype=np.float64)
    p1 = d1(x, INFER)[:, 0]
    if d2 is None:
        return p1
    return alpha * p1 + (1.0 - alpha) * d2(x, INFER)[:, 0]


def _generator_loss_grads(gan: Gan, m, o, smoothed, gen_cache):
    """L_G and generator parameter gradients for an existing generator pass."""
    n = len(smoothed)
    p1, c1 = numnet.network_forward(gan.d1, smoothed, INFER)
    if gan.d2 is not None:
        p2, c2 = numnet.network_forward(gan.d2, smoothed, INFER)
        D = gan.alpha * p1 + (1.0 - gan.alpha) * p2
    else:
        D = p1
    if gan.loss_kind == LEAST_SQUARES:
        value = float(0.5 * np.sum(D * D) / n)
        dD = D / n
    else:
        # generator wants the detector to say benign (target 0)
        value, dD = numnet.loss(BCE, D, np.zeros_like(D))
    _, dx = numnet.network_backward(gan.d1, c1, gan.alpha * dD)
    if gan.d2 is not None:
        _, dx2 = numnet.network_backward(gan.d2, c2, (1.0 - gan.alpha) * dD)
        dx = dx + dx2
    d_o = smoothing_backward(m, o, dx)
    grads, _ = numnet.network_backward(gan.generator, gen_cache, d_o)
    return value, grads


def g_loss(gan: Gan, m, z):
    """Generator loss ``0.5 E[D(G(m, z))^2]`` (cross-entropy for MalGAN)."""
    smoothed, o, cache = generator_pass(gan.generator, m, z, TRAIN)
    return _generator_loss_grads(gan, np.asarray(m, dtype=np.float64), o, smoothed, cache)


# ---------------------------------------------------------------- training

@dataclass
class StepStats:
    L_G: float
    L_D1: float
    L_D2: float
    L_D: float


@dataclass
class EpochStats:
    epoch: int
    L_G: float
    L_D1: float
    L_D2: float
    L_D: float
    adv_tpr: float


@dataclass
class TrainStats:
    initial_adv_tpr: float | None = None
    epochs: list[EpochStats] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "L_G", "L_D1", "L_D2", "L_D", "adv_tpr")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_FIELDS)
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(float(getattr(e, k))) for k in self.CSV_FIELDS[1:]])

    @classmethod
    def from_csv(cls, path) -> "TrainStats":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(None, [EpochStats(int(r["epoch"]), *(float(r[k]) for k in cls.CSV_FIELDS[1:]))
                          for r in rows])


@dataclass
class TrainingData:
    """Ground-truth malware and benign pools the attacker samples from."""

    malware: np.ndarray
    benign: np.ndarray

    @classmethod
    def from_dataset(cls, data: LabeledDataset) -> "TrainingData":
        return cls(data.malware, data.benign)


def train_step(gan: Gan, blackbox, source: TrainingData, rng=None) -> StepStats:
    """One pass: detectors first (D1, then D2), then the generator."""
    rng = gan.rng if rng is None else rng
    cfg = gan.config
    bs_m = min(cfg.batch_size, len(source.malware))
    bs_b = min(cfg.batch_size, len(source.benign))
    m = source.malware[rng.choice(len(source.malware), bs_m, replace=False)]
    z = sample_noise(bs_m, cfg.Z, rng)
    smoothed, o, gen_cache = generator_pass(gan.generator, m, z, TRAIN)
    m_adv = make_adversarial(m, o)
    b = source.benign[rng.choice(len(source.benign), bs_b, replace=False)]

    pool = np.vstack([m_adv, b])
    labels = blackbox.predict(pool)
    l_d1, g1 = d1_loss(gan.d1, pool[labels == 0], pool[labels == 1], gan.loss_kind)
    gan.opt_d1.step(gan.d1.params(), g1)

    l_d2 = 0.0
    if gan.d2 is not None:
        l_d2, g2 = d2_loss(gan.d2, b, m_adv, gan.loss_kind)
        gan.opt_d2.step(gan.d2.params(), g2)

    l_g, gg = _generator_loss_grads(gan, m.astype(np.float64), o, smoothed, gen_cache)
    gan.opt_g.step(gan.generator.params(), gg)
    l_d = combined_d_loss(l_d1, l_d2, gan.alpha)
    return StepStats(l_g, l_d1, l_d2, l_d)


def generate_adversarial_dataset(gan: Gan, malware_X, rng=None, chunk: int = 2048) -> np.ndarray:
    """One hard adversarial vector per malware row (inference-mode BatchNorm)."""
    rng = gan.rng if rng is None else rng
    malware_X = _check_malware(malware_X, gan.config.M)
    out = np.empty_like(malware_X)
    for start in range(0, len(malware_X), chunk):
        m = malware_X[start:start + chunk]
        z = sample_noise(len(m), gan.config.Z, rng)
        _, o, _ = generator_pass(gan.generator, m, z, INFER)
        out[start:start + chunk] = make_adversarial(m, o)
    return out


def adversarial_tpr(gan: Gan, blackbox, malware_X, rng=None) -> float:
    adv = generate_adversarial_dataset(gan, malware_X, rng)
    return float(blackbox.predict(adv).mean())


def train(gan: Gan, blackbox, data, epochs: int | None = None, probe=None,
          log=None) -> TrainStats:
    """Fixed-budget training: ``epochs`` x ceil(n_malware / batch_size) steps.

    ``probe`` is a held-out malware matrix used for the per-epoch adversarial
    TPR; by default up to 1000 training malware rows.
    """
    source = data if isinstance(data, TrainingData) else TrainingData.from_dataset(data)
    epochs = gan.config.epochs if epochs is None else epochs
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if probe is None:
        probe = source.malware[:1000]
    # probing draws from its own stream so it never shifts the training samples
    probe_rng = np.random.default_rng([gan.config.seed, 2, gan.opt_g.step_count])
    stats = TrainStats(adversarial_tpr(gan, blackbox, probe, probe_rng))
    steps = max(1, math.ceil(len(source.malware) / gan.config.batch_size))
    for epoch in range(1, epochs + 1):
        acc = np.zeros(4)
        for _ in range(steps):
            s = train_step(gan, blackbox, source)
            acc += (s.L_G, s.L_D1, s.L_D2, s.L_D)
        acc /= steps
        tpr = adversarial_tpr(gan, blackbox, probe, probe_rng)
        stats.epochs.append(EpochStats(epoch, *map(float, acc), tpr))
        if log is not None:
            log(stats.epochs[-1])
    return stats


# ---------------------------------------------------------------- checkpoints

def _adam_blocks(opt: Adam, prefix: str):
    blocks = {}
    for k in opt.first_moment:
        blocks[f"{prefix}m.{k}"] = opt.first_moment[k]
        blocks[f"{prefix}v.{k}"] = opt.second_moment[k]
    return blocks


def _restore_adam(opt: Adam, blocks, prefix: str, step_count: int):
    opt.step_count = step_count
    for key, arr in blocks.items():
        if key.startswith(prefix + "m."):
            opt.first_moment[key[len(prefix) + 2:]] = arr.copy()
        elif key.startswith(prefix + "v."):
            opt.second_moment[key[len(prefix) + 2:]] = arr.copy()


def save_gan(gan: Gan, path) -> None:
    meta = {"variant": gan.variant, "config": asdict(gan.config), "layers": {}, "adam_steps": {}}
    blocks = {}
    opts = {"generator": gan.opt_g, "d1": gan.opt_d1, "d2": gan.opt_d2}
    for name, net in gan.networks().items():
        layers, b = numnet.network_blocks(net, f"{name}.")
        meta["layers"][name] = layers
        blocks.update(b)
        blocks.update(_adam_blocks(opts[name], f"adam.{name}."))
        meta["adam_steps"][name] = opts[name].step_count
    container.write(path, "gan", meta, blocks)


def load_gan(path) -> Gan:
    _, meta, blocks = container.read(path, expected_kind="gan")
    try:
        cfg_fields = {f.name for f in fields(GanConfig)}
        config = GanConfig(**{k: v for k, v in meta["config"].items() if k in cfg_fields})
        nets = {name: numnet.network_from_blocks(layers, blocks, f"{name}.")
                for name, layers in meta["layers"].items()}
        gan = Gan(meta["variant"], config, nets["generator"], nets["d1"], nets.get("d2"))
    except (KeyError, TypeError, ValueError) as exc:
        raise container.ContainerError(f"GAN checkpoint is incomplete: {exc}") from exc
    opts = {"generator": gan.opt_g, "d1": gan.opt_d1, "d2": gan.opt_d2}
    for name, steps in meta["adam_steps"].items():
        _restore_adam(opts[name], blocks, f"adam.{name}.", steps)
    return gan


# ---------------------------------------------------------------- verification

def gan_gradcheck(seed: int = 0, M: int = 8, Z: int = 4, hidden: int = 16, batch: int = 6,
                  h: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients for the
    three losses at toy size. Keys: ``L_D1``, ``L_D2``, ``L_G`` per variant."""
    rng = np.random.default_rng(seed)
    out = {}
    for variant in VARIANTS:
        gan = build_variant(variant, GanConfig(M=M, Z=Z, hidden=hidden, batch_size=batch,
                                               seed=seed))
        m = (rng.random((batch, M)) < 0.4).astype(np.uint8)
        z = sample_noise(batch, Z, rng)
        neg = (rng.random((batch // 2, M)) < 0.5).astype(float)
        pos = (rng.random((batch - batch // 2, M)) < 0.5).astype(float)
        kind = gan.loss_kind
        out[f"{variant}/L_D1"] = _fd_error(gan.d1, lambda: d1_loss(gan.d1, neg, pos, kind), h)
        if gan.d2 is not None:
            out[f"{variant}/L_D2"] = _fd_error(gan.d2, lambda: d2_loss(gan.d2, neg, pos, kind), h)
        # generator gradients use batch statistics, so the loss is a pure
        # function of the parameters only if running stats are restored
        out[f"{variant}/L_G"] = _fd_error(gan.generator, lambda: g_loss(gan, m, z), h,
                                          lambda: _g_loss_value(gan, m, z))
    return out


def _g_loss_value(gan: Gan, m, z) -> float:
    """``g_loss`` without the backward pass, for finite differences."""
    smoothed, _, _ = generator_pass(gan.generator, m, z, TRAIN)
    D = combined_detector_output(gan.d1, gan.d2, smoothed, gan.alpha)[:, None]
    if gan.loss_kind == LEAST_SQUARES:
        return float(0.5 * np.sum(D * D) / len(D))
    return numnet.loss(BCE, D, np.zeros_like(D))[0]


def _fd_error(net: Network, fn, h, value=None):
    value = value or (lambda: fn()[0])
    saved = net.state()
    try:
        _, analytic = fn()
        worst = 0.0
        for name, p in net.params().items():
            flat = p.reshape(-1)
            num = np.empty_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = value()
                flat[j] = orig - h
                down = value()
                flat[j] = orig
                num[j] = (up - down) / (2 * h)
            worst = max(worst, float(numnet.relative_error(analytic[name].reshape(-1), num).max()))
    finally:
        net.load_state(saved)
    return worst
