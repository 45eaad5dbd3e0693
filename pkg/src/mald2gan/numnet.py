"""Small feed-forward network kernel with hand-written backpropagation.

Layers work on row-major batches ``(batch, width)`` of float64. Every layer
exposes ``forward(x, train) -> (y, cache)`` and ``backward(cache, dy) ->
(dx, grads)``; :class:`Network` chains them and :func:`network_forward` /
:func:`network_backward` are the functional entry points used elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container

TRAIN = "train"
INFER = "infer"
_MODES = (TRAIN, INFER)

LEAST_SQUARES = "least_squares"
BCE = "bce"
LOSS_KINDS = (LEAST_SQUARES, BCE)

BCE_CLAMP = 1e-7
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    pass


def _check_mode(mode: str) -> bool:
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
    return mode == TRAIN


def _as_batch(x, width: int, where: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{where}: expected a 2-D batch, got shape {x.shape}")
    if x.shape[1] != width:
        raise ShapeError(f"{where}: input has {x.shape[1]} columns but layer expects {width}")
    return x


class Dense:
    """Affine layer ``y = x @ W.T + b`` with ``W`` shaped (out, in)."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in = n_in
        self.n_out = n_out
        limit = np.sqrt(6.0 / (n_in + n_out))
        if rng is None:
            self.weights = np.zeros((n_out, n_in))
        else:
            self.weights = rng.uniform(-limit, limit, size=(n_out, n_in))
        self.bias = np.zeros(n_out)

    @property
    def in_width(self):
        return self.n_in

    @property
    def out_width(self):
        return self.n_out

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, train):
        return x @ self.weights.T + self.bias, x

    def backward(self, cache, dy):
        x = cache
        grads = {"weights": dy.T @ x, "bias": dy.sum(axis=0)}
        return dy @ self.weights, grads

    def config(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class BatchNorm:
    """Per-feature batch normalization.

    Train mode normalizes with the (biased) batch statistics and folds them
    into the running estimates; infer mode uses the running estimates only.
    """

    kind = "batchnorm"

    def __init__(self, width: int, momentum: float = 0.9, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.width = width
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    in_width = property(lambda self: self.width)
    out_width = property(lambda self: self.width)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train):
        if not train:
            inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
            x_hat = (x - self.running_mean) * inv_std
            return self.gamma * x_hat + self.beta, (x_hat, inv_std, False)
        n = x.shape[0]
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - mean) * inv_std
        unbiased = var * n / (n - 1) if n > 1 else var
        # in-place so references held by optimizers/serializers stay valid
        self.running_mean *= self.momentum
        self.running_mean += (1.0 - self.momentum) * mean
        self.running_var *= self.momentum
        self.running_var += (1.0 - self.momentum) * unbiased
        return self.gamma * x_hat + self.beta, (x_hat, inv_std, True)

    def backward(self, cache, dy):
        x_hat, inv_std, batch_stats = cache
        grads = {"gamma": (dy * x_hat).sum(axis=0), "beta": dy.sum(axis=0)}
        dx_hat = dy * self.gamma
        if not batch_stats:
            return dx_hat * inv_std, grads
        n = dy.shape[0]
        dx = (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0)
                              - x_hat * (dx_hat * x_hat).sum(axis=0))
        return dx, grads

    def config(self):
        return {"kind": self.kind, "width": self.width,
                "momentum": self.momentum, "epsilon": self.epsilon}


class _Activation:
    in_width = out_width = None

    def params(self):
        return {}

    def config(self):
        return {"kind": self.kind}


class LeakyReLU(_Activation):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.2):
        if not 0.0 < slope < 1.0:
            raise ValueError("LeakyReLU slope must lie in (0, 1)")
        self.slope = slope

    def forward(self, x, train):
        positive = x > 0
        return np.where(positive, x, self.slope * x), positive

    def backward(self, cache, dy):
        return np.where(cache, dy, self.slope * dy), {}

    def config(self):
        return {"kind": self.kind, "slope": self.slope}


class ReLU(_Activation):
    kind = "relu"

    def forward(self, x, train):
        positive = x > 0
        return np.where(positive, x, 0.0), positive

    def backward(self, cache, dy):
        return np.where(cache, dy, 0.0), {}


class Sigmoid(_Activation):
    kind = "sigmoid"

    def forward(self, x, train):
        y = sigmoid(x)
        return y, y

    def backward(self, cache, dy):
        return dy * cache * (1.0 - cache), {}


def sigmoid(x):
    # split on sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the output strictly inside (0, 1) even when exp saturates
    return np.clip(out, _SIG_LO, _SIG_HI, out=out)


@dataclass
class ForwardCache:
    net_id: int
    mode: str
    layer_caches: list = field(default_factory=list)


class Network:
    """An ordered stack of layers.

    Parameter names are ``"<layer index>.<name>"``, e.g. ``"0.weights"``.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        width = None
        for i, layer in enumerate(self.layers):
            if layer.in_width is None:
                continue
            if width is not None and layer.in_width != width:
                raise ShapeError(f"layer {i} ({layer.kind}) expects width {layer.in_width}, "
                                 f"previous layer produces {width}")
            width = layer.out_width
        if width is None:
            raise ShapeError("network needs at least one layer with a fixed width")
        self.out_width = width
        self.in_width = next(l.in_width for l in self.layers if l.in_width is not None)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                for name, arr in layer.buffers().items():
                    out[f"{i}.{name}"] = arr
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer."""
        return {k: v.copy() for k, v in {**self.params(), **self.buffers()}.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        current = {**self.params(), **self.buffers()}
        for k, arr in current.items():
            arr[...] = state[k]

    def copy(self) -> "Network":
        net = Network([_clone_layer(l) for l in self.layers])
        net.load_state(self.state())
        return net

    def forward(self, X, mode: str = INFER):
        return network_forward(self, X, mode)

    def __call__(self, X, mode: str = INFER) -> np.ndarray:
        return network_forward(self, X, mode)[0]

    def __repr__(self):
        return "Network(" + " -> ".join(_describe(l) for l in self.layers) + ")"


def _describe(layer):
    if isinstance(layer, Dense):
        return f"Dense({layer.n_in}->{layer.n_out})"
    if isinstance(layer, BatchNorm):
        return f"BatchNorm({layer.width})"
    return type(layer).__name__


def _clone_layer(layer):
    return _layer_from_config(layer.config())


def _layer_from_config(cfg):
    kind = cfg["kind"]
    if kind == "dense":
        return Dense(cfg["in"], cfg["out"])
    if kind == "batchnorm":
        return BatchNorm(cfg["width"], cfg["momentum"], cfg["epsilon"])
    if kind == "leaky_relu":
        return LeakyReLU(cfg["slope"])
    if kind == "relu":
        return ReLU()
    if kind == "sigmoid":
        return Sigmoid()
    raise ValueError(f"unknown layer kind {kind!r}")


def network_forward(net: Network, X, mode: str = INFER):
    """Run ``X`` through every layer; returns ``(Y, ForwardCache)``.

    In train mode BatchNorm layers use batch statistics and update their
    running estimates.
    """
    train = _check_mode(mode)
    h = _as_batch(X, net.in_width, "network_forward")
    cache = ForwardCache(id(net), mode)
    for layer in net.layers:
        h, c = layer.forward(h, train)
        cache.layer_caches.append(c)
    return h, cache


def network_backward(net: Network, cache: ForwardCache, dY):
    """Backpropagate ``dY``; returns ``(param_grads, dX)`` keyed like ``net.params()``."""
    if cache.net_id != id(net) or len(cache.layer_caches) != len(net.layers):
        raise ValueError("forward cache was not produced by this network")
    dY = np.asarray(dY, dtype=np.float64)
    if dY.ndim != 2 or dY.shape[1] != net.out_width:
        raise ShapeError(f"network_backward: dY has shape {dY.shape}, "
                         f"network output width is {net.out_width}")
    grads = {}
    d = dY
    for i in range(len(net.layers) - 1, -1, -1):
        d, g = net.layers[i].backward(cache.layer_caches[i], d)
        for name, arr in g.items():
            grads[f"{i}.{name}"] = arr
    return grads, d


def loss(kind: str, pred, target):
    """Return ``(value, dPred)``.

    Least squares is the batch mean of ``0.5 * (pred - target)**2`` summed
    over output columns; BCE is the batch mean of the elementwise
    cross-entropy, also summed over columns.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: pred shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0] if pred.ndim else 1
    if kind == LEAST_SQUARES:
        diff = pred - target
        return float(0.5 * np.sum(diff * diff) / n), diff / n
    if kind == BCE:
        if np.any(pred <= 0.0) or np.any(pred >= 1.0):
            raise ValueError("BCE loss requires predictions strictly inside (0, 1)")
        p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
        value = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)) / n
        grad = (p - target) / (p * (1.0 - p)) / n
        return float(value), grad
    raise ValueError(f"unknown loss kind {kind!r}")


class Adam:
    """Adam with bias correction, keyed by parameter name."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for k, p in params.items():
            if k not in grads:
                raise ShapeError(f"adam_step: no gradient for parameter {k!r}")
            if grads[k].shape != p.shape:
                raise ShapeError(f"adam_step: gradient for {k!r} has shape {grads[k].shape}, "
                                 f"parameter has {p.shape}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            if k not in self.first_moment:
                self.first_moment[k] = np.zeros_like(p)
                self.second_moment[k] = np.zeros_like(p)
            m = self.first_moment[k]
            v = self.second_moment[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


def adam_step(state: Adam, params, grads):
    state.step(params, grads)
    return params, state


def train_batch(net: Network, opt: Adam, kind: str, X, target) -> float:
    """One forward/backward/Adam update; returns the loss before the update."""
    pred, cache = network_forward(net, X, TRAIN)
    value, d = loss(kind, pred, target)
    grads, _ = network_backward(net, cache, d)
    opt.step(net.params(), grads)
    return value


# ---------------------------------------------------------------- builders

def dense_stack(widths, hidden, output, rng, batchnorm=False):
    """Dense layers through ``widths``, ``hidden()`` after every inner layer,
    optional BatchNorm after each hidden activation, ``output()`` at the end."""
    layers = []
    for i in range(len(widths) - 1):
        layers.append(Dense(widths[i], widths[i + 1], rng))
        last = i == len(widths) - 2
        if last:
            if output is not None:
                layers.append(output())
        else:
            layers.append(hidden())
            if batchnorm:
                layers.append(BatchNorm(widths[i + 1]))
    return Network(layers)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_relative_error: float
    worst_parameter: str
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tol


def relative_error(a, b, floor: float = 1e-7):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(net: Network, kind: str, X, target, h: float = 1e-5, tol: float = 1e-4,
               mode: str = TRAIN) -> GradCheckResult:
    """Compare analytic parameter gradients with central differences.

    Parameters and BatchNorm running statistics are restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    saved = net.state()
    try:
        pred, cache = network_forward(net, X, mode)
        _, d = loss(kind, pred, target)
        analytic, _ = network_backward(net, cache, d)
        worst, worst_name = 0.0, ""
        for name, p in net.params().items():
            flat = p.reshape(-1)
            numeric = np.empty_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = loss(kind, network_forward(net, X, mode)[0], target)[0]
                flat[j] = orig - h
                down = loss(kind, network_forward(net, X, mode)[0], target)[0]
                flat[j] = orig
                numeric[j] = (up - down) / (2.0 * h)
            err = float(relative_error(analytic[name].reshape(-1), numeric).max(initial=0.0))
            if err > worst:
                worst, worst_name = err, name
    finally:
        net.load_state(saved)
    return GradCheckResult(worst, worst_name, tol)


# ---------------------------------------------------------------- persistence

def network_blocks(net: Network, prefix: str = "") -> tuple[list, dict[str, np.ndarray]]:
    layers = [l.config() for l in net.layers]
    blocks = {prefix + k: v for k, v in {**net.params(), **net.buffers()}.items()}
    return layers, blocks


def network_from_blocks(layers: list, blocks: dict[str, np.ndarray], prefix: str = "") -> Network:
    net = Network([_layer_from_config(c) for c in layers])
    state = {}
    for k, arr in {**net.params(), **net.buffers()}.items():
        key = prefix + k
        if key not in blocks:
            raise container.ContainerError(f"missing parameter block {key!r}")
        if blocks[key].shape != arr.shape:
            raise container.ContainerError(
                f"block {key!r} has shape {blocks[key].shape}, layer expects {arr.shape}")
        state[k] = blocks[key]
    net.load_state(state)
    return net


def save_network(net: Network, path) -> None:
    layers, blocks = network_blocks(net)
    container.write(path, "network", {"layers": layers}, blocks)


def load_network(path) -> Network:
    _, meta, blocks = container.read(path, expected_kind="network")
    return network_from_blocks(meta["layers"], blocks)
