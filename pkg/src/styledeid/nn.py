"""Small numpy layer kit with hand-written backward passes.

Tensors are channels-last: images and feature maps are ``(N, H, W, C)``.
Every layer is a pair of pure functions ``forward(params, x) -> (y, cache)``
and ``backward(params, cache, grad_y) -> (grad_x, grads)`` so trained models
can be shared read-only between workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

Params = dict[str, np.ndarray]


class TrainingError(RuntimeError):
    """Raised when a training loop diverges (NaN/Inf loss)."""


# ---------------------------------------------------------------- primitives


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    if 0 <= slope <= 1:
        return np.maximum(x, x * slope)
    return np.where(x > 0, x, x * slope)


def leaky_relu_grad(x: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, g, g * slope)


def _offsets(k: int) -> list[tuple[int, int]]:
    p = k // 2
    return [(i - p, j - p) for i in range(k) for j in range(k)]


def _window(n: int, d: int) -> tuple[slice, slice]:
    """Destination/source slices for out[h] += src[h + d] along one axis."""
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n - max(0, -d))


def shift_gather(x: np.ndarray, k: int, sign: int = 1) -> np.ndarray:
    """Same-padded patches (N,H,W,C) -> (N,H,W,k*k*C); block t holds x[h+sign*di, w+sign*dj]."""
    if k == 1:
        return x
    n, h, w, c = x.shape
    cols = np.empty((n, h, w, k * k * c), dtype=x.dtype)
    for t, (di, dj) in enumerate(_offsets(k)):
        (hd, hs), (wd, ws) = _window(h, sign * di), _window(w, sign * dj)
        block = cols[..., t * c:(t + 1) * c]
        block[:, hd, wd, :] = x[:, hs, ws, :]
        # zero the strips the shifted window does not cover
        if hd.start:
            block[:, :hd.start] = 0
        if hd.stop < h:
            block[:, hd.stop:] = 0
        if wd.start:
            block[:, :, :wd.start] = 0
        if wd.stop < w:
            block[:, :, wd.stop:] = 0
    return cols


def shift_scatter(z: np.ndarray, k: int, sign: int = 1) -> np.ndarray:
    """Adjoint-style reduction: (N,H,W,k*k*C) -> (N,H,W,C), out[h] += z_t[h+sign*di]."""
    if k == 1:
        return z
    n, h, w, kc = z.shape
    c = kc // (k * k)
    out = np.zeros((n, h, w, c), dtype=z.dtype)
    for t, (di, dj) in enumerate(_offsets(k)):
        (hd, hs), (wd, ws) = _window(h, sign * di), _window(w, sign * dj)
        out[:, hd, wd, :] += z[:, hs, ws, t * c:(t + 1) * c]
    return out


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    return shift_gather(x, k)


def conv2d(x: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 same convolution, ``kernel`` (k, k, Cin, Cout).

    Patches are expanded on whichever side has fewer channels. The second
    return value is the input, kept for the kernel gradient.
    """
    k, _, cin, cout = kernel.shape
    if cin <= cout or k == 1:
        return shift_gather(x, k) @ kernel.reshape(k * k * cin, cout), x
    z = x @ kernel.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    # out[h] = sum_t x[h+d_t] W_t  ==  sum_t z_t[h+d_t]
    return shift_scatter(z, k, sign=1), x


def conv2d_input_grad(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k, _, cin, cout = kernel.shape
    if cout <= cin or k == 1:
        # dx[h] = sum_t g[h-d_t] W_t^T
        wt = kernel.transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
        return shift_gather(g, k, sign=-1) @ wt
    q = g @ kernel.transpose(3, 0, 1, 2).reshape(cout, k * k * cin)
    return shift_scatter(q, k, sign=-1)


def conv2d_kernel_grad(g: np.ndarray, x: np.ndarray, kernel_shape: tuple) -> np.ndarray:
    k, _, cin, cout = kernel_shape
    cols = shift_gather(x, k)
    return (cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)).reshape(kernel_shape)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_grad(g: np.ndarray) -> np.ndarray:
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def avgpool2(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool2_grad(g: np.ndarray) -> np.ndarray:
    return upsample2(g) * 0.25


# ---------------------------------------------------------------- layers


@dataclass(frozen=True)
class Conv:
    cin: int
    cout: int
    k: int = 3

    def init(self, rng: np.random.Generator) -> Params:
        fan_in = self.k * self.k * self.cin
        w = rng.standard_normal((self.k, self.k, self.cin, self.cout)) * np.sqrt(2.0 / fan_in)
        return {"w": w, "b": np.zeros(self.cout)}

    def forward(self, p: Params, x: np.ndarray):
        y, x = conv2d(x, p["w"])
        return y + p["b"], x

    def backward(self, p: Params, x: np.ndarray, g: np.ndarray):
        grads = {"w": conv2d_kernel_grad(g, x, p["w"].shape), "b": g.sum(axis=(0, 1, 2))}
        return conv2d_input_grad(g, p["w"]), grads


@dataclass(frozen=True)
class Dense:
    nin: int
    nout: int
    gain: float = 2.0

    def init(self, rng: np.random.Generator) -> Params:
        w = rng.standard_normal((self.nin, self.nout)) * np.sqrt(self.gain / self.nin)
        return {"w": w, "b": np.zeros(self.nout)}

    def forward(self, p: Params, x: np.ndarray):
        return x @ p["w"] + p["b"], x

    def backward(self, p: Params, x: np.ndarray, g: np.ndarray):
        return g @ p["w"].T, {"w": x.T @ g, "b": g.sum(axis=0)}


@dataclass(frozen=True)
class LeakyReLU:
    slope: float = 0.2

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return leaky_relu(x, self.slope), x

    def backward(self, p, x, g):
        return leaky_relu_grad(x, g, self.slope), {}


@dataclass(frozen=True)
class AvgPool2:
    def init(self, rng):
        return {}

    def forward(self, p, x):
        return avgpool2(x), None

    def backward(self, p, cache, g):
        return avgpool2_grad(g), {}


@dataclass(frozen=True)
class Flatten:
    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, p, shape, g):
        return g.reshape(shape), {}


class GlobalMeanStd:
    """Per-channel spatial mean and std, concatenated: (N, H, W, C) -> (N, 2C)."""

    eps: float = 1e-6

    def init(self, rng):
        return {}

    def forward(self, p, x):
        mu = x.mean(axis=(1, 2), keepdims=True)
        d = x - mu
        sd = np.sqrt((d * d).mean(axis=(1, 2), keepdims=True) + self.eps)
        return np.concatenate([mu[:, 0, 0], sd[:, 0, 0]], axis=1), (d, sd)

    def backward(self, p, cache, g):
        d, sd = cache
        n, h, w, c = d.shape
        gm, gs = g[:, None, None, :c], g[:, None, None, c:]
        return (gm + gs * d / sd) / (h * w), {}


@dataclass(frozen=True)
class L2Normalize:
    """Row-wise projection onto the unit sphere."""

    eps: float = 1e-12

    def init(self, rng):
        return {}

    def forward(self, p, x):
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + self.eps)
        y = x / norm
        return y, (y, norm)

    def backward(self, p, cache, g):
        y, norm = cache
        return (g - y * (g * y).sum(axis=1, keepdims=True)) / norm, {}


@dataclass
class Scale:
    """Fixed multiplier, e.g. the radius of an L2-softmax hypersphere."""

    alpha: float = 16.0

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x * self.alpha, None

    def backward(self, p, cache, g):
        return g * self.alpha, {}


def backward_input(layer, p: Params, cache, g: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        return conv2d_input_grad(g, p["w"])
    if isinstance(layer, Dense):
        return g @ p["w"].T
    return layer.backward(p, cache, g)[0]


class Sequential:
    """An ordered stack of layers with per-layer parameter dicts."""

    def __init__(self, layers: list, params: list[Params] | None = None, rng=None):
        self.layers = list(layers)
        if params is None:
            params = [layer.init(rng) for layer in self.layers]
        self.params = params

    def forward(self, x: np.ndarray, upto: int | None = None):
        caches = []
        for layer, p in zip(self.layers[:upto], self.params[:upto]):
            x, cache = layer.forward(p, x)
            caches.append(cache)
        return x, caches

    def __call__(self, x: np.ndarray, upto: int | None = None) -> np.ndarray:
        return self.forward(x, upto)[0]

    def backward(self, caches: list, g: np.ndarray):
        grads = [None] * len(caches)
        for i in reversed(range(len(caches))):
            g, grads[i] = self.layers[i].backward(self.params[i], caches[i], g)
        return g, grads

    def input_grad(self, caches: list, g: np.ndarray) -> np.ndarray:
        """Backward pass for the input only; skips parameter gradients."""
        for i in reversed(range(len(caches))):
            g = backward_input(self.layers[i], self.params[i], caches[i], g)
        return g

    def astype(self, dtype) -> "Sequential":
        return Sequential(self.layers, [{k: v.astype(dtype) for k, v in p.items()} for p in self.params])

    def state(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, p in enumerate(self.params) for k, v in sorted(p.items())}

    def freeze(self) -> None:
        for p in self.params:
            for v in p.values():
                v.flags.writeable = False


def weights_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- training


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[Params], grads: list[Params]) -> None:
        if not self.m:
            self.m = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
            self.v = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                m[k] = self.beta1 * m[k] + (1 - self.beta1) * g[k]
                v[k] = self.beta2 * v[k] + (1 - self.beta2) * g[k] * g[k]
                p[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    lr_decay: float = 0.1  # final lr multiplier, cosine schedule


def fit(
    net: Sequential,
    inputs: np.ndarray,
    loss_fn: Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    targets: Any,
    cfg: TrainConfig,
    dtype=np.float32,
) -> list[float]:
    """Minibatch Adam on ``loss_fn(output, target_batch) -> (loss, grad)``.

    Returns the per-epoch mean training loss. ``targets`` may be an array or
    a tuple of arrays indexed along the first axis.
    """
    rng = np.random.default_rng(cfg.seed)
    net.params = [{k: v.astype(dtype) for k, v in p.items()} for p in net.params]
    opt = Adam(lr=cfg.lr)
    n = len(inputs)
    steps = cfg.epochs * int(np.ceil(n / cfg.batch_size))
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            frac = opt.t / max(steps - 1, 1)
            opt.lr = cfg.lr * (cfg.lr_decay + (1 - cfg.lr_decay) * 0.5 * (1 + np.cos(np.pi * frac)))
            idx = order[start:start + cfg.batch_size]
            out, caches = net.forward(inputs[idx].astype(dtype, copy=False))
            batch_t = tuple(t[idx] for t in targets) if isinstance(targets, tuple) else targets[idx]
            loss, g = loss_fn(out, batch_t)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {opt.t}: {loss}")
            _, grads = net.backward(caches, g.astype(dtype, copy=False))
            opt.step(net.params, grads)
            total += loss * len(idx)
        history.append(total / n)
    return history


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(p[np.arange(n), labels] + 1e-12).mean()
    g = p
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def predict_batched(net: Sequential, x: np.ndarray, batch: int = 512, dtype=np.float32,
                    upto: int | None = None) -> np.ndarray:
    outs = [net(x[i:i + batch].astype(dtype, copy=False), upto) for i in range(0, len(x), batch)]
    return np.concatenate(outs) if outs else np.empty((0,))
