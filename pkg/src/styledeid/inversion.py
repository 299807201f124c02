"""Image -> style pack: encoder estimate refined by feature-space descent."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .artifacts import load_checkpoint, save_checkpoint
from .synthesis import Generator, NoiseField, map_latent, stack_noise, synthesize, synthesize_with_grad


class InversionAborted(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------- features


class FeatureExtractor:
    """Fixed random conv stack; taps after every activation."""

    def __init__(self, seed: int = 1, channels: tuple[int, ...] = (16, 32, 32), slope: float = 0.2,
                 gain: float = 3.75):
        self.seed = seed
        self.channels = channels
        self.gain = gain
        layers: list = []
        self.taps: list[int] = []
        cin = 3
        for i, c in enumerate(channels):
            if i > 0:
                layers.append(nn.AvgPool2())
            layers += [nn.Conv(cin, c), nn.LeakyReLU(slope)]
            self.taps.append(len(layers))
            cin = c
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
        self.net = nn.Sequential(layers, rng=rng)
        self.net.freeze()
        self._cast = {np.dtype(np.float64): self.net}

    def _net(self, dtype) -> nn.Sequential:
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = self.net.astype(dtype)
        return self._cast[dtype]

    def features(self, x: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(x)
        x = x.astype(np.float64) if not np.issubdtype(x.dtype, np.floating) else x
        out, caches = self._forward(x)
        return out

    def _forward(self, x: np.ndarray):
        net = self._net(x.dtype)
        h = (x - 0.5) * self.gain
        feats, caches = [], []
        for i, (layer, p) in enumerate(zip(net.layers, net.params), start=1):
            h, c = layer.forward(p, h)
            caches.append(c)
            if i in self.taps:
                feats.append(h)
        return feats, caches

    def loss_and_grad(self, a: np.ndarray, b_feats: list[np.ndarray]):
        """Per-sample loss of batch ``a`` against precomputed features, and d/da."""
        net = self._net(a.dtype)
        feats, caches = self._forward(a)
        losses = np.zeros(len(a), dtype=a.dtype)
        tap_grads = {}
        for t, fa, fb in zip(self.taps, feats, b_feats):
            d = fa - fb
            size = d[0].size
            losses += (d * d).reshape(len(a), -1).sum(axis=1) / size
            tap_grads[t] = d * (2.0 / size)
        g = None
        for i in reversed(range(len(net.layers))):
            if i + 1 in tap_grads:
                g = tap_grads[i + 1] if g is None else g + tap_grads[i + 1]
            g = nn.backward_input(net.layers[i], net.params[i], caches[i], g)
        return losses, g * self.gain

    def fingerprint(self) -> dict:
        return {"seed": self.seed, "channels": list(self.channels), "gain": self.gain,
                "sha256": nn.weights_hash(self.net.state())}


def feature_loss(f: FeatureExtractor, a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    """Sum over taps of mean squared feature differences (per image for batches)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    single = a.ndim == 3
    fa = f.features(a[None] if single else a)
    fb = f.features(b[None] if single else b)
    loss = sum(((x - y) ** 2).reshape(len(x), -1).mean(axis=1) for x, y in zip(fa, fb))
    return float(loss[0]) if single else loss


def feature_loss_grad(f: FeatureExtractor, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of feature_loss(f, a, b) with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 3
    a = a[None] if single else a
    b = np.asarray(b, dtype=np.float64)
    fb = f.features(b[None] if single else b)
    _, g = f.loss_and_grad(a, fb)
    return g[0] if single else g


# ---------------------------------------------------------------- encoder


class _SplitHeads:
    """Two dense heads on a shared trunk, outputs concatenated."""

    def __init__(self, nin: int, n_coarse: int, n_fine: int):
        self.coarse = nn.Dense(nin, n_coarse, gain=1.0)
        self.fine = nn.Dense(nin, n_fine, gain=1.0)

    def init(self, rng):
        pc, pf = self.coarse.init(rng), self.fine.init(rng)
        return {"cw": pc["w"], "cb": pc["b"], "fw": pf["w"], "fb": pf["b"]}

    def forward(self, p, x):
        return np.concatenate([x @ p["cw"] + p["cb"], x @ p["fw"] + p["fb"]], axis=1), x

    def backward(self, p, x, g):
        nc = p["cb"].shape[0]
        gc, gf = g[:, :nc], g[:, nc:]
        dx = gc @ p["cw"].T + gf @ p["fw"].T
        return dx, {"cw": x.T @ gc, "cb": gc.sum(0), "fw": x.T @ gf, "fb": gf.sum(0)}


@dataclass(frozen=True)
class EncoderConfig:
    epochs: int = 20
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    width: int = 32
    coarse_layers: int = 4
    val_fraction: float = 0.1


class EncoderModel:
    """Conv regressor image -> per-layer style pack (w+)."""

    def __init__(self, net: nn.Sequential, mean: np.ndarray, std: np.ndarray, cfg: EncoderConfig,
                 n_layers: int, w_dim: int, report: dict | None = None):
        self.net = net
        self.mean = mean
        self.std = std
        self.cfg = cfg
        self.n_layers = n_layers
        self.w_dim = w_dim
        self.report = report or {}
        net.freeze()

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        single = images.ndim == 3
        x = images[None] if single else images
        out = nn.predict_batched(self.net, x).astype(np.float64)
        packs = (out * self.std + self.mean).reshape(len(x), self.n_layers, self.w_dim)
        return packs[0] if single else packs

    def weights_hash(self) -> str:
        return nn.weights_hash({**self.net.state(), "mean": self.mean, "std": self.std})


def encoder_net(cfg: EncoderConfig, n_layers: int, w_dim: int, rng) -> nn.Sequential:
    c = cfg.width
    layers = [
        nn.Conv(3, c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Conv(c, 2 * c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Conv(2 * c, 2 * c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Conv(2 * c, 2 * c), nn.LeakyReLU(),
        nn.Flatten(),
        _SplitHeads(16 * 2 * c, cfg.coarse_layers * w_dim, (n_layers - cfg.coarse_layers) * w_dim),
    ]
    return nn.Sequential(layers, rng=rng)


def sample_training_packs(g: Generator, n: int, rng: np.random.Generator) -> np.ndarray:
    """Broadcast packs from fresh latents, the generator's native distribution."""
    return map_latent(g, rng.standard_normal((n, g.config.z_dim)))


def render_batched(g: Generator, packs: np.ndarray, noise_seeds, batch: int = 64, dtype=np.float32) -> np.ndarray:
    out = []
    for i in range(0, len(packs), batch):
        nfs = [NoiseField.from_seed(g.config, int(s)) for s in noise_seeds[i:i + batch]]
        out.append(synthesize(g, packs[i:i + batch].astype(dtype), nfs))
    return np.concatenate(out)


def train_encoder(g: Generator, n_samples: int, cfg: EncoderConfig | None = None,
                  images: np.ndarray | None = None, packs: np.ndarray | None = None) -> EncoderModel:
    """Fit the encoder on generator samples.

    By default ``n_samples`` style-mixed packs are drawn and rendered; callers
    may pass their own generator-born ``images``/``packs`` instead.
    """
    cfg = cfg or EncoderConfig()
    if n_samples < 100:
        raise ValueError(f"train_encoder needs n_samples >= 100, got {n_samples}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE4C0]))
    if packs is None:
        packs = sample_training_packs(g, n_samples, rng)
        images = render_batched(g, packs, rng.integers(0, 2**31, size=n_samples))
    packs = np.asarray(packs)[:n_samples]
    images = np.asarray(images)[:n_samples]
    L, D = g.n_layers, g.config.w_dim
    flat = packs.reshape(len(packs), L * D)
    n_val = max(1, int(round(cfg.val_fraction * len(flat))))
    tr, va = slice(n_val, None), slice(0, n_val)
    mean = flat[tr].mean(axis=0)
    std = flat[tr].std(axis=0) + 1e-6
    target = ((flat - mean) / std).astype(np.float32)

    def mse(out, t):
        d = out - t
        return float((d * d).mean()), d * (2.0 / d.size)

    net = encoder_net(cfg, L, D, rng)
    history = nn.fit(net, images[tr], mse, target[tr],
                     nn.TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed))
    enc = EncoderModel(net, mean, std, cfg, L, D)
    pred = enc(images[va]).reshape(n_val, -1)
    err = np.linalg.norm(pred - flat[va], axis=1).mean()
    base = np.linalg.norm(mean[None] - flat[va], axis=1).mean()
    enc.report = {"val_l2": float(err), "mean_predictor_l2": float(base),
                  "train_loss": [float(h) for h in history]}
    return enc


# ---------------------------------------------------------------- inversion


@dataclass(frozen=True)
class InversionConfig:
    max_iters: int = 300
    step: float = 0.05
    tol: float = 1e-4
    window: int = 10
    noise_seed: int = 0
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")


@dataclass
class InversionResult:
    pack: np.ndarray
    trace: list[float]
    encoder_loss: float
    iters: int


def invert_batch(g: Generator, enc: EncoderModel, f: FeatureExtractor, targets: np.ndarray,
                 cfg: InversionConfig, dtype=np.float32) -> list[InversionResult]:
    """Invert a batch of images jointly; each sample's descent is independent.

    Per-sample losses and gradients never mix, and samples drop out of the
    active set once their best-loss improvement over ``cfg.window`` steps
    falls below ``cfg.tol`` (relative).
    """
    targets = np.asarray(targets, dtype=dtype)
    if targets.ndim != 4 or targets.shape[1:] != (g.config.resolution, g.config.resolution, 3):
        raise ValueError(f"targets must be (N, {g.config.resolution}, {g.config.resolution}, 3)")
    if targets.min() < 0 or targets.max() > 1:
        raise ValueError("target pixels must lie in [0, 1]")
    n = len(targets)
    noise_one = stack_noise(NoiseField.from_seed(g.config, cfg.noise_seed), g.n_layers)
    s = enc(targets).astype(dtype)
    best = s.copy()
    velocity = np.zeros_like(s)
    tfeats = f.features(targets)
    best_loss = np.full(n, np.inf)
    traces: list[list[float]] = [[] for _ in range(n)]
    enc_loss = np.zeros(n)
    iters = np.zeros(n, dtype=int)
    active = np.arange(n)
    for it in range(cfg.max_iters + 1):
        if len(active) == 0:
            break
        sa = s[active]
        noise = [np.broadcast_to(a, (len(active),) + a.shape[1:]) for a in noise_one]
        img, backward = synthesize_with_grad(g, sa, noise)
        loss, gimg = f.loss_and_grad(img, [t[active] for t in tfeats])
        if not np.all(np.isfinite(loss)):
            bad = active[~np.isfinite(loss)][0]
            raise InversionAborted(f"non-finite loss for sample {bad} at iteration {it}", traces[bad])
        loss = loss.astype(np.float64)
        if it == 0:
            enc_loss[active] = loss
        improved = loss < best_loss[active]
        best_loss[active] = np.where(improved, loss, best_loss[active])
        best[active[improved]] = sa[improved]
        for j, i in enumerate(active):
            traces[i].append(float(best_loss[i]))
        if it == cfg.max_iters:
            break
        grad = backward(gimg)
        velocity[active] = cfg.momentum * velocity[active] - cfg.step * grad
        s[active] = sa + velocity[active]
        iters[active] += 1
        if it + 1 >= cfg.window:
            keep = []
            for i in active:
                tr = traces[i]
                old = tr[-cfg.window] if len(tr) >= cfg.window else tr[0]
                if old - tr[-1] >= cfg.tol * abs(old):
                    keep.append(i)
            active = np.asarray(keep, dtype=int)
    return [
        InversionResult(best[i].astype(np.float64), traces[i], float(enc_loss[i]), int(iters[i]))
        for i in range(n)
    ]


def invert(g: Generator, enc: EncoderModel, f: FeatureExtractor, target: np.ndarray,
           cfg: InversionConfig | None = None) -> tuple[np.ndarray, list[float]]:
    """Invert one image; returns (best pack, best-loss-so-far trace)."""
    res = invert_batch(g, enc, f, np.asarray(target)[None], cfg or InversionConfig())[0]
    return res.pack, res.trace


# ---------------------------------------------------------------- checkpoints


def save_encoder(enc: EncoderModel, path: str | Path) -> str:
    header = {"kind": "encoder", "config": asdict(enc.cfg), "n_layers": enc.n_layers, "w_dim": enc.w_dim,
              "report": {k: v for k, v in enc.report.items() if k != "train_loss"}}
    return save_checkpoint(path, header, {**enc.net.state(), "mean": enc.mean, "std": enc.std})


def load_encoder(path: str | Path) -> EncoderModel:
    header, arrays = load_checkpoint(path)
    cfg = EncoderConfig(**header["config"])
    net = encoder_net(cfg, header["n_layers"], header["w_dim"], np.random.default_rng(0))
    for i, p in enumerate(net.params):
        for k in p:
            p[k] = arrays[f"{i}.{k}"]
    return EncoderModel(net, arrays["mean"], arrays["std"], cfg, header["n_layers"], header["w_dim"],
                        header.get("report"))
