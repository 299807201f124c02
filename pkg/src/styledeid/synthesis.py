"""Style-based generator: mapping network, AdaIN synthesis, style mixing.

A style pack is a plain array of shape ``(L, D_w)`` (or ``(N, L, D_w)`` for a
batch); row 0 is the coarsest style layer. The generator is built from a
seed and never trained; it is the data distribution of the whole lab.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn


class ConfigurationError(ValueError):
    """Shapes or layer counts do not match the generator configuration."""


class FingerprintMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    resolution: int = 32
    base_channels: int = 64
    mapping_layers: int = 3
    slope: float = 0.2
    eps_std: float = 1e-5
    style_gain: float = 1.0
    noise_gain: float = 0.1
    rgb_gain: float = 0.5
    seed: int = 0

    def __post_init__(self):
        levels = np.log2(self.resolution / 4)
        if levels != int(levels) or levels < 0:
            raise ConfigurationError(f"resolution must be 4*2^k, got {self.resolution}")
        if self.base_channels >> int(levels) < 1:
            raise ConfigurationError("base_channels too small for the requested resolution")

    @property
    def n_layers(self) -> int:
        return 2 * (int(np.log2(self.resolution // 4)) + 1)

    @property
    def layer_resolutions(self) -> list[int]:
        return [4 << (i // 2) for i in range(self.n_layers)]

    @property
    def layer_channels(self) -> list[int]:
        return [self.base_channels >> (i // 2) for i in range(self.n_layers)]


def _orthogonal(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


class Generator:
    """Frozen, seeded synthesis network. Construction is bit-reproducible."""

    def __init__(self, config: GeneratorConfig | None = None):
        self.config = cfg = config or GeneratorConfig()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x57E1]))
        he = np.sqrt(2.0 / (1.0 + cfg.slope ** 2))
        p: dict[str, np.ndarray] = {}
        dims = [cfg.z_dim] + [cfg.w_dim] * cfg.mapping_layers
        for i in range(cfg.mapping_layers):
            p[f"map{i}.w"] = _orthogonal(rng, dims[i], dims[i + 1]) * he
            p[f"map{i}.b"] = rng.standard_normal(dims[i + 1]) * 0.1
        # mean style, so the affines below modulate around it with no fixed offset
        h = rng.standard_normal((4096, cfg.z_dim))
        for i in range(cfg.mapping_layers):
            h = nn.leaky_relu(h @ p[f"map{i}.w"] + p[f"map{i}.b"], cfg.slope)
        self.w_avg = h.mean(axis=0)
        self.w_avg.flags.writeable = False
        chans = cfg.layer_channels
        p["const"] = rng.standard_normal((4, 4, chans[0]))
        for i, c in enumerate(chans):
            if i > 0:
                cin = chans[i - 1]
                p[f"conv{i}.w"] = rng.standard_normal((3, 3, cin, c)) / np.sqrt(9 * cin)
            p[f"conv{i}.b"] = rng.standard_normal(c) * 0.1
            p[f"noise{i}"] = np.abs(rng.standard_normal(c)) * cfg.noise_gain
            gain = cfg.style_gain / np.sqrt(cfg.w_dim)
            p[f"A{i}.scale_w"] = rng.standard_normal((cfg.w_dim, c)) * gain
            p[f"A{i}.scale_b"] = 1.0 - self.w_avg @ p[f"A{i}.scale_w"]
            p[f"A{i}.bias_w"] = rng.standard_normal((cfg.w_dim, c)) * gain
            p[f"A{i}.bias_b"] = -self.w_avg @ p[f"A{i}.bias_w"]
        for i, c in enumerate(chans):
            p[f"rgb{i}.w"] = rng.standard_normal((c, 3)) * (cfg.rgb_gain / np.sqrt(c * len(chans)))
            p[f"rgb{i}.b"] = np.zeros(3)
        for v in p.values():
            v.flags.writeable = False
        self.params = p
        self._cast: dict[np.dtype, dict[str, np.ndarray]] = {np.dtype(np.float64): p}

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def params_as(self, dtype) -> dict[str, np.ndarray]:
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = {k: v.astype(dtype) for k, v in self.params.items()}
        return self._cast[dtype]

    def affine(self, layer: int) -> np.ndarray:
        """The style-to-(scale, bias) matrix of a layer, shape (D_w, 2*C)."""
        p = self.params
        return np.concatenate([p[f"A{layer}.scale_w"], p[f"A{layer}.bias_w"]], axis=1)

    def weights_hash(self) -> str:
        return nn.weights_hash(self.params)

    def fingerprint(self) -> dict:
        return {"seed": self.config.seed, "config": asdict(self.config), "sha256": self.weights_hash()}

    def save_fingerprint(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.fingerprint(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_fingerprint(cls, path: str | Path) -> "Generator":
        """Rebuild from a fingerprint file; refuses if the weights hash differs."""
        fp = json.loads(Path(path).read_text())
        g = cls(GeneratorConfig(**fp["config"]))
        if g.weights_hash() != fp["sha256"]:
            raise FingerprintMismatch(
                f"generator rebuilt from {path} hashes to {g.weights_hash()}, expected {fp['sha256']}"
            )
        return g


@dataclass(frozen=True)
class NoiseField:
    seed: int
    fields: tuple[np.ndarray, ...]

    @classmethod
    def from_seed(cls, config: GeneratorConfig, seed: int) -> "NoiseField":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x401E]))
        fields = tuple(rng.standard_normal((r, r)) for r in config.layer_resolutions)
        for f in fields:
            f.flags.writeable = False
        return cls(seed, fields)


def stack_noise(noise: NoiseField | Sequence[NoiseField], n_layers: int) -> list[np.ndarray]:
    if isinstance(noise, NoiseField):
        noise = [noise]
    if any(len(nf.fields) != n_layers for nf in noise):
        raise ConfigurationError("noise field layer count does not match the generator")
    return [np.stack([nf.fields[l] for nf in noise]) for l in range(n_layers)]


# ---------------------------------------------------------------- mapping


def map_latent(g: Generator, z: np.ndarray) -> np.ndarray:
    """Latent(s) -> style pack(s): the mapped w broadcast to every layer."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != g.config.z_dim or z.ndim not in (1, 2):
        raise ConfigurationError(f"latent must have trailing dimension {g.config.z_dim}, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ConfigurationError("latent contains non-finite entries")
    h = z
    for i in range(g.config.mapping_layers):
        h = nn.leaky_relu(h @ g.params[f"map{i}.w"] + g.params[f"map{i}.b"], g.config.slope)
    return np.repeat(h[..., None, :], g.n_layers, axis=-2)


def style_mix(target: np.ndarray, aux: np.ndarray, r: int) -> np.ndarray:
    """Layers 0..r from ``target``, layers r+1.. from ``aux``; batches broadcast."""
    target = np.asarray(target)
    aux = np.asarray(aux)
    if target.shape[-2:] != aux.shape[-2:]:
        raise ConfigurationError(f"pack shapes differ: {target.shape} vs {aux.shape}")
    n_layers = target.shape[-2]
    if not isinstance(r, (int, np.integer)) or not 0 <= r <= n_layers - 1:
        raise ValueError(f"mixing level must be an integer in [0, {n_layers - 1}], got {r!r}")
    out = np.array(np.broadcast_to(aux, np.broadcast_shapes(target.shape, aux.shape)))
    out[..., : r + 1, :] = target[..., : r + 1, :]
    return out


# ---------------------------------------------------------------- synthesis


def _check_pack(g: Generator, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    if s.ndim not in (2, 3) or s.shape[-2:] != (g.n_layers, g.config.w_dim):
        raise ConfigurationError(
            f"style pack must be (..., {g.n_layers}, {g.config.w_dim}), got {s.shape}"
        )
    if not np.issubdtype(s.dtype, np.floating):
        s = s.astype(np.float64)
    return s


def adain(a: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float):
    """Per-sample, per-channel normalize then scale/shift. Returns (out, xhat, sigma, live)."""
    mu = a.mean(axis=(1, 2), keepdims=True)
    d = a - mu
    std = np.sqrt((d * d).mean(axis=(1, 2), keepdims=True))
    live = std >= eps
    sigma = np.where(live, std, np.asarray(eps, dtype=a.dtype))
    xhat = d / sigma
    return xhat * scale[:, None, None, :] + bias[:, None, None, :], xhat, sigma, live


def adain_input_grad(dxhat: np.ndarray, xhat: np.ndarray, sigma: np.ndarray, live: np.ndarray):
    m1 = dxhat.mean(axis=(1, 2), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
    return (dxhat - m1 - np.where(live, xhat * m2, 0.0)) / sigma


def _forward(g: Generator, s: np.ndarray, noise: list[np.ndarray], keep: bool):
    cfg = g.config
    p = g.params_as(s.dtype)
    n = s.shape[0]
    caches = []
    x = y = None
    for l in range(g.n_layers):
        if l == 0:
            h = np.broadcast_to(p["const"], (n,) + p["const"].shape)
        else:
            if l % 2 == 0:
                x = nn.upsample2(x)
                y = nn.upsample2(y)
            h, _ = nn.conv2d(x, p[f"conv{l}.w"])
        h = h + p[f"conv{l}.b"] + noise[l][..., None].astype(s.dtype, copy=False) * p[f"noise{l}"]
        a = nn.leaky_relu(h, cfg.slope)
        scale = s[:, l] @ p[f"A{l}.scale_w"] + p[f"A{l}.scale_b"]
        bias = s[:, l] @ p[f"A{l}.bias_w"] + p[f"A{l}.bias_b"]
        x, xhat, sigma, live = adain(a, scale, bias, cfg.eps_std)
        if keep:
            caches.append((h, xhat, sigma, live, scale))
        # skip output: every style layer adds its own RGB contribution
        rgb = x @ p[f"rgb{l}.w"] + p[f"rgb{l}.b"]
        y = rgb if y is None else y + rgb
    t = np.tanh(y)
    img = np.clip(0.5 * (t + 1.0), 0.0, 1.0)
    return img, (caches, t)


def synthesize(g: Generator, s: np.ndarray, n: NoiseField | Sequence[NoiseField]) -> np.ndarray:
    """Render style pack(s) to image(s) in [0, 1], shape (H, W, 3) or (N, H, W, 3)."""
    s = _check_pack(g, s)
    single = s.ndim == 2
    sb = s[None] if single else s
    noise = stack_noise(n, g.n_layers)
    if noise[0].shape[0] != sb.shape[0]:
        raise ConfigurationError(f"{noise[0].shape[0]} noise fields for {sb.shape[0]} packs")
    img, _ = _forward(g, sb, noise, keep=False)
    return img[0] if single else img


def synthesize_with_grad(g: Generator, s: np.ndarray, noise: list[np.ndarray]):
    """Batched forward that returns ``(images, backward)``.

    ``backward(upstream)`` maps an image-shaped gradient to the pack-shaped
    gradient of ``sum(upstream * images)``. ``noise`` is the stacked form.
    """
    cfg = g.config
    p = g.params_as(s.dtype)
    img, (caches, t) = _forward(g, s, noise, keep=True)

    def backward(upstream: np.ndarray) -> np.ndarray:
        gy = upstream * (0.5 * (1.0 - t * t))
        gx = None
        ds = np.zeros_like(s)
        for l in reversed(range(g.n_layers)):
            skip = gy @ p[f"rgb{l}.w"].T
            gx = skip if gx is None else gx + skip
            h, xhat, sigma, live, scale = caches[l]
            dscale = (gx * xhat).sum(axis=(1, 2))
            dbias = gx.sum(axis=(1, 2))
            ds[:, l] = dscale @ p[f"A{l}.scale_w"].T + dbias @ p[f"A{l}.bias_w"].T
            if l == 0:
                break
            da = adain_input_grad(gx * scale[:, None, None, :], xhat, sigma, live)
            gx = nn.conv2d_input_grad(nn.leaky_relu_grad(h, da, cfg.slope), p[f"conv{l}.w"])
            if l % 2 == 0:
                gx = nn.upsample2_grad(gx)
                gy = nn.upsample2_grad(gy)
        return ds

    return img, backward


def synthesize_grad(
    g: Generator, s: np.ndarray, n: NoiseField | Sequence[NoiseField], upstream: np.ndarray
) -> np.ndarray:
    """Gradient of ``sum(upstream * synthesize(g, s, n))`` with respect to ``s``."""
    s = _check_pack(g, s)
    single = s.ndim == 2
    sb = s[None] if single else s
    up = np.asarray(upstream, dtype=sb.dtype)
    up = up[None] if single else up
    if not np.all(np.isfinite(up)):
        raise ValueError("upstream gradient contains non-finite entries")
    _, backward = synthesize_with_grad(g, sb, stack_noise(n, g.n_layers))
    ds = backward(up)
    return ds[0] if single else ds
