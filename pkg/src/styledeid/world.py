"""Synthetic identity world with analytic attribute ground truth.

Every photo is a style pack with three parts:

* layer 0: a per-photo style, independent of who is pictured;
* layers 1..k-1: a per-photo style correlated with an identity anchor;
* layers k..L-1: the identity block, shared by all photos of one person.

Attributes are read off the coarse layers only, so any change to layers
k..L-1 leaves them untouched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .artifacts import load_checkpoint, save_checkpoint
from .synthesis import Generator, NoiseField, map_latent, synthesize

GENDER_CLASSES = ("A", "B")
EXPRESSION_CLASSES = ("neutral", "happy", "surprised")
CATEGORICAL = ("gender", "expression")
CONTINUOUS = ("pose", "age", "smile")
RENDER_CHUNK = 64


class SeedError(RuntimeError):
    """Rejection sampling could not place the requested identities."""


@dataclass(frozen=True)
class WorldConfig:
    n_identities: int = 50
    photos_per_identity: int = 10
    coarse_split: int = 4
    anchor_corr: float = 0.7
    delta_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 2:
            raise ValueError("n_identities must be >= 2")
        if self.photos_per_identity < 2:
            raise ValueError("photos_per_identity must be >= 2")
        if not 0 <= self.anchor_corr < 1:
            raise ValueError("anchor_corr must lie in [0, 1)")


@dataclass(frozen=True)
class AttributeVector:
    gender: int
    expression: int
    pose: float
    age: float
    smile: float

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- attributes


@dataclass(frozen=True)
class AttributeModel:
    """Seeded projection fixtures that define the ground-truth attributes.

    Projections act on centred styles and are scaled to unit variance over
    the generator's style distribution so that classes come out balanced and
    the tanh maps are not saturated.
    """

    center: np.ndarray
    coarse_split: int
    u_gender: np.ndarray
    u_expression: np.ndarray
    u_pose: np.ndarray
    u_age: np.ndarray
    u_smile: np.ndarray

    @classmethod
    def from_generator(cls, g: Generator, seed: int = 0xA77, n_calib: int = 4096,
                       coarse_split: int = 4) -> "AttributeModel":
        rng = np.random.default_rng(np.random.SeedSequence([g.config.seed, seed]))
        d = g.config.w_dim

        def unit(n):
            u = rng.standard_normal((n, d))
            return u / np.linalg.norm(u, axis=1, keepdims=True)

        raw = {"gender": unit(1)[0], "expression": unit(3), "pose": unit(1)[0],
               "age": unit(1)[0], "smile": unit(1)[0]}
        w = map_latent(g, rng.standard_normal((n_calib, g.config.z_dim)))[:, 0]
        center = w.mean(axis=0)
        wc = w - center
        scaled = {name: (u.T / (wc @ u.T).std(axis=0)).T for name, u in raw.items()}
        return cls(center, coarse_split, scaled["gender"], scaled["expression"], scaled["pose"],
                   scaled["age"], scaled["smile"])

    def projections(self, packs: np.ndarray) -> dict[str, np.ndarray]:
        p = np.asarray(packs, dtype=np.float64)
        w0, w1, w2 = (p[..., i, :] - self.center for i in range(3))
        # gender reads the whole coarse block, so mixing erodes it layer by layer
        coarse = p[..., : self.coarse_split, :].mean(axis=-2) - self.center
        return {
            "gender": coarse @ self.u_gender,
            "expression": w1 @ self.u_expression.T,
            "pose": w2 @ self.u_pose,
            "age": w0 @ self.u_age,
            "smile": w1 @ self.u_smile,
        }

    def attributes(self, packs: np.ndarray) -> dict[str, np.ndarray]:
        """Vectorised attributes for a pack or a batch of packs."""
        pr = self.projections(packs)
        return {
            # a projection of exactly zero goes to class "A"
            "gender": np.where(pr["gender"] >= 0, 0, 1),
            "expression": np.argmax(pr["expression"], axis=-1),
            "pose": 45.0 * np.tanh(pr["pose"]),
            "age": 50.0 * (1.0 + np.tanh(pr["age"])),
            "smile": 50.0 * (1.0 + np.tanh(pr["smile"])),
        }

    def state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.__dict__.items()}


def attribute_of(model: AttributeModel, s: np.ndarray) -> AttributeVector:
    a = model.attributes(np.asarray(s)[None])
    return AttributeVector(int(a["gender"][0]), int(a["expression"][0]), float(a["pose"][0]),
                           float(a["age"][0]), float(a["smile"][0]))


# ---------------------------------------------------------------- population


@dataclass
class Population:
    config: WorldConfig
    identity_blocks: np.ndarray          # (n_identities, L-k, D)
    anchors: np.ndarray                  # (n_identities, D_z)
    delta_id: float
    identity: np.ndarray                 # (N,) identity id per photo
    photo_index: np.ndarray              # (N,) index within the identity
    photo_seed: np.ndarray               # (N,)
    noise_seed: np.ndarray               # (N,)
    packs: np.ndarray                    # (N, L, D)
    images: np.ndarray                   # (N, H, W, 3) uint8
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    attr_model: AttributeModel | None = None

    def __len__(self) -> int:
        return len(self.identity)

    @property
    def photo_ids(self) -> np.ndarray:
        return np.arange(len(self))

    def float_images(self, idx=None) -> np.ndarray:
        im = self.images if idx is None else self.images[idx]
        return im.astype(np.float32) / 255.0

    def attribute_vector(self, i: int) -> AttributeVector:
        return AttributeVector(*(self.attributes[k][i].item() for k in CATEGORICAL + CONTINUOUS))


def _photo_draw(g: Generator, cfg: WorldConfig, photo_seed: int, anchor: np.ndarray):
    rng = np.random.default_rng(photo_seed)
    z0 = rng.standard_normal(g.config.z_dim)
    eps = rng.standard_normal(g.config.z_dim)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    c = cfg.anchor_corr
    z1 = c * anchor + np.sqrt(1 - c * c) * eps
    return map_latent(g, z0)[0], map_latent(g, z1)[0], noise_seed


def photo_pack(g: Generator, cfg: WorldConfig, photo_seed: int, anchor: np.ndarray,
               block: np.ndarray) -> tuple[np.ndarray, int]:
    w0, w1, noise_seed = _photo_draw(g, cfg, photo_seed, anchor)
    k = cfg.coarse_split
    pack = np.concatenate([w0[None], np.repeat(w1[None], k - 1, axis=0), block])
    return pack, noise_seed


def quantize(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def render(g: Generator, packs: np.ndarray, noise_seeds) -> np.ndarray:
    """Render in fixed-size chunks so results never depend on how callers batch.

    Runs in float32: twice as fast, and after 8-bit quantization it moves about
    one pixel value in 20000 by a single level.
    """
    packs = np.asarray(packs, dtype=np.float32)
    out = []
    for i in range(0, len(packs), RENDER_CHUNK):
        nfs = [NoiseField.from_seed(g.config, int(s)) for s in noise_seeds[i:i + RENDER_CHUNK]]
        out.append(quantize(synthesize(g, packs[i:i + RENDER_CHUNK], nfs)))
    return np.concatenate(out) if out else np.zeros((0,) + (g.config.resolution,) * 2 + (3,), np.uint8)


def _identity_block(g: Generator, z: np.ndarray, k: int) -> np.ndarray:
    w = map_latent(g, z)
    return w[..., k:, :]


def make_population(g: Generator, cfg: WorldConfig | None = None, attr: AttributeModel | None = None,
                    render_images: bool = True) -> Population:
    cfg = cfg or WorldConfig()
    L = g.n_layers
    k = cfg.coarse_split
    if not 1 <= k <= L - 1:
        raise ValueError(f"coarse_split must lie in [1, {L - 1}]")
    attr = attr or AttributeModel.from_generator(g, coarse_split=cfg.coarse_split)
    ss = np.random.SeedSequence([cfg.seed, 0x3041D])
    calib_ss, id_ss, photo_ss = ss.spawn(3)

    # delta_id from the mean pairwise distance of unconstrained blocks
    calib = _identity_block(g, np.random.default_rng(calib_ss).standard_normal((256, g.config.z_dim)), k)
    flat = calib.reshape(len(calib), -1)
    d = np.sqrt(np.maximum(((flat[:, None] - flat[None]) ** 2).sum(-1), 0))
    delta = cfg.delta_factor * float(d[np.triu_indices(len(flat), 1)].mean())

    rng = np.random.default_rng(id_ss)
    blocks, anchors = [], []
    tries = 0
    while len(blocks) < cfg.n_identities:
        tries += 1
        if tries > 1000 * cfg.n_identities:
            raise SeedError(f"placed {len(blocks)}/{cfg.n_identities} identities with delta_id={delta:.3f} "
                            f"after {tries - 1} draws (seed {cfg.seed})")
        z = rng.standard_normal(g.config.z_dim)
        anchor = rng.standard_normal(g.config.z_dim)
        b = _identity_block(g, z, k)
        if blocks and min(np.linalg.norm(b - o) for o in blocks) < delta:
            continue
        blocks.append(b)
        anchors.append(anchor)
    blocks_arr = np.stack(blocks)
    anchors_arr = np.stack(anchors)

    seeds = photo_ss.generate_state(cfg.n_identities * cfg.photos_per_identity, dtype=np.uint32)
    ident, pidx, pseeds, nseeds, packs = [], [], [], [], []
    for i in range(cfg.n_identities):
        for j in range(cfg.photos_per_identity):
            ps = int(seeds[i * cfg.photos_per_identity + j])
            pack, ns = photo_pack(g, cfg, ps, anchors_arr[i], blocks_arr[i])
            ident.append(i)
            pidx.append(j)
            pseeds.append(ps)
            nseeds.append(ns)
            packs.append(pack)
    packs_arr = np.stack(packs)
    nseeds_arr = np.asarray(nseeds, dtype=np.int64)
    images = render(g, packs_arr, nseeds_arr) if render_images else None
    return Population(cfg, blocks_arr, anchors_arr, delta, np.asarray(ident), np.asarray(pidx),
                      np.asarray(pseeds, dtype=np.int64), nseeds_arr, packs_arr, images,
                      attr.attributes(packs_arr), attr)


def make_gallery(g: Generator, pop: Population, photos_per_identity: int = 10, seed: int = 1) -> Population:
    """Fresh photos of the same identities, disjoint from the population's photos.

    Models the attacker's enrolment set: other pictures of each suspect.
    """
    cfg = pop.config
    ss = np.random.SeedSequence([cfg.seed, 0x6A11, seed])
    seeds = ss.generate_state(cfg.n_identities * photos_per_identity, dtype=np.uint32)
    ident, pidx, pseeds, nseeds, packs = [], [], [], [], []
    for i in range(cfg.n_identities):
        for j in range(photos_per_identity):
            ps = int(seeds[i * photos_per_identity + j])
            pack, ns = photo_pack(g, cfg, ps, pop.anchors[i], pop.identity_blocks[i])
            ident.append(i)
            pidx.append(j)
            pseeds.append(ps)
            nseeds.append(ns)
            packs.append(pack)
    packs_arr = np.stack(packs)
    nseeds_arr = np.asarray(nseeds, dtype=np.int64)
    attr = pop.attr_model or AttributeModel.from_generator(g, coarse_split=cfg.coarse_split)
    return Population(cfg, pop.identity_blocks, pop.anchors, pop.delta_id, np.asarray(ident), np.asarray(pidx),
                      np.asarray(pseeds, dtype=np.int64), nseeds_arr, packs_arr, render(g, packs_arr, nseeds_arr),
                      attr.attributes(packs_arr), attr)


def rerender_photo(g: Generator, pop: Population, i: int) -> np.ndarray:
    """Rebuild photo ``i`` from its stored seeds alone."""
    ident = int(pop.identity[i])
    pack, ns = photo_pack(g, pop.config, int(pop.photo_seed[i]), pop.anchors[ident], pop.identity_blocks[ident])
    return render(g, pack[None], [ns])[0]


def nearest_identity(pop: Population, packs: np.ndarray) -> np.ndarray:
    """Oracle identification from the fine layers of a pack."""
    k = pop.config.coarse_split
    fine = np.asarray(packs)[:, k:].reshape(len(packs), -1)
    blocks = pop.identity_blocks.reshape(len(pop.identity_blocks), -1)
    d = ((fine[:, None] - blocks[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


# ---------------------------------------------------------------- auxiliaries


@dataclass(frozen=True)
class AuxiliaryFace:
    seed: int
    latent: np.ndarray
    pack: np.ndarray
    noise_seed: int
    image: np.ndarray


def make_auxiliary(g: Generator, seed: int) -> AuxiliaryFace:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA0C5]))
    z = rng.standard_normal(g.config.z_dim)
    pack = map_latent(g, z)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return AuxiliaryFace(int(seed), z, pack, noise_seed, render(g, pack[None], [noise_seed])[0])


# ---------------------------------------------------------------- attribute extractor


@dataclass(frozen=True)
class ExtractorConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0
    width: int = 16


_N_OUT = len(GENDER_CLASSES) + len(EXPRESSION_CLASSES) + len(CONTINUOUS)
_CONT_SCALE = {"pose": (0.0, 45.0), "age": (50.0, 50.0), "smile": (50.0, 50.0)}


def _extractor_net(cfg: ExtractorConfig, rng) -> nn.Sequential:
    c = cfg.width
    return nn.Sequential([
        nn.Conv(3, c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Conv(c, 2 * c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Conv(2 * c, 2 * c), nn.LeakyReLU(), nn.AvgPool2(),
        nn.Flatten(),
        nn.Dense(16 * 2 * c, 64), nn.LeakyReLU(),
        nn.Dense(64, _N_OUT, gain=1.0),
    ], rng=rng)


def _attr_loss(out: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    g_lo, e_lo = len(GENDER_CLASSES), len(GENDER_CLASSES) + len(EXPRESSION_CLASSES)
    lg, dg = nn.softmax_xent(out[:, :g_lo], t[:, 0].astype(int))
    le, de = nn.softmax_xent(out[:, g_lo:e_lo], t[:, 1].astype(int))
    d = out[:, e_lo:] - t[:, 2:]
    lc = float((d * d).mean())
    dc = d * (2.0 / d.size)
    return lg + le + lc, np.concatenate([dg, de, dc], axis=1).astype(out.dtype)


def attribute_targets(attrs: dict[str, np.ndarray]) -> np.ndarray:
    cols = [attrs["gender"], attrs["expression"]]
    cols += [(attrs[k] - _CONT_SCALE[k][0]) / _CONT_SCALE[k][1] for k in CONTINUOUS]
    return np.stack(cols, axis=1).astype(np.float32)


class AttributeExtractor:
    """Image -> attribute estimate, trained against ground-truth labels."""

    def __init__(self, net: nn.Sequential, cfg: ExtractorConfig, report: dict | None = None):
        self.net = net
        self.cfg = cfg
        self.report = report or {}
        net.freeze()

    def __call__(self, images: np.ndarray) -> dict[str, np.ndarray]:
        out = nn.predict_batched(self.net, np.asarray(images, dtype=np.float32)).astype(np.float64)
        g_lo, e_lo = len(GENDER_CLASSES), len(GENDER_CLASSES) + len(EXPRESSION_CLASSES)
        res = {"gender": np.argmax(out[:, :g_lo], axis=1), "expression": np.argmax(out[:, g_lo:e_lo], axis=1)}
        for j, k in enumerate(CONTINUOUS):
            off, scale = _CONT_SCALE[k]
            lo, hi = (-45.0, 45.0) if k == "pose" else (0.0, 100.0)
            res[k] = np.clip(out[:, e_lo + j] * scale + off, lo, hi)
        return res

    def weights_hash(self) -> str:
        return nn.weights_hash(self.net.state())

    def save(self, path: str | Path) -> str:
        header = {"kind": "attribute_extractor", "config": asdict(self.cfg),
                  "report": {k: v for k, v in self.report.items() if k != "train_loss"}}
        return save_checkpoint(path, header, self.net.state())

    @classmethod
    def load(cls, path: str | Path) -> "AttributeExtractor":
        header, arrays = load_checkpoint(path)
        cfg = ExtractorConfig(**header["config"])
        net = _extractor_net(cfg, np.random.default_rng(0))
        for i, p in enumerate(net.params):
            for k in p:
                p[k] = arrays[f"{i}.{k}"]
        return cls(net, cfg, header.get("report"))


def evaluate_extractor(ext: AttributeExtractor, images: np.ndarray, truth: dict[str, np.ndarray]) -> dict:
    pred = ext(images)
    rep = {}
    for k in CATEGORICAL:
        majority = np.bincount(truth[k]).max() / len(truth[k])
        rep[f"{k}_acc"] = float((pred[k] == truth[k]).mean())
        rep[f"{k}_majority"] = float(majority)
    for k in CONTINUOUS:
        rep[f"{k}_mae"] = float(np.abs(pred[k] - truth[k]).mean())
        rep[f"{k}_mean_baseline_mae"] = float(np.abs(truth[k].mean() - truth[k]).mean())
    return rep


def train_attribute_extractor(images: np.ndarray, attrs: dict[str, np.ndarray],
                              cfg: ExtractorConfig | None = None) -> AttributeExtractor:
    """Fit on uint8 or float images with ground-truth attribute labels."""
    cfg = cfg or ExtractorConfig()
    if len(images) < 200:
        raise ValueError(f"attribute extractor needs >= 200 labeled photos, got {len(images)}")
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA7]))
    net = _extractor_net(cfg, rng)
    history = nn.fit(net, x, _attr_loss, attribute_targets(attrs),
                     nn.TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed))
    return AttributeExtractor(net, cfg, {"train_loss": [float(h) for h in history]})


# ---------------------------------------------------------------- manifest


def write_manifest(pop: Population, out_dir: str | Path, run_id: str) -> Path:
    """JSON-lines manifest plus one PNG per photo."""
    from PIL import Image

    out = Path(out_dir)
    img_dir = out / "photos"
    img_dir.mkdir(parents=True, exist_ok=True)
    path = out / "population.jsonl"
    with open(path, "w") as fh:
        for i in range(len(pop)):
            name = f"photos/{i:05d}.png"
            Image.fromarray(pop.images[i]).save(out / name, optimize=False)
            rec = {
                "run_id": run_id,
                "photo_id": i,
                "identity": int(pop.identity[i]),
                "photo_index": int(pop.photo_index[i]),
                "photo_seed": int(pop.photo_seed[i]),
                "noise_seed": int(pop.noise_seed[i]),
                "attributes": {k: pop.attributes[k][i].item() for k in CATEGORICAL + CONTINUOUS},
                "image": name,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
