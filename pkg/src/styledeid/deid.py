"""De-identification: invert a photo, mix with an auxiliary face, re-render."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inversion import FeatureExtractor, InversionAborted, InversionConfig, InversionResult, invert_batch
from .synthesis import Generator, style_mix
from .world import AuxiliaryFace, Population, make_auxiliary, render

log = logging.getLogger(__name__)


def pack_hash(pack: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pack, dtype=np.float64).tobytes()).hexdigest()


@dataclass(frozen=True)
class SweepSpec:
    levels: tuple[int, ...]
    aux_seeds: tuple[int, ...]
    photo_ids: tuple[int, ...]

    def validate(self, n_layers: int) -> None:
        if not self.levels or not self.aux_seeds or not self.photo_ids:
            raise ValueError("sweep needs at least one level, auxiliary and photo")
        bad = [r for r in self.levels if not 0 <= r <= n_layers - 1]
        if bad:
            raise ValueError(f"mixing levels {bad} outside [0, {n_layers - 1}]")

    @property
    def size(self) -> int:
        return len(self.levels) * len(self.aux_seeds) * len(self.photo_ids)


def default_sweep(pop: Population, n_layers: int, n_aux: int = 3, aux_seed: int = 0,
                  levels: tuple[int, ...] | None = None, trial: int = 0) -> SweepSpec:
    """Levels 0..L-2, ``n_aux`` seeded auxiliaries shared by every photo.

    Each ``trial`` draws a fresh auxiliary set from the same seed.
    """
    seeds = np.random.SeedSequence([aux_seed, 0xA0, trial]).generate_state(n_aux, dtype=np.uint32)
    levels = tuple(range(n_layers - 1)) if levels is None else tuple(levels)
    return SweepSpec(levels, tuple(int(s) for s in seeds), tuple(range(len(pop))))


@dataclass
class DeidRecord:
    photo_id: int
    aux_seed: int
    level: int
    inverted_pack_sha256: str
    config_hash: str
    image: np.ndarray | None
    pack: np.ndarray | None
    status: str = "ok"
    error: str = ""


def deidentify(g: Generator, enc, f: FeatureExtractor, target: np.ndarray, aux: AuxiliaryFace, r: int,
               cfg: InversionConfig | None = None, config_hash: str = "", photo_id: int = -1) -> DeidRecord:
    cfg = cfg or InversionConfig()
    if not 0 <= r <= g.n_layers - 1:
        raise ValueError(f"mixing level {r} outside [0, {g.n_layers - 1}]")
    target = np.asarray(target)
    if target.dtype == np.uint8:
        target = target.astype(np.float32) / 255.0
    try:
        res = invert_batch(g, enc, f, target[None], cfg)[0]
    except InversionAborted as exc:
        return DeidRecord(photo_id, aux.seed, r, "", config_hash, None, None, "failed", str(exc))
    mixed = style_mix(res.pack, aux.pack, r)
    img = render(g, mixed[None], [cfg.noise_seed])[0]
    return DeidRecord(photo_id, aux.seed, r, pack_hash(res.pack), config_hash, img, mixed)


# ---------------------------------------------------------------- batch


def _invert_chunk(args):
    g, enc, f, images, cfg = args
    try:
        return invert_batch(g, enc, f, images, cfg)
    except InversionAborted:
        # isolate the bad sample(s); the rest are unaffected by batching
        out = []
        for im in images:
            try:
                out.append(invert_batch(g, enc, f, im[None], cfg)[0])
            except InversionAborted as exc:
                out.append(exc)
        return out


def invert_photos(g: Generator, enc, f: FeatureExtractor, images: np.ndarray, cfg: InversionConfig,
                  workers: int = 1) -> list[InversionResult | InversionAborted]:
    """Invert in fixed chunks of ``cfg.batch_size``; results do not depend on ``workers``."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / 255.0
    jobs = [(g, enc, f, x[i:i + cfg.batch_size], cfg) for i in range(0, len(x), cfg.batch_size)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_invert_chunk, jobs))
    else:
        chunks = [_invert_chunk(j) for j in jobs]
    return [r for c in chunks for r in c]


@dataclass
class DeidSet:
    """All de-identified images of a sweep, flattened photo-major then aux then level."""

    spec: SweepSpec
    config_hash: str
    photo_id: np.ndarray
    aux_seed: np.ndarray
    level: np.ndarray
    status: np.ndarray
    images: np.ndarray           # (M, H, W, 3) uint8, zeros where failed
    packs: np.ndarray            # (M, L, D) mixed packs, nan where failed
    inverted: np.ndarray         # (P, L, D) inverted pack per sweep photo
    inverted_sha256: list[str]
    inversion_report: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.photo_id)

    @property
    def ok(self) -> np.ndarray:
        return self.status == "ok"

    def records(self) -> list[DeidRecord]:
        pos = {p: i for i, p in enumerate(self.spec.photo_ids)}
        return [DeidRecord(int(self.photo_id[m]), int(self.aux_seed[m]), int(self.level[m]),
                           self.inverted_sha256[pos[int(self.photo_id[m])]], self.config_hash,
                           self.images[m], self.packs[m], str(self.status[m]))
                for m in range(len(self))]


def mix_and_render(g: Generator, inverted: np.ndarray, inv_ok: np.ndarray, spec: SweepSpec,
                   noise_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Build every (photo, aux, level) pack and render it with the fixed noise field."""
    auxes = [make_auxiliary(g, s) for s in spec.aux_seeds]
    P, A, R = len(spec.photo_ids), len(auxes), len(spec.levels)
    photo = np.repeat(np.asarray(spec.photo_ids), A * R)
    aux_seed = np.tile(np.repeat(np.asarray(spec.aux_seeds, dtype=np.int64), R), P)
    level = np.tile(np.asarray(spec.levels), P * A)
    packs = np.empty((P, A, R) + inverted.shape[1:])
    for a, aux in enumerate(auxes):
        for j, r in enumerate(spec.levels):
            packs[:, a, j] = style_mix(inverted, aux.pack, r)
    packs = packs.reshape((-1,) + inverted.shape[1:])
    ok = np.repeat(inv_ok, A * R)
    images = np.zeros((len(packs),) + (g.config.resolution,) * 2 + (3,), np.uint8)
    if ok.any():
        images[ok] = render(g, packs[ok], np.full(int(ok.sum()), noise_seed))
    packs[~ok] = np.nan
    return photo, aux_seed, level, packs, images


def batch_generate(g: Generator, enc, f: FeatureExtractor, pop: Population, spec: SweepSpec,
                   cfg: InversionConfig | None = None, workers: int = 1, config_hash: str = "") -> DeidSet:
    cfg = cfg or InversionConfig()
    spec.validate(g.n_layers)
    ids = np.asarray(spec.photo_ids)
    results = invert_photos(g, enc, f, pop.images[ids], cfg, workers)
    inv_ok = np.array([not isinstance(r, InversionAborted) for r in results])
    inverted = np.stack([r.pack if ok else np.full(pop.packs.shape[1:], np.nan) for r, ok in zip(results, inv_ok)])
    for i in np.flatnonzero(~inv_ok):
        log.warning("inversion of photo %d aborted: %s", ids[i], results[i])
    photo, aux_seed, level, packs, images = mix_and_render(g, np.nan_to_num(inverted), inv_ok, spec, cfg.noise_seed)
    status = np.where(np.repeat(inv_ok, len(spec.aux_seeds) * len(spec.levels)), "ok", "failed")
    ratios = np.array([r.trace[-1] / r.encoder_loss for r, ok in zip(results, inv_ok) if ok and r.encoder_loss > 0])
    report = {
        "n_photos": len(ids),
        "n_failed": int((~inv_ok).sum()),
        "loss_ratio_median": float(np.median(ratios)) if len(ratios) else None,
        "loss_ratio_p90": float(np.quantile(ratios, 0.9)) if len(ratios) else None,
        "mean_iters": float(np.mean([r.iters for r, ok in zip(results, inv_ok) if ok])) if inv_ok.any() else None,
        "frac_ratio_le_0.1": float((ratios <= 0.1).mean()) if len(ratios) else None,
        "frac_monotone": float(np.mean([bool(np.all(np.diff(r.trace) <= 0)) for r, ok in zip(results, inv_ok)
                                        if ok])) if inv_ok.any() else None,
    }
    hashes = [pack_hash(p) if ok else "" for p, ok in zip(inverted, inv_ok)]
    return DeidSet(spec, config_hash, photo, aux_seed, level, status, images, packs, inverted, hashes, report)


def resweep(g: Generator, base: DeidSet, spec: SweepSpec, noise_seed: int) -> DeidSet:
    """Reuse the inverted packs of ``base`` with a different auxiliary set or levels."""
    if tuple(spec.photo_ids) != tuple(base.spec.photo_ids):
        raise ValueError("resweep keeps the photo set of the base sweep")
    inv_ok = np.array([h != "" for h in base.inverted_sha256])
    photo, aux_seed, level, packs, images = mix_and_render(g, np.nan_to_num(base.inverted), inv_ok, spec, noise_seed)
    status = np.where(np.repeat(inv_ok, len(spec.aux_seeds) * len(spec.levels)), "ok", "failed")
    return DeidSet(spec, base.config_hash, photo, aux_seed, level, status, images, packs, base.inverted,
                   base.inverted_sha256, base.inversion_report)


# ---------------------------------------------------------------- manifest


def write_manifest(ds: DeidSet, pop: Population, out_dir: str | Path, run_id: str) -> Path:
    from PIL import Image

    out = Path(out_dir)
    (out / "deid").mkdir(parents=True, exist_ok=True)
    pos = {p: i for i, p in enumerate(ds.spec.photo_ids)}
    path = out / "deid.jsonl"
    with open(path, "w") as fh:
        for m in range(len(ds)):
            pid, aux, r = int(ds.photo_id[m]), int(ds.aux_seed[m]), int(ds.level[m])
            rec = {
                "run_id": run_id,
                "photo_id": pid,
                "identity": int(pop.identity[pid]),
                "aux_seed": aux,
                "level": r,
                "inverted_pack_sha256": ds.inverted_sha256[pos[pid]],
                "config_hash": ds.config_hash,
                "status": str(ds.status[m]),
            }
            if ds.status[m] == "ok":
                name = f"deid/{pid:05d}_{aux}_{r}.png"
                Image.fromarray(ds.images[m]).save(out / name, optimize=False)
                rec["image"] = name
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
