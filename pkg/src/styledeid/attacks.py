"""Verification and identification attacks on de-identified faces."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deid import DeidSet
from .recognizer import EmbedderModel, OvoConfig, cosine_to_confidence, train_ovo
from .world import Population

log = logging.getLogger(__name__)

THRESHOLDS = np.arange(101)

# (knows style level, knows target photos, knows auxiliary photos)
THREAT_TABLE = {
    "m1": (True, True, False),
    "m2": (True, False, True),
    "m3": (True, False, False),
    "m4": (False, True, True),
    "m5": (False, True, False),
    "m6": (False, False, True),
    "m7": (False, False, False),
}
TRAIN_PHOTO_FRACTION = 0.7
UNKNOWN_STYLE_SAMPLE = 0.2


class SplitError(ValueError):
    """A split rule lacks the data it needs."""


@dataclass(frozen=True)
class ThreatModel:
    name: str
    knows_style: bool
    knows_target_photos: bool
    knows_auxiliaries: bool

    def __post_init__(self):
        flags = (self.knows_style, self.knows_target_photos, self.knows_auxiliaries)
        if all(flags):
            raise ValueError("an attacker knowing style, target photos and auxiliaries is out of scope")
        if self.name in THREAT_TABLE and THREAT_TABLE[self.name] != flags:
            raise ValueError(f"{self.name} is defined as {THREAT_TABLE[self.name]}, got {flags}")


def threat_model(name: str) -> ThreatModel:
    if name not in THREAT_TABLE:
        raise ValueError(f"unknown threat model {name!r}; valid names: {', '.join(THREAT_TABLE)}")
    return ThreatModel(name, *THREAT_TABLE[name])


ALL_THREAT_MODELS = tuple(threat_model(n) for n in THREAT_TABLE)


@dataclass
class AttackEmbeddings:
    """Embeddings of every de-identified image and every clean photo."""

    deid: np.ndarray
    photos: np.ndarray


def embed_all(e: EmbedderModel, ds: DeidSet, pop: Population) -> AttackEmbeddings:
    deid = np.full((len(ds), e.cfg.dim), np.nan)
    ok = ds.ok
    if ok.any():
        deid[ok] = e.embed(ds.images[ok])
    return AttackEmbeddings(deid, e.embed(pop.images))


# ---------------------------------------------------------------- verification


@dataclass
class VerificationCurve:
    scenario: int
    level: int | None            # None: pooled over the whole manifest
    thresholds: np.ndarray
    rates: np.ndarray            # de-identification success: confidence <= threshold
    n_pairs: int
    skipped: int = 0
    trial: str = "0"

    def rate_at(self, t: int) -> float:
        return float(self.rates[int(t)])


def scenario_partners(ds: DeidSet, pop: Population, scenario: int, seed: int = 0) -> tuple[np.ndarray, int]:
    """Photo each de-id is compared with; -1 where scenario 2 has no other photo."""
    if scenario not in (1, 2):
        raise ValueError(f"scenario must be 1 or 2, got {scenario}")
    if scenario == 1:
        return ds.photo_id.copy(), 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C2]))
    by_id = {i: np.flatnonzero(pop.identity == i) for i in np.unique(pop.identity)}
    out = np.full(len(ds), -1)
    skipped = 0
    for m, p in enumerate(ds.photo_id):
        others = by_id[int(pop.identity[p])]
        others = others[others != p]
        if len(others) == 0:
            skipped += 1
            continue
        out[m] = others[rng.integers(len(others))]
    if skipped:
        log.warning("scenario 2: %d de-identified images have no other photo of their identity", skipped)
    return out, skipped


def curve_from_confidences(conf: np.ndarray, scenario: int, level: int | None, skipped: int = 0) -> VerificationCurve:
    conf = np.sort(np.asarray(conf, dtype=np.float64))
    if len(conf) == 0:
        raise ValueError("no verification pairs")
    rates = np.searchsorted(conf, THRESHOLDS, side="right") / len(conf)
    return VerificationCurve(scenario, level, THRESHOLDS.copy(), rates, len(conf), skipped)


def verify_attack(emb: AttackEmbeddings, ds: DeidSet, pop: Population, scenario: int, seed: int = 0,
                  levels: tuple[int, ...] | None = None) -> dict[int | None, VerificationCurve]:
    """Curves per mixing level plus the pooled curve under key ``None``."""
    if len(ds) == 0:
        raise ValueError("empty de-identification manifest")
    partner, skipped = scenario_partners(ds, pop, scenario, seed)
    valid = ds.ok & (partner >= 0)
    cos = np.full(len(ds), np.nan)
    cos[valid] = (emb.deid[valid] * emb.photos[partner[valid]]).sum(axis=1)
    conf = cosine_to_confidence(cos)
    out = {None: curve_from_confidences(conf[valid], scenario, None, skipped)}
    for r in levels if levels is not None else ds.spec.levels:
        m = valid & (ds.level == r)
        if m.any():
            out[r] = curve_from_confidences(conf[m], scenario, r)
    return out


# ---------------------------------------------------------------- identification


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    rules: tuple[str, ...]


def _aux_halves(aux_seeds: tuple[int, ...], rng) -> tuple[set, set]:
    if len(aux_seeds) < 2:
        raise SplitError("auxiliary rule needs at least 2 auxiliaries to split in half")
    perm = [aux_seeds[i] for i in rng.permutation(len(aux_seeds))]
    k = (len(perm) + 1) // 2
    return set(perm[:k]), set(perm[k:])


def _photo_split(pop: Population, photo_ids: tuple[int, ...], rng) -> tuple[set, set]:
    train, val = set(), set()
    ids = np.asarray(photo_ids)
    for i in np.unique(pop.identity[ids]):
        own = ids[pop.identity[ids] == i]
        if len(own) < 2:
            raise SplitError(f"target-photo rule needs >= 2 photos of identity {i}, found {len(own)}")
        own = own[rng.permutation(len(own))]
        k = int(np.clip(round(TRAIN_PHOTO_FRACTION * len(own)), 1, len(own) - 1))
        train.update(int(p) for p in own[:k])
        val.update(int(p) for p in own[k:])
    return train, val


def split_for(tm: ThreatModel, ds: DeidSet, pop: Population, level: int, seed: int = 0) -> Split:
    """Training and validation de-ids for one (threat model, style) cell.

    Unknown auxiliaries: train on one half of the auxiliaries, validate on the other.
    Unknown target photos: 70/30 photo split per identity.
    Unknown style: train on ``level``, validate on a 20% sample of the other levels.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    ok = ds.ok
    rules = []
    tr_aux = va_aux = None
    tr_ph = va_ph = None
    if not tm.knows_auxiliaries:
        tr_aux, va_aux = _aux_halves(ds.spec.aux_seeds, rng)
        rules.append("auxiliary")
    if not tm.knows_target_photos:
        tr_ph, va_ph = _photo_split(pop, ds.spec.photo_ids, rng)
        rules.append("target-photo")
    if not tm.knows_style:
        if len(ds.spec.levels) < 2:
            raise SplitError("style rule needs a sweep with at least 2 mixing levels")
        rules.append("style")
    if level not in ds.spec.levels:
        raise SplitError(f"level {level} is not in the sweep {ds.spec.levels}")

    def member(values, allowed):
        if allowed is None:
            return np.ones(len(values), bool)
        return np.isin(values, sorted(allowed))

    train = ok & (ds.level == level) & member(ds.aux_seed, tr_aux) & member(ds.photo_id, tr_ph)
    val_level = ds.level == level if tm.knows_style else ds.level != level
    val = ok & val_level & member(ds.aux_seed, va_aux) & member(ds.photo_id, va_ph)
    val_idx = np.flatnonzero(val)
    if not tm.knows_style:
        srng = np.random.default_rng(np.random.SeedSequence([seed, 0x20, level]))
        k = max(1, int(round(UNKNOWN_STYLE_SAMPLE * len(val_idx))))
        val_idx = np.sort(srng.choice(val_idx, size=k, replace=False))
    train_idx = np.flatnonzero(train)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise SplitError(f"{tm.name} at level {level}: empty {'training' if len(train_idx) == 0 else 'validation'} set")
    return Split(train_idx, val_idx, tuple(rules))


@dataclass
class IdentRow:
    model: str
    level: int
    T: float
    V: float
    n_train: int
    n_val: int
    val_pred: np.ndarray = field(repr=False, default=None)
    val_true: np.ndarray = field(repr=False, default=None)


def identify_attack(emb: AttackEmbeddings, ds: DeidSet, pop: Population, tm: ThreatModel, level: int,
                    seed: int = 0, cfg: OvoConfig | None = None) -> IdentRow:
    sp = split_for(tm, ds, pop, level, seed)
    labels = pop.identity[ds.photo_id]
    clf = train_ovo(emb.deid[sp.train], labels[sp.train], cfg)
    pred = clf.predict(emb.deid[sp.val])
    truth = labels[sp.val]
    V = float((pred == truth).mean() * 100)
    return IdentRow(tm.name, level, clf.train_accuracy, V, len(sp.train), len(sp.val), pred, truth)


def _cell(args):
    emb, ds, pop, tm, level, seed, cfg = args
    return identify_attack(emb, ds, pop, tm, level, seed, cfg)


def identification_grid(emb: AttackEmbeddings, ds: DeidSet, pop: Population,
                        models: tuple[ThreatModel, ...] = ALL_THREAT_MODELS, levels: tuple[int, ...] | None = None,
                        seed: int = 0, cfg: OvoConfig | None = None, workers: int = 1) -> list[IdentRow]:
    """Every (threat model, level) cell; ordering is fixed whatever ``workers`` is."""
    levels = ds.spec.levels if levels is None else levels
    jobs = [(emb, ds, pop, tm, r, seed, cfg) for tm in models for r in levels]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_cell, jobs))
    return [_cell(j) for j in jobs]


def permutation_null(pred: np.ndarray, truth: np.ndarray, n_perm: int = 1000, seed: int = 0) -> np.ndarray:
    """Validation accuracy (percent) with the true labels shuffled."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E2]))
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return np.array([(pred == truth[rng.permutation(len(truth))]).mean() * 100 for _ in range(n_perm)])


# ---------------------------------------------------------------- reports


def write_ident_csv(rows: list[IdentRow], path: str | Path, run_id: str = "") -> Path:
    """Table layout: one row per style, T and V columns per threat model."""
    models = sorted({r.model for r in rows})
    levels = sorted({r.level for r in rows})
    cell = {(r.model, r.level): r for r in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "method"] + [f"{m}_{k}" for m in models for k in ("T", "V")])
        for lv in levels:
            out = [run_id, f"style 0-{lv}"]
            for m in models:
                r = cell.get((m, lv))
                out += [f"{r.T:.1f}", f"{r.V:.1f}"] if r else ["", ""]
            w.writerow(out)
    return Path(path)


def write_verification_csv(curves: list[VerificationCurve], path: str | Path, run_id: str = "") -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "trial", "scenario", "level", "threshold", "rate", "n_pairs"])
        for c in curves:
            lv = "all" if c.level is None else c.level
            for t, rate in zip(c.thresholds, c.rates):
                w.writerow([run_id, c.trial, c.scenario, lv, int(t), f"{rate:.6f}", c.n_pairs])
    return Path(path)
