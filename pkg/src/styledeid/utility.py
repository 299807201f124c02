"""How much non-identity information survives de-identification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deid import DeidSet
from .world import CATEGORICAL, CONTINUOUS, AttributeExtractor, Population


def match_rate(a, b) -> float:
    """Percentage of positions where the two label sequences agree."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("match_rate needs at least one pair")
    return float((a == b).mean() * 100.0)


def diff_stats(a, b) -> tuple[float, float]:
    """Mean and population std of |a - b|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("diff_stats needs at least one pair")
    d = np.abs(a - b)
    return float(d.mean()), float(d.std())


@dataclass
class UtilityRow:
    source: str                  # "oracle" (ground truth on packs) or "extractor" (on images)
    level: int
    n_pairs: int
    rates: dict[str, float] = field(default_factory=dict)
    diffs: dict[str, tuple[float, float]] = field(default_factory=dict)
    incomplete: bool = False


def _row(source: str, level: int, before: dict, after: dict, mask: np.ndarray) -> UtilityRow:
    row = UtilityRow(source, level, int(mask.sum()))
    if not mask.any():
        row.incomplete = True
        return row
    for k in CATEGORICAL:
        if k in before and k in after:
            row.rates[k] = match_rate(before[k][mask], after[k][mask])
        else:
            row.incomplete = True
    for k in CONTINUOUS:
        if k in before and k in after:
            row.diffs[k] = diff_stats(before[k][mask], after[k][mask])
        else:
            row.incomplete = True
    return row


def utility_sweep(extractor: AttributeExtractor | None, ds: DeidSet, pop: Population) -> list[UtilityRow]:
    """Oracle and extractor rows for every mixing level of the sweep.

    Oracle rows compare ground-truth attributes of the mixed pack with those of
    the inverted target pack, so they isolate what mixing alone destroys.
    Extractor rows compare extractor readings of the de-identified image with
    readings of the original photo, the way an external service would.
    """
    if pop.attr_model is None:
        raise ValueError("population carries no attribute model; oracle rows need one")
    ok = ds.ok
    pos = {p: i for i, p in enumerate(ds.spec.photo_ids)}
    src = np.array([pos[int(p)] for p in ds.photo_id])
    packs = np.where(ok[:, None, None], ds.packs, 0.0)
    mixed = pop.attr_model.attributes(packs)
    inverted = pop.attr_model.attributes(np.nan_to_num(ds.inverted))
    inverted = {k: v[src] for k, v in inverted.items()}

    rows = []
    for r in ds.spec.levels:
        rows.append(_row("oracle", r, inverted, mixed, ok & (ds.level == r)))
    if extractor is not None:
        on_deid = {k: np.zeros(len(ds), v.dtype) for k, v in pop.attributes.items()}
        if ok.any():
            read = extractor(ds.images[ok].astype(np.float32) / 255.0)
            for k in on_deid:
                on_deid[k][ok] = read[k]
        on_photo = extractor(pop.float_images())
        on_photo = {k: v[ds.photo_id] for k, v in on_photo.items()}
        for r in ds.spec.levels:
            rows.append(_row("extractor", r, on_photo, on_deid, ok & (ds.level == r)))
    return rows


def write_utility_csv(rows: list[UtilityRow], path: str | Path, run_id: str = "") -> Path:
    """One row per (source, style); rate columns then mean/std columns."""
    header = ["run_id", "source", "method", "n_pairs", "incomplete"]
    header += [f"{k}_match" for k in CATEGORICAL]
    header += [f"{k}_{s}" for k in CONTINUOUS for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            out = [run_id, row.source, f"style 0-{row.level}", row.n_pairs, int(row.incomplete)]
            out += [f"{row.rates[k]:.2f}" if k in row.rates else "" for k in CATEGORICAL]
            for k in CONTINUOUS:
                out += [f"{v:.3f}" for v in row.diffs[k]] if k in row.diffs else ["", ""]
            w.writerow(out)
    return Path(path)
