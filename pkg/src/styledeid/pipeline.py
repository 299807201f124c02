"""Stage runners behind the CLI: world -> deid -> attack -> utility -> report.

Every stage reads its inputs from the run directory, checks they came from
the same run id, and writes deterministic artifacts. Wall-clock timings are
kept apart in ``timings.json`` so the rest of the tree can be compared byte
for byte between runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import attacks, deid, utility
from .artifacts import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .inversion import FeatureExtractor, save_encoder, train_encoder
from .recognizer import train_embedder, verification_auc
from .synthesis import Generator
from .world import (AttributeModel, Population, evaluate_extractor, make_gallery,
                    make_population, train_attribute_extractor)
from .world import write_manifest as write_population_manifest

log = logging.getLogger(__name__)

BUDGET_SECONDS = 15 * 60
EMBEDDER_GALLERY_SEED = 1
EXTRACTOR_GALLERY_SEED = 2


class DependencyError(RuntimeError):
    """An upstream artifact is missing or belongs to another run."""


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Path, producer: str, run_id: str) -> None:
    if not path.exists():
        raise DependencyError(f"missing {path}; run `styledeid {producer}` first")
    stamp = path.parent / "stage.json"
    if stamp.exists():
        got = json.loads(stamp.read_text()).get("run_id")
        if got != run_id:
            raise DependencyError(f"{path} belongs to run {got}, not {run_id}; rerun `styledeid {producer}`")


def _stamp(stage_dir: Path, cfg: RunConfig, **extra) -> None:
    _json_dump({"run_id": cfg.run_id, **extra}, stage_dir / "stage.json")


def _record_time(out: Path, stage: str, seconds: float) -> None:
    path = out / "timings.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[stage] = round(seconds, 3)
    _json_dump(data, path)


def _seed(cfg: RunConfig, *tags: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, *tags]).generate_state(1)[0])


def init_run(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    # only what can change an output, so two runs of one config compare byte for byte
    (out / "config.yaml").write_text(dump_config(cfg, invocation=False))
    _json_dump({"run_id": cfg.run_id}, out / "run.json")
    return out


# ---------------------------------------------------------------- world


def save_population(pop: Population, path: Path, run_id: str) -> None:
    arrays = {"identity_blocks": pop.identity_blocks, "anchors": pop.anchors, "identity": pop.identity,
              "photo_index": pop.photo_index, "photo_seed": pop.photo_seed, "noise_seed": pop.noise_seed,
              "packs": pop.packs, "images": pop.images}
    arrays.update({f"attr.{k}": v for k, v in pop.attributes.items()})
    m = pop.attr_model
    arrays.update({f"model.{k}": v for k, v in m.state().items() if isinstance(v, np.ndarray)})
    header = {"kind": "population", "run_id": run_id, "config": asdict(pop.config), "delta_id": pop.delta_id,
              "coarse_split": m.coarse_split}
    save_checkpoint(path, header, arrays)


def load_population(path: Path) -> Population:
    from .world import WorldConfig

    header, a = load_checkpoint(path)
    model = AttributeModel(coarse_split=header["coarse_split"],
                           **{k[6:]: v for k, v in a.items() if k.startswith("model.")})
    attrs = {k[5:]: v for k, v in a.items() if k.startswith("attr.")}
    return Population(WorldConfig(**header["config"]), a["identity_blocks"], a["anchors"], header["delta_id"],
                      a["identity"], a["photo_index"], a["photo_seed"], a["noise_seed"], a["packs"], a["images"],
                      attrs, model)


def run_world(cfg: RunConfig) -> Population:
    out = init_run(cfg)
    t0 = time.perf_counter()
    d = out / "world"
    d.mkdir(exist_ok=True)
    g = Generator(cfg.generator)
    g.save_fingerprint(d / "generator.json")
    pop = make_population(g, cfg.world_config())
    save_population(pop, d / "population.ckpt", cfg.run_id)
    write_population_manifest(pop, d, cfg.run_id)
    _stamp(d, cfg, n_photos=len(pop), delta_id=pop.delta_id)
    _record_time(out, "world", time.perf_counter() - t0)
    return pop


def _load_world(cfg: RunConfig) -> tuple[Generator, Population]:
    d = Path(cfg.out) / "world"
    _require(d / "population.ckpt", "world", cfg.run_id)
    return Generator.from_fingerprint(d / "generator.json"), load_population(d / "population.ckpt")


# ---------------------------------------------------------------- deid


def save_deid(ds: deid.DeidSet, path: Path, run_id: str) -> None:
    arrays = {"photo_id": ds.photo_id, "aux_seed": ds.aux_seed, "level": ds.level,
              "ok": ds.ok.astype(np.uint8), "images": ds.images, "packs": ds.packs, "inverted": ds.inverted}
    header = {"kind": "deid", "run_id": run_id, "spec": asdict(ds.spec), "config_hash": ds.config_hash,
              "inverted_sha256": ds.inverted_sha256, "inversion_report": ds.inversion_report}
    save_checkpoint(path, header, arrays)


def load_deid(path: Path) -> deid.DeidSet:
    header, a = load_checkpoint(path)
    spec = deid.SweepSpec(**{k: tuple(v) for k, v in header["spec"].items()})
    status = np.where(a["ok"].astype(bool), "ok", "failed")
    return deid.DeidSet(spec, header["config_hash"], a["photo_id"], a["aux_seed"], a["level"], status, a["images"],
                        a["packs"], a["inverted"], header["inverted_sha256"], header["inversion_report"])


def run_deid(cfg: RunConfig) -> deid.DeidSet:
    out = Path(cfg.out)
    g, pop = _load_world(cfg)
    t0 = time.perf_counter()
    d = out / "deid"
    d.mkdir(exist_ok=True)
    enc = train_encoder(g, cfg.encoder.n_samples, cfg.encoder_config())
    save_encoder(enc, d / "encoder.ckpt")
    spec = deid.default_sweep(pop, g.n_layers, cfg.sweep.n_aux, cfg.seed, cfg.sweep.levels)
    ds = deid.batch_generate(g, enc, FeatureExtractor(), pop, spec, cfg.inversion, cfg.workers, cfg.run_id)
    save_deid(ds, d / "deid.ckpt", cfg.run_id)
    deid.write_manifest(ds, pop, d, cfg.run_id)
    report = {**ds.inversion_report,
              "encoder_val_l2": enc.report["val_l2"], "encoder_mean_predictor_l2": enc.report["mean_predictor_l2"]}
    _stamp(d, cfg, inversion=report)
    _record_time(out, "deid", time.perf_counter() - t0)
    return ds


def _load_deid(cfg: RunConfig) -> deid.DeidSet:
    d = Path(cfg.out) / "deid"
    _require(d / "deid.ckpt", "deid", cfg.run_id)
    return load_deid(d / "deid.ckpt")


# ---------------------------------------------------------------- attack


def _mean_curve(curves: list[attacks.VerificationCurve]) -> attacks.VerificationCurve:
    c0 = curves[0]
    rates = np.mean([c.rates for c in curves], axis=0)
    return attacks.VerificationCurve(c0.scenario, c0.level, c0.thresholds, rates,
                                     int(sum(c.n_pairs for c in curves)), trial="mean")


def _cell(args):
    emb, ds, pop, tm, r, seed, ovo = args
    try:
        return attacks.identify_attack(emb, ds, pop, tm, r, seed, ovo)
    except attacks.SplitError as exc:
        return exc


def _identify_cells(emb, ds, pop, models, levels, seed, cfg: RunConfig) -> list[attacks.IdentRow]:
    """Every (threat model, level) cell in a fixed order, spread over ``cfg.workers`` processes."""
    # workers only need the labels of the de-id set, not its images
    slim = dataclasses.replace(ds, images=ds.images[:0], packs=ds.packs[:0])
    jobs = [(emb, slim, pop, tm, r, seed, cfg.ovo_config()) for tm in models for r in levels]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    rows = []
    for (_, _, _, tm, r, _, _), res in zip(jobs, results):
        if isinstance(res, attacks.SplitError):
            log.warning("skipping %s at level %d: %s", tm.name, r, res)
        else:
            rows.append(res)
    return rows


def run_attack(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    g, pop = _load_world(cfg)
    base = _load_deid(cfg)
    t0 = time.perf_counter()
    d = out / "attack"
    d.mkdir(exist_ok=True)
    models = tuple(attacks.threat_model(m) for m in cfg.attack.threat_models)

    gallery = make_gallery(g, pop, cfg.embedder.gallery_photos, seed=EMBEDDER_GALLERY_SEED)
    e = train_embedder(gallery.images, gallery.identity, cfg.embedder_config())
    e.save(d / "embedder.ckpt")
    clean = e.embed(pop.images)
    auc = verification_auc(clean, pop.identity)

    levels = base.spec.levels
    chance = 100.0 / pop.config.n_identities
    curves, rows, trials = [], [], []
    nulls = []
    for t in range(cfg.attack.trials):
        if t == 0:
            ds = base
        else:
            spec = deid.default_sweep(pop, g.n_layers, cfg.sweep.n_aux, cfg.seed, cfg.sweep.levels, trial=t)
            ds = deid.resweep(g, base, spec, cfg.inversion.noise_seed)
        emb = attacks.AttackEmbeddings(attacks.embed_all(e, ds, pop).deid, clean)
        seed = _seed(cfg, 0xA7, t)
        rec = {"trial": t, "aux_seeds": list(ds.spec.aux_seeds), "verification": {}, "identification": {}}
        for sc in cfg.attack.scenarios:
            per = attacks.verify_attack(emb, ds, pop, sc, seed)
            for c in per.values():
                c.trial = str(t)
                curves.append(c)
            rec["verification"][str(sc)] = {("all" if k is None else str(k)): [float(x) for x in c.rates]
                                            for k, c in per.items()}
        grid = _identify_cells(emb, ds, pop, models, levels, seed, cfg)
        for row in grid:
            rows.append((t, row))
            rec["identification"].setdefault(row.model, {})[str(row.level)] = {
                "T": row.T, "V": row.V, "n_train": row.n_train, "n_val": row.n_val}
        m7 = next((row for row in grid if row.model == "m7" and row.level == min(levels)), None)
        if m7 is not None:
            nulls.append(attacks.permutation_null(m7.val_pred, m7.val_true, cfg.attack.n_perm, seed))
        trials.append(rec)

    summary = {"run_id": cfg.run_id, "clean_auc": auc, "chance": chance, "levels": list(levels),
               "threat_models": [m.name for m in models], "scenarios": list(cfg.attack.scenarios), "trials": trials}
    if nulls and len(nulls) == cfg.attack.trials:
        mean_null = np.mean(nulls, axis=0)
        summary["m7_null"] = {"level": int(min(levels)), "lo": float(np.quantile(mean_null, 0.025)),
                              "hi": float(np.quantile(mean_null, 0.975)), "n_perm": cfg.attack.n_perm}
    _json_dump(summary, d / "attack.json")

    # tables: means over trials, plus every trial in long form
    mean_rows = []
    for tm in models:
        for r in levels:
            cell = [row for _, row in rows if row.model == tm.name and row.level == r]
            if cell:
                mean_rows.append(attacks.IdentRow(tm.name, r, float(np.mean([c.T for c in cell])),
                                                  float(np.mean([c.V for c in cell])),
                                                  cell[0].n_train, cell[0].n_val))
    attacks.write_ident_csv(mean_rows, d / "identification.csv", cfg.run_id)
    with open(d / "identification_trials.csv", "w") as fh:
        fh.write("run_id,trial,model,level,T,V,n_train,n_val\n")
        for t, row in rows:
            fh.write(f"{cfg.run_id},{t},{row.model},{row.level},{row.T:.4f},{row.V:.4f},{row.n_train},{row.n_val}\n")
    for sc in cfg.attack.scenarios:
        for key in [None, *levels]:
            group = [c for c in curves if c.scenario == sc and c.level == key]
            if len(group) == cfg.attack.trials:
                curves.append(_mean_curve(group))
    attacks.write_verification_csv(curves, d / "verification.csv", cfg.run_id)
    _stamp(d, cfg)
    _record_time(out, "attack", time.perf_counter() - t0)
    return summary


# ---------------------------------------------------------------- utility


def run_utility(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    g, pop = _load_world(cfg)
    ds = _load_deid(cfg)
    t0 = time.perf_counter()
    d = out / "utility"
    d.mkdir(exist_ok=True)
    gallery = make_gallery(g, pop, cfg.extractor.gallery_photos, seed=EXTRACTOR_GALLERY_SEED)
    ext = train_attribute_extractor(gallery.images, gallery.attributes, cfg.extractor_config())
    ext.report.update(evaluate_extractor(ext, pop.float_images(), pop.attributes))
    ext.save(d / "extractor.ckpt")
    rows = utility.utility_sweep(ext, ds, pop)
    utility.write_utility_csv(rows, d / "utility.csv", cfg.run_id)
    summary = {"run_id": cfg.run_id, "coarse_split": pop.config.coarse_split,
               "extractor": {k: v for k, v in ext.report.items() if k != "train_loss"},
               "rows": [asdict(r) for r in rows]}
    _json_dump(summary, d / "utility.json")
    _stamp(d, cfg)
    _record_time(out, "utility", time.perf_counter() - t0)
    return summary


# ---------------------------------------------------------------- report


def _spearman(x, y) -> float:
    if np.ptp(np.asarray(x, float)) == 0 or np.ptp(np.asarray(y, float)) == 0:
        return float("nan")
    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else float("nan")


def _check(name: str, passed: bool | None, detail: str, **values) -> dict:
    status = "SKIPPED" if passed is None else ("PASS" if passed else "FAIL")
    return {"property": name, "status": status, "detail": detail, **values}


def evaluate_properties(cfg: RunConfig, attack: dict, util: dict, deid_stage: dict) -> list[dict]:
    checks = []
    levels = attack["levels"]
    multi = len(levels) >= 2
    skip = "single mixing level: trend undefined"
    trials = attack["trials"]

    inv = deid_stage.get("inversion", {})
    r, m = inv.get("frac_ratio_le_0.1"), inv.get("frac_monotone")
    checks.append(_check("inversion quality", None if r is None else (r >= 0.9 and m == 1.0),
                         "optimized loss <= 0.1 x encoder loss in >= 90% of world photos; monotone best-loss traces",
                         frac_ratio_le_0_1=r, frac_monotone=m))

    ext_rows = [row for row in util["rows"] if row["source"] == "extractor"]
    orc_rows = [row for row in util["rows"] if row["source"] == "oracle"]
    k = util["coarse_split"]
    if multi and ext_rows:
        rates = [row["rates"]["gender"] for row in ext_rows]
        rho = _spearman([row["level"] for row in ext_rows], rates)
        enough = min(row["n_pairs"] for row in ext_rows) >= 200
        checks.append(_check("utility monotonicity (extractor gender)", rho >= 0.9 and enough,
                             "Spearman(r, gender match) >= 0.9 on >= 200 pairs per level", spearman=rho, rates=rates))
    else:
        checks.append(_check("utility monotonicity (extractor gender)", None, skip))
    high = [row for row in orc_rows if row["level"] >= k - 1]
    checks.append(_check("oracle coarse/fine step", all(row["rates"]["gender"] == 100.0 for row in high) if high
                         else None, "oracle gender match is 100% at every r >= k-1",
                         rates={row["level"]: row["rates"]["gender"] for row in orc_rows}))

    def mean_over_trials(f):
        return np.mean([[f(tr, r) for r in levels] for tr in trials], axis=0)

    if multi and "1" in trials[0]["verification"]:
        att = mean_over_trials(lambda tr, r: 1.0 - tr["verification"]["1"][str(r)][50])
        rho = _spearman(levels, att)
        checks.append(_check("privacy monotonicity (verification)", rho >= 0.8,
                             "Spearman(r, attack success at 50, scenario 1) >= 0.8, mean of trials",
                             spearman=rho, values=att.tolist()))
    else:
        checks.append(_check("privacy monotonicity (verification)", None, skip))
    if multi and "m3" in attack["threat_models"]:
        v3 = mean_over_trials(lambda tr, r: tr["identification"]["m3"][str(r)]["V"])
        rho = _spearman(levels, v3)
        checks.append(_check("privacy monotonicity (identification m3)", rho >= 0.8,
                             "Spearman(r, V under m3) >= 0.8, mean of trials", spearman=rho, values=v3.tolist()))
    else:
        checks.append(_check("privacy monotonicity (identification m3)", None, skip))

    if {"1", "2"} <= set(trials[0]["verification"]):
        s1 = np.mean([tr["verification"]["1"]["all"] for tr in trials], axis=0)
        s2 = np.mean([tr["verification"]["2"]["all"] for tr in trials], axis=0)
        n_ok = int((s2 >= s1).sum())
        checks.append(_check("scenario ordering", n_ok >= 95, "scenario 2 curve >= scenario 1 on >= 95 of 101 "
                             "thresholds, mean of trials", thresholds_ok=n_ok))
    else:
        checks.append(_check("scenario ordering", None, "needs both scenarios"))

    if {"m3", "m7"} <= set(attack["threat_models"]):
        v3 = mean_over_trials(lambda tr, r: tr["identification"]["m3"][str(r)]["V"])
        v7 = mean_over_trials(lambda tr, r: tr["identification"]["m7"][str(r)]["V"]) if multi else None
        if v7 is None:
            checks.append(_check("knowledge ordering", None, "m7 needs at least 2 mixing levels"))
        else:
            checks.append(_check("knowledge ordering", bool(np.all(v3 >= v7 - 2.0)),
                                 "mean V(m3) >= mean V(m7) - 2 at every style", m3=v3.tolist(), m7=v7.tolist()))
    else:
        checks.append(_check("knowledge ordering", None, "needs m3 and m7"))

    null = attack.get("m7_null")
    if null is not None:
        v = float(np.mean([tr["identification"]["m7"][str(null["level"])]["V"] for tr in trials]))
        checks.append(_check("chance floor", null["lo"] <= v <= null["hi"],
                             f"mean V(m7) at r={null['level']} inside the 95% permutation band",
                             V=v, band=[null["lo"], null["hi"]], chance=attack["chance"]))
    else:
        checks.append(_check("chance floor", None, "needs m7 at level 0 with every trial"))

    checks.append(_check("recognizer sanity", attack["clean_auc"] >= 0.95, "clean-photo verification AUC >= 0.95",
                         auc=attack["clean_auc"]))
    return checks


def artifact_digest(out: Path) -> dict[str, str]:
    """sha256 of every artifact except the timing log and the report itself."""
    skip = {"timings.json", "report.json"}
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name not in skip}


def run_report(cfg: RunConfig) -> tuple[list[dict], dict]:
    out = Path(cfg.out)
    for stage, producer in (("attack", "attack"), ("utility", "utility"), ("deid", "deid")):
        _require(out / stage / "stage.json", producer, cfg.run_id)
    _require(out / "attack" / "attack.json", "attack", cfg.run_id)
    _require(out / "utility" / "utility.json", "utility", cfg.run_id)
    attack = json.loads((out / "attack" / "attack.json").read_text())
    util = json.loads((out / "utility" / "utility.json").read_text())
    deid_stage = json.loads((out / "deid" / "stage.json").read_text())
    checks = evaluate_properties(cfg, attack, util, deid_stage)
    timings_path = out / "timings.json"
    timings = json.loads(timings_path.read_text()) if timings_path.exists() else {}
    total = sum(v for k, v in timings.items() if k in ("world", "deid", "attack", "utility"))
    budget = {"property": "pipeline budget", "status": "PASS" if total <= BUDGET_SECONDS else "FAIL",
              "detail": f"world+deid+attack+utility took {total:.0f}s against {BUDGET_SECONDS}s", "seconds": total}
    report = {"run_id": cfg.run_id, "properties": checks, "artifacts": artifact_digest(out)}
    _json_dump(report, out / "report.json")
    timings["budget"] = budget
    _json_dump(timings, timings_path)
    return checks + [budget], report
