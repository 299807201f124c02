"""Declarative run configuration: YAML in, validated dataclass out, hashed to a run id."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attacks import THREAT_TABLE
from .inversion import EncoderConfig, InversionConfig
from .recognizer import EmbedderConfig, OvoConfig
from .synthesis import GeneratorConfig
from .world import ExtractorConfig, WorldConfig


class ConfigError(ValueError):
    """Bad configuration; carries the offending field and source line when known."""

    def __init__(self, message: str, field: str = "", line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class EncoderSection:
    n_samples: int = 2000
    epochs: int = EncoderConfig.epochs
    lr: float = EncoderConfig.lr
    batch_size: int = EncoderConfig.batch_size
    width: int = EncoderConfig.width


@dataclass(frozen=True)
class EmbedderSection:
    gallery_photos: int = 40
    epochs: int = EmbedderConfig.epochs
    lr: float = EmbedderConfig.lr
    batch_size: int = EmbedderConfig.batch_size
    dim: int = EmbedderConfig.dim
    width: int = EmbedderConfig.width


@dataclass(frozen=True)
class ExtractorSection:
    gallery_photos: int = 10
    epochs: int = ExtractorConfig.epochs
    lr: float = ExtractorConfig.lr
    batch_size: int = ExtractorConfig.batch_size
    width: int = ExtractorConfig.width


@dataclass(frozen=True)
class SweepSection:
    levels: tuple[int, ...] | None = None      # None: 0..L-2
    n_aux: int = 3


@dataclass(frozen=True)
class AttackSection:
    threat_models: tuple[str, ...] = tuple(THREAT_TABLE)
    scenarios: tuple[int, ...] = (1, 2)
    trials: int = 5
    n_perm: int = 1000
    ovo_lam: float = OvoConfig.lam
    ovo_epochs: int = OvoConfig.epochs
    ovo_lr: float = OvoConfig.lr


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    inversion: InversionConfig = field(default_factory=lambda: InversionConfig(max_iters=150))
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    attack: AttackSection = field(default_factory=AttackSection)
    workers: int = 1
    out: str = "runs/default"

    # ---- derived component configs; the global seed feeds every stochastic stage

    def world_config(self) -> WorldConfig:
        return dataclasses.replace(self.world, seed=self.seed)

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(epochs=e.epochs, lr=e.lr, batch_size=e.batch_size, seed=self.seed, width=e.width,
                             coarse_layers=self.world.coarse_split)

    def embedder_config(self) -> EmbedderConfig:
        e = self.embedder
        return EmbedderConfig(epochs=e.epochs, lr=e.lr, batch_size=e.batch_size, seed=self.seed, dim=e.dim,
                              width=e.width)

    def extractor_config(self) -> ExtractorConfig:
        e = self.extractor
        return ExtractorConfig(epochs=e.epochs, lr=e.lr, batch_size=e.batch_size, seed=self.seed, width=e.width)

    def ovo_config(self) -> OvoConfig:
        a = self.attack
        return OvoConfig(lam=a.ovo_lam, epochs=a.ovo_epochs, lr=a.ovo_lr)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def run_id(self) -> str:
        """Hash of everything that can change an output; ``out`` and ``workers`` cannot."""
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- parsing

_SECTIONS = {
    "generator": GeneratorConfig,
    "world": WorldConfig,
    "encoder": EncoderSection,
    "inversion": InversionConfig,
    "embedder": EmbedderSection,
    "extractor": ExtractorSection,
    "sweep": SweepSection,
    "attack": AttackSection,
}
_SCALARS = {"seed": int, "workers": int, "out": str}
# per-section knobs owned by the global seed or by another section
_DERIVED = {"world": {"seed"}}


def _key_lines(node, prefix="") -> dict[str, int]:
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            name = f"{prefix}{k.value}"
            lines[name] = k.start_mark.line + 1
            lines.update(_key_lines(v, name + "."))
    return lines


def _coerce(value: Any, typ: Any, name: str, line: int | None) -> Any:
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    t = t.replace(" ", "")
    if value is None and "None" in t:
        return None
    if t.startswith("tuple"):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", name, line)
        inner = int if "int" in t else str
        return tuple(_coerce(v, inner.__name__, name, line) for v in value)
    if t in ("int",) or t.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", name, line)
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", name, line)
        return float(value)
    if t == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", name, line)
        return value
    return value


def _build(cls, data: dict, section: str, lines: dict[str, int]):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", section, lines.get(section))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{section}.{key}"
        if key not in fields or key in _DERIVED.get(section, ()):
            allowed = sorted(set(fields) - _DERIVED.get(section, set()))
            raise ConfigError(f"unknown key; allowed: {', '.join(allowed)}", name, lines.get(name))
        kwargs[key] = _coerce(value, fields[key].type, name, lines.get(name))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), section, lines.get(section)) from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: not valid YAML ({getattr(exc, 'problem', exc)})",
                          line=mark.line + 1 if mark else None) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping", line=1)
    lines = _key_lines(node)
    kwargs = {}
    for key, value in data.items():
        if key in _SCALARS:
            kwargs[key] = _coerce(value, _SCALARS[key].__name__, key, lines.get(key))
        elif key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value or {}, key, lines)
        else:
            allowed = sorted(set(_SCALARS) | set(_SECTIONS))
            raise ConfigError(f"unknown key; allowed: {', '.join(allowed)}", key, lines.get(key))
    cfg = RunConfig(**kwargs)
    validate(cfg, lines)
    return cfg


def validate(cfg: RunConfig, lines: dict[str, int] | None = None) -> None:
    lines = lines or {}
    n_layers = cfg.generator.n_layers
    if cfg.workers < 1:
        raise ConfigError("must be >= 1", "workers", lines.get("workers"))
    if not 1 <= cfg.world.coarse_split <= n_layers - 1:
        raise ConfigError(f"must lie in [1, {n_layers - 1}]", "world.coarse_split", lines.get("world.coarse_split"))
    levels = cfg.sweep.levels
    if levels is not None:
        bad = [r for r in levels if not 0 <= r <= n_layers - 1]
        if bad or not levels:
            raise ConfigError(f"levels must be a non-empty list within [0, {n_layers - 1}]", "sweep.levels",
                              lines.get("sweep.levels"))
    if cfg.sweep.n_aux < 1:
        raise ConfigError("must be >= 1", "sweep.n_aux", lines.get("sweep.n_aux"))
    for name in cfg.attack.threat_models:
        if name not in THREAT_TABLE:
            raise ConfigError(f"unknown threat model {name!r}; valid names: {', '.join(THREAT_TABLE)}",
                              "attack.threat_models", lines.get("attack.threat_models"))
    for s in cfg.attack.scenarios:
        if s not in (1, 2):
            raise ConfigError("scenarios are 1 and 2", "attack.scenarios", lines.get("attack.scenarios"))
    if cfg.attack.trials < 1:
        raise ConfigError("must be >= 1", "attack.trials", lines.get("attack.trials"))
    if cfg.embedder.gallery_photos < 4:
        raise ConfigError("must be >= 4", "embedder.gallery_photos", lines.get("embedder.gallery_photos"))
    if cfg.extractor.gallery_photos * cfg.world.n_identities < 200:
        raise ConfigError("extractor needs >= 200 labelled photos (gallery_photos x n_identities)",
                          "extractor.gallery_photos", lines.get("extractor.gallery_photos"))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc.strerror}") from exc
    return parse_config(text, str(p))


def dump_config(cfg: RunConfig, invocation: bool = True) -> str:
    """YAML that parses back to ``cfg``; ``invocation=False`` leaves out ``out`` and ``workers``."""
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    d = plain(cfg.to_dict())
    for section, keys in _DERIVED.items():
        for k in keys:
            d[section].pop(k, None)
    if not invocation:
        d.pop("out")
        d.pop("workers")
    return yaml.safe_dump(d, sort_keys=True)
