"""Experiment configuration: JSON with includes, strict field validation and a canonical digest.

A config file is a JSON object. An optional ``"include"`` list names other
config files (paths relative to the including file) that are deep-merged
first, in order, with the including file winning. The merged document is
validated against the dataclasses below; every error carries the dotted path
of the offending field, e.g. ``methods[1].lr``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .adaptation import AdaptationRecipe
from .data import ScenarioSpec
from .errors import ConfigError, FssfdaError
from .models import ModelSpec, SourceRecipe
from .selection import CRITERIA, SweepGrid
from .synthetic import SyntheticConfig
from .transforms import AugmentConfig

DATA_ENV = "FSSFDA_DATA_DIR"
ORIGIN_CHOICES = ("source", "generic")


@dataclass
class DataConfig:
    root: str = ""
    domains: list[str] = field(default_factory=list)
    # explicit (source, target) pairs; default is every ordered pair of distinct domains
    pairs: list[list[str]] | None = None
    split_ratio: float = 0.8
    # when set and ``root`` is missing, the synthetic generator writes the dataset there
    synthetic: dict | None = None


@dataclass
class SourceConfig:
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64
    seed: int = 0
    augmentation: bool = True

    def recipe(self) -> SourceRecipe:
        return SourceRecipe(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, augmentation=self.augmentation)


@dataclass
class LrSearchConfig:
    criterion: str = "val_loss"
    shots: int = 3
    grid: dict = field(default_factory=lambda: {"mode": "absolute", "values": [1e-6, 1e-5, 1e-4, 1e-3]})


@dataclass
class SensitivityConfig:
    method: str = "PL_IM"
    grid: dict = field(default_factory=lambda: {"mode": "multiplier", "values": [0.1, 0.5, 1.0, 5.0, 10.0]})
    temperature: float = 0.05
    shots: int = 3


@dataclass
class ExperimentConfig:
    data: DataConfig
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    methods: list[AdaptationRecipe] = field(default_factory=lambda: [AdaptationRecipe("FT")])
    shots: list[int] = field(default_factory=lambda: [1, 3])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    model: ModelSpec = field(default_factory=ModelSpec)
    source: SourceConfig = field(default_factory=SourceConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    no_adapt: bool = True
    origins: list[str] = field(default_factory=lambda: ["source"])
    lr_search: LrSearchConfig | None = None
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    output_dir: str = "runs"
    workers: int = 0
    # filled in by load_config; not part of the digest
    base_dir: str = field(default=".", compare=False)

    # ------------------------------------------------------------ derived

    @property
    def root(self) -> Path:
        return resolve_path(self.data.root or os.environ.get(DATA_ENV, ""), self.base_dir)

    @property
    def out(self) -> Path:
        return resolve_path(self.output_dir, self.base_dir)

    def pairs(self) -> list[tuple[str, str]]:
        if self.data.pairs is not None:
            return [(s, t) for s, t in self.data.pairs]
        return [(s, t) for s in self.data.domains for t in self.data.domains if s != t]

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        return parse_config({**self.to_dict(), "seeds": list(seeds)}, self.base_dir)

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "scenario": self.scenario.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "shots": list(self.shots),
            "seeds": list(self.seeds),
            "model": asdict(self.model),
            "source": asdict(self.source),
            "augment": _augment_dict(self.augment),
            "no_adapt": self.no_adapt,
            "origins": list(self.origins),
            "lr_search": asdict(self.lr_search) if self.lr_search else None,
            "sensitivity": asdict(self.sensitivity),
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    def digest(self) -> str:
        """sha256 of the canonical resolved config, ignoring where outputs go and how many workers run."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("workers")
        return canonical_digest(d)


def canonical_digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_path(p: str, base_dir: str | Path) -> Path:
    p = os.path.expandvars(os.path.expanduser(p))
    path = Path(p)
    return path if path.is_absolute() else Path(base_dir) / path


def _augment_dict(a: AugmentConfig) -> dict:
    d = asdict(a)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------- loading


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def read_with_includes(path: str | Path, _stack: tuple[Path, ...] = ()) -> dict:
    path = Path(path).resolve()
    if path in _stack:
        raise ConfigError(f"include cycle: {' -> '.join(str(p) for p in _stack + (path,))}")
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    includes = doc.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = _deep_merge(merged, read_with_includes(path.parent / inc, _stack + (path,)))
    return _deep_merge(merged, doc)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(read_with_includes(path), str(Path(path).resolve().parent))


def _check_keys(d: Any, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{where}.{k}: unknown field" if where else f"{k}: unknown field")
    return d


def _build(cls, d: Any, where: str, convert=None):
    allowed = {f.name for f in fields(cls)}
    _check_keys(d, allowed, where)
    kwargs = dict(d)
    try:
        if convert:
            kwargs = convert(kwargs)
        return cls(**kwargs)
    except FssfdaError as e:
        raise ConfigError(f"{where}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _int_list(v: Any, where: str, positive: bool = False, min_value: int | None = None) -> list[int]:
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{where}: expected a non-empty list of integers")
    for i, x in enumerate(v):
        if not isinstance(x, int) or isinstance(x, bool):
            raise ConfigError(f"{where}[{i}]: expected an integer, got {x!r}")
        if positive and x < 1:
            raise ConfigError(f"{where}[{i}]: must be positive, got {x}")
        if min_value is not None and x < min_value:
            raise ConfigError(f"{where}[{i}]: must be >= {min_value}, got {x}")
    if len(set(v)) != len(v):
        raise ConfigError(f"{where}: values must be distinct")
    return list(v)


def _grid(d: Any, where: str) -> SweepGrid:
    _check_keys(d, {"mode", "values"}, where)
    try:
        return SweepGrid(d.get("mode", "absolute"), tuple(d.get("values", ())))
    except FssfdaError as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(doc: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    """Validate a merged config document."""
    top = {f.name for f in fields(ExperimentConfig)} - {"base_dir"}
    _check_keys(doc, top, "")
    if "data" not in doc:
        raise ConfigError("data: required field missing")
    data = _build(DataConfig, doc["data"], "data")
    if not isinstance(data.domains, list) or len(data.domains) < 2:
        raise ConfigError("data.domains: need at least two domain names")
    if not 0 < data.split_ratio < 1:
        raise ConfigError(f"data.split_ratio: must lie in (0, 1), got {data.split_ratio}")
    if data.pairs is not None:
        for i, pair in enumerate(data.pairs):
            if not (isinstance(pair, list) and len(pair) == 2 and pair[0] != pair[1]):
                raise ConfigError(f"data.pairs[{i}]: expected [source, target] with distinct names")
            for name in pair:
                if name not in data.domains:
                    raise ConfigError(f"data.pairs[{i}]: {name!r} is not in data.domains")
    if data.synthetic is not None:
        _build(SyntheticConfig, data.synthetic, "data.synthetic", _synthetic_kwargs)

    kw: dict[str, Any] = {"data": data, "base_dir": str(base_dir)}
    if "scenario" in doc:
        sc = _check_keys(doc["scenario"], {"kind", "n_known", "known_classes", "imbalance", "seed"}, "scenario")
        try:
            kw["scenario"] = ScenarioSpec.from_dict(sc)
        except FssfdaError as e:
            raise ConfigError(f"scenario: {e}") from e
    if "methods" in doc:
        if not isinstance(doc["methods"], list) or not doc["methods"]:
            raise ConfigError("methods: expected a non-empty list")
        kw["methods"] = [_build(AdaptationRecipe, m, f"methods[{i}]", _recipe_kwargs) for i, m in enumerate(doc["methods"])]
        labels = [m.label for m in kw["methods"]]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"methods: labels must be distinct, got {labels}; set 'name' to tell recipes apart")
    if "shots" in doc:
        kw["shots"] = _int_list(doc["shots"], "shots", positive=True)
    if "seeds" in doc:
        kw["seeds"] = _int_list(doc["seeds"], "seeds", min_value=0)
    if "model" in doc:
        m = _check_keys(doc["model"], {"backbone_id", "bottleneck_dim", "pretrained_origin", "n_classes"}, "model")
        # n_classes comes from the data; the placeholder only satisfies ModelSpec's own checks
        kw["model"] = _build(ModelSpec, {"n_classes": 2, **m}, "model")
    if "source" in doc:
        kw["source"] = _build(SourceConfig, doc["source"], "source")
    if "augment" in doc:
        kw["augment"] = _build(AugmentConfig, doc["augment"], "augment", _tuple_fields("scale", "ratio"))
    for flag in ("no_adapt",):
        if flag in doc:
            if not isinstance(doc[flag], bool):
                raise ConfigError(f"{flag}: expected true or false")
            kw[flag] = doc[flag]
    if "origins" in doc:
        o = doc["origins"]
        if not isinstance(o, list) or not o or any(x not in ORIGIN_CHOICES for x in o) or len(set(o)) != len(o):
            raise ConfigError(f"origins: expected distinct values from {ORIGIN_CHOICES}, got {o!r}")
        kw["origins"] = list(o)
    if doc.get("lr_search") is not None:
        ls = _build(LrSearchConfig, doc["lr_search"], "lr_search")
        if ls.criterion != "val_loss":
            raise ConfigError("lr_search.criterion: few-shot lr search selects by val_loss")
        if ls.shots < 1:
            raise ConfigError("lr_search.shots: must be positive")
        _grid(ls.grid, "lr_search.grid")
        kw["lr_search"] = ls
    if "sensitivity" in doc:
        sv = _build(SensitivityConfig, doc["sensitivity"], "sensitivity")
        if not sv.temperature > 0:
            raise ConfigError("sensitivity.temperature: must be positive")
        _grid(sv.grid, "sensitivity.grid")
        kw["sensitivity"] = sv
    if "output_dir" in doc:
        if not isinstance(doc["output_dir"], str) or not doc["output_dir"]:
            raise ConfigError("output_dir: expected a non-empty path string")
        kw["output_dir"] = doc["output_dir"]
    if "workers" in doc:
        if not isinstance(doc["workers"], int) or doc["workers"] < 0:
            raise ConfigError("workers: expected a non-negative integer")
        kw["workers"] = doc["workers"]
    cfg = ExperimentConfig(**kw)
    if cfg.sensitivity.method not in [m.method for m in cfg.methods] + ["PL_IM"]:
        raise ConfigError(f"sensitivity.method: {cfg.sensitivity.method!r} is not among the configured methods")
    return cfg


def _recipe_kwargs(d: dict) -> dict:
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return d


def _tuple_fields(*names):
    def convert(d: dict) -> dict:
        for n in names:
            if n in d:
                d[n] = tuple(d[n])
        return d

    return convert


def _synthetic_kwargs(d: dict) -> dict:
    d = dict(d)
    if "domains" in d:
        d["domains"] = tuple(d["domains"])
    if "distractor_size" in d:
        d["distractor_size"] = tuple(d["distractor_size"])
    if "styles" in d:
        raise ConfigError("styles cannot be set from a config file")
    return d


def synthetic_config(cfg: ExperimentConfig) -> SyntheticConfig | None:
    if cfg.data.synthetic is None:
        return None
    return SyntheticConfig(**_synthetic_kwargs(cfg.data.synthetic))


def validate_domains(cfg: ExperimentConfig) -> None:
    """Every referenced domain must exist under the data root."""
    root = cfg.root
    for d in cfg.data.domains:
        if not (root / d).is_dir():
            raise ConfigError(f"data.domains: domain {d!r} not found under {root}")
