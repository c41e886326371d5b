"""Experiment configuration: sectioned ``key = value`` files plus overrides.

Example::

    [experiment]
    seed = 13
    out_dir = runs/trap

    [generate]
    enabled = true
    n_topics = 20

    [tune]
    lambda = 0, 1, 11
    gamma_g = 0, 1, 2, 3

Overrides use ``section.key=value`` and always win over the file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decoder import DecodeConfig
from .errors import ConfigError
from .reranker import RerankWeights
from .trainer import TrainConfig
from .tuner import TuneSpec


@dataclass
class DataConfig:
    train: str = ""
    valid: str = ""
    dev: str = ""
    test: str = ""
    min_count: int = 2
    max_vocab: int = 0           # 0 = unlimited
    lowercase: bool = True
    length_filter: bool = False
    length_min: int = 6
    length_max: int = 18


@dataclass
class GenerateConfig:
    enabled: bool = False
    n_topics: int = 20
    n_pairs: int = 5000
    generic_rate: float = 0.4
    n_variants: int = 3
    n_valid: int = 250
    n_dev: int = 100
    n_test: int = 200


@dataclass
class ModelConfig:
    dim: int = 32
    depth: int = 2


@dataclass
class EvalConfig:
    smooth: bool = False
    distinct_denominator: str = "ngrams"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "run"
    threads: int = 1
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    rerank: RerankWeights = field(default_factory=RerankWeights)
    tune: TuneSpec = field(default_factory=TuneSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self, check_paths: bool = False) -> None:
        problems = []
        if self.threads < 1:
            problems.append("experiment.threads must be >= 1")
        if self.model.dim < 1 or self.model.depth < 1:
            problems.append("model.dim and model.depth must be >= 1")
        g = self.generate
        if g.enabled:
            if g.n_topics < 2:
                problems.append("generate.n_topics must be >= 2")
            if not 0.0 <= g.generic_rate < 1.0:
                problems.append("generate.generic_rate must lie in [0, 1)")
            if min(g.n_pairs, g.n_dev, g.n_test) < 1:
                problems.append("generate sizes must be >= 1")
        elif check_paths:
            for name in ("train", "dev", "test"):
                path = getattr(self.data, name)
                if not path:
                    problems.append(f"data.{name} is not set (or enable [generate])")
                elif not Path(path).is_file():
                    problems.append(f"data.{name}: no such file {path}")
        if self.eval.distinct_denominator not in ("ngrams", "tokens"):
            problems.append("eval.distinct_denominator must be 'ngrams' or 'tokens'")
        problems += [f"train: {p}" for p in self.train.validate()]
        problems += [f"decode: {p}" for p in self.decode.validate()]
        problems += [f"rerank: {p}" for p in self.rerank.validate()]
        problems += [f"tune: {p}" for p in self.tune.validate()]
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Stable hash of every setting that affects outputs."""
        d = self.to_dict()
        d.pop("threads", None)
        blob = json.dumps(d, sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


# section name -> attribute on ExperimentConfig ("" = top level)
SECTIONS = {
    "experiment": "",
    "data": "data",
    "generate": "generate",
    "model": "model",
    "train": "train",
    "decode": "decode",
    "rerank": "rerank",
    "tune": "tune",
    "eval": "eval",
}
# config-file key -> dataclass field, where they differ
ALIASES = {
    ("decode", "lambda"): "lam",
    ("rerank", "lambda"): "lam",
    ("tune", "lambda"): "lam",
}


def _coerce(raw: str, current, where: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(current) == 3 and isinstance(current[2], int) and not isinstance(current[0], int):
                lo, hi, steps = parts
                return (float(lo), float(hi), int(steps))
            return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def apply_setting(cfg: ExperimentConfig, section: str, key: str, raw: str) -> None:
    where = f"{section}.{key}"
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    target = cfg if not SECTIONS[section] else getattr(cfg, SECTIONS[section])
    name = ALIASES.get((section, key), key)
    known = {f.name for f in fields(target)}
    if name not in known or (section == "experiment" and name in SECTIONS.values()):
        raise ConfigError(f"unknown config key {where}")
    setattr(target, name, _coerce(raw, getattr(target, name), where))


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    problems = []
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        base = Path(path).resolve().parent
        for section in parser.sections():
            for key, raw in parser.items(section):
                try:
                    apply_setting(cfg, section, key, raw)
                except ConfigError as exc:
                    problems.extend(exc.violations)
        # relative data paths are taken relative to the config file
        for name in ("train", "valid", "dev", "test"):
            val = getattr(cfg.data, name)
            if val and not Path(val).is_absolute():
                setattr(cfg.data, name, str(base / val))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override {item!r} is not section.key=value")
            continue
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        try:
            apply_setting(cfg, section.strip(), key.strip(), raw)
        except ConfigError as exc:
            problems.extend(exc.violations)
    if problems:
        raise ConfigError(problems)
    return cfg


def stage_seed(seed: int, stage: str) -> int:
    """Stage-local seed derived from the experiment seed by stable hashing."""
    digest = hashlib.sha256(f"{seed}/{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")
