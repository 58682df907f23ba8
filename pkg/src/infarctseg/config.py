"""Pipeline configuration: one JSON document holding every nested config."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

from .core import acute_remap
from .errors import ConfigurationError
from .evaluation import OutlierRuleConfig
from .network import NetworkConfig
from .overlay import OverlaySpec
from .preprocess import PreprocessConfig
from .training import TrainConfig

CACHE_ENV = "INFARCTSEG_CACHE_DIR"


@dataclass(frozen=True)
class PathsConfig:
    """Artifact locations; relative entries resolve against ``base``."""

    manifest: str = "data/manifest.json"
    preprocessed: str = "work/preprocessed"
    checkpoints: str = "work/checkpoints"
    predictions: str = "work/predictions"
    evaluation: str = "work/evaluation"
    reports: str = "work/reports"

    def resolve(self, name: str, base: Path) -> Path:
        if name == "preprocessed" and os.environ.get(CACHE_ENV):
            return Path(os.environ[CACHE_ENV])
        p = Path(getattr(self, name))
        return p if p.is_absolute() else base / p


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = PathsConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    network: NetworkConfig = NetworkConfig()
    train: TrainConfig = TrainConfig()
    evaluation: OutlierRuleConfig = OutlierRuleConfig()
    overlay: OverlaySpec = OverlaySpec()
    label_remap: dict = field(default_factory=acute_remap)
    base: Path = field(default=Path("."), compare=False)

    def path(self, name: str) -> Path:
        return self.paths.resolve(name, self.base)

    def to_json(self) -> dict:
        return {
            "paths": asdict(self.paths),
            "preprocess": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.preprocess).items()},
            "network": self.network.to_json(),
            "train": self.train.to_json(),
            "evaluation": self.evaluation.to_json(),
            "overlay": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.overlay).items()},
            "label_remap": {str(k): v for k, v in sorted(self.label_remap.items())},
        }

    @classmethod
    def from_json(cls, doc: dict, base: Path = Path(".")) -> "PipelineConfig":
        unknown = set(doc) - {"paths", "preprocess", "network", "train", "evaluation", "overlay", "label_remap"}
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
        try:
            remap = doc.get("label_remap")
            return cls(
                paths=PathsConfig(**doc.get("paths", {})),
                preprocess=PreprocessConfig(**doc.get("preprocess", {})),
                network=NetworkConfig.from_json(doc.get("network", {})),
                train=TrainConfig.from_json(doc.get("train", {})),
                evaluation=OutlierRuleConfig.from_json(doc.get("evaluation", {})),
                overlay=OverlaySpec(**doc.get("overlay", {})),
                label_remap=acute_remap() if remap is None else {int(k): int(v) for k, v in remap.items()},
                base=base,
            )
        except TypeError as e:
            # unexpected keyword in a nested section
            raise ConfigurationError(f"invalid config field: {e}") from None


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Set leaf fields from ``section.field=value`` strings (values parsed as JSON when possible)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form dotted.path=value")
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = parse_value(raw)
    return doc


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> PipelineConfig:
    if path is None:
        doc, base = PipelineConfig().to_json(), Path.cwd()
    else:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {p}") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{p}: invalid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{p}: top level must be an object")
        base = p.resolve().parent
    return PipelineConfig.from_json(apply_overrides(doc, overrides), base)


def with_paths(config: PipelineConfig, **kw) -> PipelineConfig:
    names = {f.name for f in fields(PathsConfig)}
    bad = set(kw) - names
    if bad:
        raise ConfigurationError(f"unknown path(s) {sorted(bad)}")
    return replace(config, paths=replace(config.paths, **kw))
