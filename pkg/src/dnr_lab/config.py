"""Experiment configuration: one JSON document, dotted-path overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .noise import NoiseSpec
from .objectives import DnrConfig
from .reranker import RerankerConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DataConfig:
    csv_path: str | None = None
    users: int = 200
    items: int = 500
    latent_dim: int = 8
    events_per_user: int = 60
    exposure_bias: float = 1.0
    noise_kind: str = "none"
    noise_scale: float = 0.0
    min_interactions: int = 20
    split_ratio: float = 0.8
    n: int = 50
    k: int = 6
    history: int = 20
    val_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.csv_path is None:
            if self.users < 10 or self.items < 10:
                raise ConfigError("data.users", "synthetic worlds need users and items >= 10")
            if self.latent_dim < 2:
                raise ConfigError("data.latent_dim", "must be >= 2")
        elif not Path(self.csv_path).is_file():
            raise ConfigError("data.csv_path", f"file not found: {self.csv_path}")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ConfigError("data.split_ratio", "must lie in (0, 1]")
        if self.n < 1 or not 1 <= self.k <= self.n:
            raise ConfigError("data.k", "need 1 <= k <= n")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("data.val_fraction", "must lie in [0, 1)")
        if self.noise_kind not in ("none", "gaussian", "uniform"):
            raise ConfigError("data.noise_kind", "must be none, gaussian or uniform")


@dataclass
class RetrieverConfig:
    dim: int = 16
    lr: float = 0.01
    negatives: int = 4
    epochs: int = 20
    batch_size: int = 256

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("retriever.dim", "must be >= 1")
        if self.lr < 0:
            raise ConfigError("retriever.lr", "must be >= 0")
        if self.negatives < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("retriever", "negatives and epochs must be >= 0, batch_size >= 1")


@dataclass
class OutputConfig:
    dir: str = "runs"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    reranker: RerankerConfig = field(default_factory=RerankerConfig)
    dnr: DnrConfig = field(default_factory=DnrConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.data.validate()
        self.retriever.validate()
        for section, obj in (("reranker", self.reranker), ("dnr", self.dnr)):
            try:
                obj.validate()
            except ConfigError:
                raise
            except ValueError as exc:
                msg = str(exc)
                head = msg.split(" ", 1)[0]
                raise ConfigError(head if head.startswith(section + ".") else section, msg) from None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["dnr"]["noise"] = d["dnr"].pop("heuristic")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @property
    def out_dir(self) -> Path:
        return Path(self.output.dir)


# JSON key -> dataclass field, where they differ
_RENAMES = {("dnr", "noise"): "heuristic"}
_NESTED = {(DnrConfig, "heuristic"): NoiseSpec}


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            if path.endswith("mmd_bandwidth") and value == "median":
                return value
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not path.endswith("mmd_bandwidth"):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        attr = _RENAMES.get((path, key), key)
        sub = f"{path}.{key}"
        if attr not in names:
            raise ConfigError(sub, "unknown key")
        nested = _NESTED.get((cls, attr))
        if nested is not None:
            setattr(obj, attr, _build(nested, value, sub))
        else:
            setattr(obj, attr, _coerce(value, getattr(obj, attr), sub))
    return obj


_SECTIONS = {
    "data": DataConfig,
    "retriever": RetrieverConfig,
    "reranker": RerankerConfig,
    "dnr": DnrConfig,
    "output": OutputConfig,
}


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
        setattr(cfg, key, _build(_SECTIONS[key], value, key))
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("<config>", f"file not found: {path}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<config>", f"invalid JSON: {exc}") from None
    return from_dict(raw)


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted keys (``dnr.noise.alpha``) on a raw config mapping."""
    out = copy.deepcopy(raw)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) < 2:
            raise ConfigError(dotted, "overrides need a section.key path")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(dotted, "cannot override inside a non-object value")
        node[parts[-1]] = value
    return out


def resolve(path=None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("<config>", f"file not found: {path}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON: {exc}") from None
    return from_dict(apply_overrides(raw, overrides or {}))
