"""Run configuration: one strict JSON document for every phase.

Unknown keys and wrongly typed values are rejected with the dotted path of the
offending entry. Per-phase seeds not given explicitly are derived from the
global ``seed`` with a splitmix64 step, so any phase can be rerun on its own.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .lora import LoraConfig
from .model import ModelConfig
from .ppo import PPOConfig
from .train import TrainConfig, phase2_defaults

MASK64 = (1 << 64) - 1
SEED_STREAMS = {"phase1": 1, "phase2": 2, "lora": 3, "phase3": 4, "eval": 5}


class ConfigError(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, stream: str) -> int:
    """63-bit seed for ``stream``: ``splitmix64(seed ^ splitmix64(stream_index)) >> 1``."""
    if stream not in SEED_STREAMS:
        raise KeyError(f"unknown seed stream {stream!r}")
    return splitmix64((seed & MASK64) ^ splitmix64(SEED_STREAMS[stream])) >> 1


@dataclass
class RewardConfig:
    scorer: str = "reference"  # "reference" | "remote"
    lexicon_path: str | None = None
    stopwords_path: str | None = None
    negations_path: str | None = None
    endpoints: dict = field(default_factory=dict)  # kind -> URL, used when scorer == "remote"
    timeout: float = 10.0
    retries: int = 2
    topic: str = "instruction"  # what the scorers see as x: "instruction" | "hate_speech"
    max_workers: int = 1

    def __post_init__(self):
        if self.scorer not in ("reference", "remote"):
            raise ValueError("scorer must be 'reference' or 'remote'")
        if self.topic not in ("instruction", "hate_speech"):
            raise ValueError("topic must be 'instruction' or 'hate_speech'")
        unknown = set(self.endpoints) - {"stance", "quality", "toxicity"}
        if unknown:
            raise ValueError(f"unknown endpoint kind(s): {sorted(unknown)}")


@dataclass
class DataConfig:
    explanations: str | None = None
    counterspeech: str | None = None
    templates: str | None = None
    mixing: str = "uniform"
    train_split: str = "train"
    dev_split: str = "dev"
    test_split: str = "test"

    def __post_init__(self):
        if self.mixing not in ("uniform", "proportional"):
            raise ValueError("mixing must be 'uniform' or 'proportional'")


@dataclass
class EvalConfig:
    max_new_tokens: int = 64
    split: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: TrainConfig = field(default_factory=TrainConfig)
    phase2: TrainConfig = field(default_factory=phase2_defaults)
    lora: LoraConfig = field(default_factory=LoraConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lora_seed: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        cfg = _build(cls, obj, "", cls())
        raw = obj if isinstance(obj, dict) else {}
        for section in ("phase1", "phase2", "ppo"):
            if "seed" not in (raw.get(section) or {}):
                stream = "phase3" if section == "ppo" else section
                getattr(cfg, section).seed = derive_seed(cfg.seed, stream)
        if cfg.lora_seed is None:
            cfg.lora_seed = derive_seed(cfg.seed, "lora")
        return cfg

    @classmethod
    def from_json(cls, text: str, source: str = "<config>") -> "RunConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(obj)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse ``path`` (defaults when None) after applying top-level ``overrides``."""
    obj = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror or exc}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if overrides:
        obj = {**obj, **overrides}
    return RunConfig.from_dict(obj)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path, base=None):
    origin = typing.get_origin(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, base)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected object, got {value!r}")
        return dict(value)
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def _build(cls, obj, path, base=None):
    """Instantiate ``cls`` from ``obj``; omitted fields keep their value in ``base``."""
    where = path or "<root>"
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"unknown key '{path + '.' if path else ''}{key}'")
    kwargs = {
        k: _coerce(v, hints[k], f"{path + '.' if path else ''}{k}", getattr(base, k, None) if base is not None else None)
        for k, v in obj.items()
    }
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
