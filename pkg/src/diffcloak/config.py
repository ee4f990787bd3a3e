"""Experiment configuration: JSON-backed dataclasses, validation, hashing."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig
from .customize import DreamboothConfig
from .errors import ConfigError
from .model import ModelConfig


@dataclass
class CorpusSettings:
    identities: int = 16
    per_identity: int = 8
    image_size: int = 32
    corpus_seed: int = 0
    render_seed: int = 0


@dataclass
class ScheduleSettings:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelSettings:
    base_channels: int = 32
    embed_dim: int = 64
    num_heads: int = 1


@dataclass
class TrainSettings:
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 16


@dataclass
class EvalSettings:
    tau: float = 0.5
    sample_count: int = 16
    ddim_steps: int = 50
    heatmap_timestep: int = 500
    heatmap_resolution: int = 16
    prompts: tuple = ("a photo of sks person", "a dslr portrait of sks person")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    dreambooth: DreamboothConfig = field(default_factory=DreamboothConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.corpus.image_size,
                           base_channels=self.model.base_channels,
                           embed_dim=self.model.embed_dim,
                           num_heads=self.model.num_heads)


def _build(cls, data: dict, path: str, problems: list[str]):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"{path}{key}: unknown field")
            continue
        f = known[key]
        if dataclasses.is_dataclass(f.type if isinstance(f.type, type) else None) or (
                f.name in ("corpus", "schedule", "model", "train", "dreambooth", "attack", "eval")
                and isinstance(value, dict)):
            sub_cls = _SECTION_TYPES.get(f.name)
            if sub_cls is not None and isinstance(value, dict):
                kwargs[key] = _build(sub_cls, value, f"{path}{key}.", problems)
                continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        problems.append(f"{path.rstrip('.') or 'config'}: {e}")
        return cls()


_SECTION_TYPES = {
    "corpus": CorpusSettings, "schedule": ScheduleSettings, "model": ModelSettings,
    "train": TrainSettings, "dreambooth": DreamboothConfig, "attack": AttackConfig,
    "eval": EvalSettings,
}


def validate_config(cfg: ExperimentConfig) -> list[str]:
    problems = []
    c = cfg.corpus
    if c.identities < 1:
        problems.append("corpus.identities: must be >= 1")
    if c.per_identity < 1:
        problems.append("corpus.per_identity: must be >= 1")
    if c.image_size <= 0 or c.image_size % 4 != 0:
        problems.append(f"corpus.image_size: {c.image_size} must be positive and divisible by 4")
    s = cfg.schedule
    if s.timesteps < 2:
        problems.append("schedule.timesteps: must be >= 2")
    if not (0 < s.beta_start <= s.beta_end < 1):
        problems.append(f"schedule: need 0 < beta_start <= beta_end < 1, "
                        f"got ({s.beta_start}, {s.beta_end})")
    else:
        problems.extend(f"attack.{p}" for p in cfg.attack.validate(s.timesteps))
    d = cfg.dreambooth
    if d.lr <= 0:
        problems.append("dreambooth.lr: must be > 0")
    if d.steps < 1:
        problems.append("dreambooth.steps: must be >= 1")
    if d.prior_weight < 0:
        problems.append("dreambooth.prior_weight: must be >= 0")
    if d.optimizer not in ("sgd", "adam"):
        problems.append(f"dreambooth.optimizer: unknown {d.optimizer!r}")
    if not (0 <= cfg.eval.tau < 1):
        problems.append(f"eval.tau: {cfg.eval.tau} outside [0, 1)")
    if cfg.train.steps < 1 or cfg.train.lr <= 0:
        problems.append("train: steps must be >= 1 and lr > 0")
    return problems


def config_from_dict(data: dict) -> ExperimentConfig:
    problems: list[str] = []
    cfg = _build(ExperimentConfig, data, "", problems)
    problems.extend(validate_config(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Load, default-fill, and validate a JSON config file."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from e
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"),
                           default=list)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = config_to_dict(cfg)
    payload["config_hash"] = config_hash(cfg)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=list))
