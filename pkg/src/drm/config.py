"""Experiment configuration: one JSON document drives a whole run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dkt import DKT_MODES, EPS, FinetuneConfig
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig

TASKS = ("PredCls", "SGCls")


class ConfigError(ValueError):
    pass


@dataclass
class DKTConfig:
    mode: str = "PT"  # none | P | T | PT
    threshold: int = 8
    q_override: int | None = None
    eps: float = EPS
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    """Schema for ``drm run --config``.

    ``dataset`` holds keyword overrides for :func:`drm.synthgraph.default_spec`;
    ``dataset_path`` points at a saved dataset directory instead.
    """

    run_id: str = "run"
    seed: int = 0
    task: str = "PredCls"
    dataset: dict = field(default_factory=dict)
    dataset_path: str | None = None
    data_seed: int | None = None  # defaults to ``seed``
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6))
    dkt: DKTConfig = field(default_factory=DKTConfig)
    use_P: bool = True
    use_T: bool = True
    use_A: bool = True
    use_C: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.dkt.mode not in DKT_MODES:
            raise ConfigError(f"dkt.mode must be one of {DKT_MODES}, got {self.dkt.mode!r}")
        if self.use_C and not self.use_A:
            raise ConfigError("use_C requires use_A (contrastive positives come from the augmented twin)")
        if self.dkt.threshold < 0:
            raise ConfigError("dkt.threshold must be non-negative")
        if self.dkt.q_override is not None and self.dkt.q_override <= 0:
            raise ConfigError("dkt.q_override must be positive")
        if self.train.epochs < 0 or self.dkt.finetune.epochs < 0:
            raise ConfigError("epoch counts must be non-negative")

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def resolved_model(self) -> ModelConfig:
        """Model config with ablation switches applied."""
        d = asdict(self.model)
        d["use_predicate_encoder"] = self.use_P
        d["use_triplet_encoder"] = self.use_T
        return ModelConfig(**d)

    def resolved_train(self) -> TrainConfig:
        cfg = TrainConfig.from_json(self.train.to_json())
        cfg.task = self.task
        cfg.augment = self.use_A
        if not self.use_C:
            w = cfg.weights
            cfg.weights = LossWeights(w.relation, w.entity, 0.0, 0.0, w.tau_p, w.tau_t)
        return cfg

    def to_json(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_json()
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        try:
            if "model" in doc:
                doc["model"] = ModelConfig(**doc["model"])
            if "train" in doc:
                doc["train"] = TrainConfig.from_json(doc["train"])
            if "dkt" in doc:
                dk = dict(doc["dkt"])
                if "finetune" in dk:
                    dk["finetune"] = FinetuneConfig(**dk["finetune"])
                doc["dkt"] = DKTConfig(**dk)
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(doc)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def desk_config(**overrides) -> ExperimentConfig:
    """Schedule that converges on the toy dataset within a couple of CPU minutes.

    The default learning rate (1e-4) barely moves a freshly initialised
    model in six epochs, so the desk preset raises it.
    """
    cfg = ExperimentConfig(train=TrainConfig(epochs=6, lr=0.01))
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


# Encoder and objective ablation rows: (name, use_P, use_T, use_A, use_C)
ABLATION_ROWS = [
    ("baseline", False, False, False, False),
    ("P", True, False, False, False),
    ("T", False, True, False, False),
    ("P+T", True, True, False, False),
    ("P+T+A", True, True, True, False),
    ("P+A+C", True, False, True, True),
    ("T+A+C", False, True, True, True),
    ("P+T+A+C", True, True, True, True),
]

DKT_ROWS = [("None", "none"), ("DKT-P", "P"), ("DKT-T", "T"), ("DKT", "PT")]


def ablation_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    out = []
    for name, p, t, a, c in ABLATION_ROWS:
        doc = base.to_json()
        doc.update(run_id=f"{base.run_id}-{name}", use_P=p, use_T=t, use_A=a, use_C=c)
        doc["dkt"]["mode"] = "none"
        out.append(ExperimentConfig.from_json(doc))
    return out
