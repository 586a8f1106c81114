"""Experiment configuration: YAML in, validated nested model out.

Every section is strict: unknown keys are errors, and all validation
problems are reported together with dotted field paths
(``partition.beta``).  See README.md for the file grammar.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .adversary import ATTACK_KINDS, AttackConfig
from .evidential import ACTIVATIONS, DEFAULT_SCORE_CLAMP, TERMS, TrainConfig
from .federation import DEFENSE_RULES, DefenseConfig, FederationConfig
from .server import DEFAULT_EVIDENCE_CAP

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "load_config_text",
    "validate",
    "apply_overrides",
]


class ConfigError(ValueError):
    """Carries every problem found, each as ``(path, message)``."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" if p else m for p, m in problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class DatasetSection(_Section):
    kind: Literal["blobs", "file"] = "blobs"
    classes: int = Field(4, ge=2)
    per_class: int = Field(250, ge=1)
    dim: int = Field(2, ge=1)
    spread: float = Field(0.8, gt=0)
    radius: float = Field(2.0, gt=0)
    path: Optional[str] = None
    label_column: int | str = -1
    delimiter: Optional[str] = None
    header: Optional[bool] = None

    @model_validator(mode="after")
    def _file_needs_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("path is required when kind is 'file'")
        return self


class PartitionSection(_Section):
    num_clients: int = Field(10, ge=2)
    beta: float = Field(0.1, gt=0)
    seed: Optional[int] = Field(None, ge=0, lt=2**64)


class ModelSection(_Section):
    hidden: list[int] = Field(default_factory=lambda: [32, 32], min_length=1)
    activation: Literal[ACTIVATIONS] = "relu6"  # type: ignore[valid-type]
    prior_weight: Optional[float] = Field(None, gt=0)
    uniform_prior: bool = False

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be positive")
        return v


class TrainingSection(_Section):
    rounds: int = Field(30, ge=0)
    learning_rate: float = Field(0.01, gt=0)
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(1.0, ge=0)
    lambda3: float = Field(1.0, ge=0)
    epsilon: float = Field(1e4, gt=0)
    local_epochs: int = Field(5, ge=1)
    batch_size: int = Field(32, ge=1)
    score_clamp: float = Field(DEFAULT_SCORE_CLAMP, gt=0)
    max_grad_norm: Optional[float] = Field(10.0, gt=0)
    prior_terms: list[Literal[TERMS]] = Field(  # type: ignore[valid-type]
        default_factory=lambda: ["ce", "cor", "evi", "neg"]
    )
    train_prior: bool = True
    test_fraction: float = Field(0.25, ge=0, lt=1)
    participation: float = Field(1.0, gt=0, le=1)


class DefenseSection(_Section):
    rule: Literal[DEFENSE_RULES] = "tpfl"  # type: ignore[valid-type]
    evidence_cap: float = Field(DEFAULT_EVIDENCE_CAP, gt=0)
    similarity_tau: float = Field(1e-6, gt=0)
    min_cluster: int = Field(2, ge=2)
    overflow: bool = True
    similarity: bool = True
    num_attackers: int = Field(0, ge=0)
    trim: Optional[int] = Field(None, ge=0)
    multi_krum_m: Optional[int] = Field(None, ge=1)
    clip_norm: Optional[float] = Field(None, gt=0)


class AttackSection(_Section):
    kind: Literal[ATTACK_KINDS] = "none"  # type: ignore[valid-type]
    malicious_ratio: float = Field(0.0, ge=0, le=0.5)
    z: float = 1.5
    lambda_scale: float = Field(100.0, gt=0)
    noise_sigma: float = Field(1.0, gt=0)
    gamma_min: float = Field(0.01, gt=0)
    gamma_max: float = Field(100.0, gt=0)
    encoder_only: bool = False


class EvaluationSection(_Section):
    thresholds: list[float] = Field(default_factory=lambda: [1.0, 0.5, 0.2], min_length=1)
    holdout_size: int = Field(100, ge=1)
    ood_size: int = Field(500, ge=1)
    filter_no: int = Field(20, ge=1)
    finetune_epochs: int = Field(5, ge=0)
    generic_uniform_prior: bool = False

    @field_validator("thresholds")
    @classmethod
    def _unit_interval(cls, v):
        if any(not (0 < t <= 1) for t in v):
            raise ValueError("thresholds must lie in (0, 1]")
        return v


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: Optional[str] = None
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)

    @property
    def partition_seed(self) -> int:
        return self.seed if self.partition.seed is None else self.partition.seed

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            learning_rate=t.learning_rate,
            lambda1=t.lambda1,
            lambda2=t.lambda2,
            lambda3=t.lambda3,
            epsilon=t.epsilon,
            local_epochs=t.local_epochs,
            batch_size=t.batch_size,
            score_clamp=t.score_clamp,
            prior_terms=tuple(t.prior_terms),
            train_prior=t.train_prior,
            max_grad_norm=t.max_grad_norm,
        )

    def federation_config(self) -> FederationConfig:
        d, a, e = self.defense, self.attack, self.evaluation
        return FederationConfig(
            seed=self.seed,
            rounds=self.training.rounds,
            hidden=tuple(self.model.hidden),
            activation=self.model.activation,
            prior_weight=self.model.prior_weight,
            train=self.train_config(),
            defense=DefenseConfig(
                rule=d.rule,
                num_attackers=d.num_attackers,
                trim=d.trim,
                multi_krum_m=d.multi_krum_m,
                clip_norm=d.clip_norm,
            ),
            attack=AttackConfig(
                kind=a.kind,
                malicious_ratio=a.malicious_ratio,
                z=a.z,
                lambda_scale=a.lambda_scale,
                noise_sigma=a.noise_sigma,
                gamma_min=a.gamma_min,
                gamma_max=a.gamma_max,
                encoder_only=a.encoder_only,
            ),
            test_fraction=self.training.test_fraction,
            participation=self.training.participation,
            filter_no=e.filter_no,
            finetune_epochs=e.finetune_epochs,
            uniform_prior=self.model.uniform_prior,
            generic_uniform_prior=e.generic_uniform_prior,
        )

    def resolved(self) -> dict[str, Any]:
        """Plain dict with every default filled in."""
        return self.model_dump(mode="json")


def _problems(err: ValidationError) -> list[tuple[str, str]]:
    out = []
    for item in err.errors():
        path = ".".join(str(p) for p in item["loc"])
        msg = item["msg"]
        if item["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append((path, msg))
    return out


def validate(raw: Any) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([("", "top level must be a mapping")])
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        raise ConfigError(_problems(err)) from None
    if cfg.attack.gamma_min > cfg.attack.gamma_max:
        raise ConfigError([("attack.gamma_min", "must not exceed attack.gamma_max")])
    return cfg


def load_config_text(text: str, source: str = "<string>") -> dict:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as err:
        mark = err.problem_mark
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError([(where, f"YAML syntax error: {err.problem}")]) from None
    return {} if raw is None else raw


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    raw = _deep_copy(raw)
    problems = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            problems.append((item, "override must look like key=value"))
            continue
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                problems.append((key, f"{part} is not a section"))
                break
            node = child
        else:
            node[parts[-1]] = yaml.safe_load(value) if value else None
    if problems:
        raise ConfigError(problems)
    return raw


def _deep_copy(raw):
    if isinstance(raw, dict):
        return {k: _deep_copy(v) for k, v in raw.items()}
    if isinstance(raw, list):
        return [_deep_copy(v) for v in raw]
    return raw


def parse_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([(str(path), "config file not found")])
    raw = load_config_text(path.read_text(encoding="utf-8"), str(path))
    if overrides:
        raw = apply_overrides(raw, overrides)
    return validate(raw)
