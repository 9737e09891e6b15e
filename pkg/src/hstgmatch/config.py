"""Run configuration: a YAML file mirroring the generator, grid, graph,
model, training, and ablation knobs. Unknown keys are rejected with the
offending key and line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datagen import GenConfig
from .errors import ValidationError
from .pretrain import ModelConfig


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    pretrain_epochs: int = 8
    train_epochs: int = 10
    freeze_epochs: int = 1
    val_fraction: float = 0.05
    val_decode_max: int = 64      # trajectories scored per fine-tuning epoch

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("batch_size and lr must be positive")
        if self.pretrain_epochs < 1 or self.train_epochs < 1:
            raise ValidationError("epoch counts must be positive")


@dataclass
class AblationFlags:
    disable_pretrain: bool = False
    disable_st_factor: bool = False
    plain_aggregation_instead_of_opt_gat: bool = False
    disable_hierarchical_tuple_channel: bool = False


@dataclass
class RunConfig:
    seed: int = 42
    out_dir: str = "runs/default"
    cell_size_m: float = 100.0
    graph_threshold_m: float = 150.0
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def model_for_run(self) -> ModelConfig:
        """ModelConfig with the ablation switches applied."""
        cfg = dataclasses.replace(
            self.model,
            plain_aggregation=self.ablation.plain_aggregation_instead_of_opt_gat,
            hierarchical_tuples=not self.ablation.disable_hierarchical_tuple_channel,
            use_st_factor=not self.ablation.disable_st_factor)
        return cfg


_SECTIONS = {
    "data": GenConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "ablation": AblationFlags,
}
_TOP_SCALARS = {"seed", "out_dir", "cell_size_m", "graph_threshold_m"}
# fields driven by the ablation section, not settable directly
_HIDDEN_MODEL_FIELDS = {"plain_aggregation", "hierarchical_tuples", "use_st_factor"}


def _key_line(text: str, key: str) -> int:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if stripped.strip().startswith(f"{key}:"):
            return lineno
    return 0


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise ValidationError(f"{path}: YAML parse error at line {line}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: top level must be a mapping")

    kwargs = {}
    for key, value in raw.items():
        if key in _TOP_SCALARS:
            kwargs[key] = value
        elif key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ValidationError(
                    f"{path}: section '{key}' at line {_key_line(text, key)} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(cls)}
            if cls is ModelConfig:
                allowed -= _HIDDEN_MODEL_FIELDS
            for sub in value:
                if sub not in allowed:
                    raise ValidationError(
                        f"{path}: unknown key '{key}.{sub}' at line {_key_line(text, sub)}")
            try:
                kwargs[key] = cls(**value)
            except TypeError as exc:
                raise ValidationError(f"{path}: bad section '{key}': {exc}") from exc
        else:
            raise ValidationError(
                f"{path}: unknown key '{key}' at line {_key_line(text, key)}")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
