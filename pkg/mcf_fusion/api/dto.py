"""Data Transfer Objects (DTOs) for configuration, training history and reports."""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mcf_fusion.nn.encoders import DEFAULT_DROPOUT, EncoderVariant


class Task(str, Enum):
    MULTILABEL_CONT = "multilabel_cont"
    SINGLE_LABEL = "single_label"

    @property
    def code(self) -> int:
        """Bundle header task byte."""
        return 0 if self is Task.MULTILABEL_CONT else 1

    @classmethod
    def from_code(cls, code: int) -> "Task":
        return cls.MULTILABEL_CONT if code == 0 else cls.SINGLE_LABEL


DEFAULT_N_DISC = {Task.MULTILABEL_CONT: 26, Task.SINGLE_LABEL: 7}
AVD_DIMS = 3


class StreamSet(str, Enum):
    """Which context streams feed the fusion vector."""
    BOTH = "both"
    FG = "fg"
    VS = "vs"
    NONE = "none"
    LATE = "late"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAMW = "adamw"


class SynthMode(str, Enum):
    XOR = "xor"
    LINEAR = "linear"


# Geometry
class Geometry(BaseModel):
    """Token counts and widths of the three input streams."""
    t_pe: int = Field(49, ge=1, le=65535, description="Person tokens (7x7 grid)")
    d_pe: int = Field(512, ge=1, le=65535, description="Person token width")
    t_fg: int = Field(512, ge=1, le=65535, description="Max foreground (caption) tokens")
    d_fg: int = Field(768, ge=1, le=65535, description="Foreground token width")
    t_vs: int = Field(197, ge=1, le=65535, description="Visual-scene tokens")
    d_vs: int = Field(768, ge=1, le=65535, description="Visual-scene token width")

    @classmethod
    def full(cls) -> "Geometry":
        return cls()

    @classmethod
    def toy(cls) -> "Geometry":
        return cls(t_pe=4, d_pe=16, t_fg=6, d_fg=16, t_vs=5, d_vs=16)


# Model
class McfConfig(BaseModel):
    """Architecture of one MCF network."""
    model_config = ConfigDict(frozen=True)

    variant: EncoderVariant = EncoderVariant.MHA_ENC
    layers: int = Field(4, ge=1)
    heads: int = Field(8, ge=1)
    d_model: int = Field(512, ge=1)
    task: Task = Task.MULTILABEL_CONT
    n_disc: Optional[int] = Field(None, ge=1)
    dropout_p: float = Field(DEFAULT_DROPOUT, ge=0.0, lt=1.0)
    streams: StreamSet = StreamSet.BOTH
    head_hidden: int = Field(0, ge=0, description="0 = linear heads")
    d_pe: int = Field(512, ge=1)
    d_fg: int = Field(768, ge=1)
    d_vs: int = Field(768, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "McfConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.n_disc is None:
            object.__setattr__(self, "n_disc", DEFAULT_N_DISC[self.task])
        return self

    @property
    def num_classes(self) -> int:
        assert self.n_disc is not None
        return self.n_disc

    @property
    def fusion_width(self) -> int:
        return 2 * self.d_model if self.streams in (StreamSet.BOTH, StreamSet.LATE) else self.d_model


# Training
class TrainConfig(BaseModel):
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    lr0: float = Field(2e-5, gt=0.0)
    gamma: float = Field(1.0, gt=0.0, le=1.0, description="Per-epoch LR decay, 1.0 = constant")
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(50, ge=1)
    lambda1: float = Field(0.8, ge=0.0, description="BCE weight")
    lambda2: float = Field(0.2, ge=0.0, description="MSE weight")
    seed: int = Field(0, ge=0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.01, ge=0.0)
    patience: Optional[int] = Field(None, ge=1, description="Early-stopping patience in epochs")
    freeze: List[str] = Field(default_factory=list, description="Parameter-name prefixes to freeze")
    keep_best: bool = Field(True, description="Restore best-validation parameters after fit")


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None
    metrics: Dict[str, float] = Field(default_factory=dict)


class TrainHistory(BaseModel):
    records: List[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_criterion: Optional[float] = None
    stopped_early: bool = False

    @property
    def learning_rates(self) -> List[float]:
        return [r.lr for r in self.records]


# Evaluation
class EvalReport(BaseModel):
    """Scores for one model on one bundle; task gates which fields are set."""
    task: Task
    n_samples: int = Field(..., ge=0)
    loss: Optional[float] = None
    map: Optional[float] = Field(None, ge=0.0, le=1.0, description="Mean average precision")
    per_class_ap: Optional[List[Optional[float]]] = None
    accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)
    macro_f1: Optional[float] = Field(None, ge=0.0, le=1.0)
    avd_mse: Optional[List[float]] = Field(None, description="Per-dimension MSE (A, V, D)")
    class_counts: List[int] = Field(default_factory=list)

    def headline(self) -> Dict[str, float]:
        """Primary metrics, as recorded per epoch in the training history."""
        if self.task is Task.MULTILABEL_CONT:
            out = {"map": self.map or 0.0}
            if self.avd_mse is not None:
                out["avd_mse"] = sum(self.avd_mse) / len(self.avd_mse)
            return out
        return {"accuracy": self.accuracy or 0.0, "macro_f1": self.macro_f1 or 0.0}


# Synthetic data
class SyntheticSpec(BaseModel):
    mode: SynthMode = SynthMode.XOR
    n_samples: int = Field(256, ge=0)
    noise_sigma: float = Field(1.0, ge=0.0)
    signal_strength: float = Field(2.0, ge=0.0)
    seed: int = Field(0, ge=0)
    geometry: Geometry = Field(default_factory=Geometry.full)
    n_disc: Optional[int] = Field(None, ge=1, le=65535)
    label_noise: float = Field(0.0, ge=0.0, description="Weight of the noise column in linear mode")

    @model_validator(mode="after")
    def _check(self) -> "SyntheticSpec":
        if self.mode is SynthMode.XOR:
            if self.n_disc not in (None, 2):
                raise ValueError("xor mode always has n_disc=2")
            self.n_disc = 2
        elif self.n_disc is None:
            self.n_disc = DEFAULT_N_DISC[Task.MULTILABEL_CONT]
        return self

    @property
    def task(self) -> Task:
        return Task.SINGLE_LABEL if self.mode is SynthMode.XOR else Task.MULTILABEL_CONT


# Run configuration file
class RunConfig(BaseModel):
    """Everything a `train` run needs; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = None

    # Model
    variant: EncoderVariant = EncoderVariant.MHA_ENC
    layers: int = Field(4, ge=1)
    heads: int = Field(8, ge=1)
    d_model: int = Field(512, ge=1)
    task: Task = Task.MULTILABEL_CONT
    n_disc: Optional[int] = Field(None, ge=1)
    dropout_p: float = Field(DEFAULT_DROPOUT, ge=0.0, lt=1.0)
    streams: StreamSet = StreamSet.BOTH
    head_hidden: int = Field(0, ge=0)
    d_pe: int = Field(512, ge=1)
    d_fg: int = Field(768, ge=1)
    d_vs: int = Field(768, ge=1)

    # Training
    optimizer: OptimizerKind = OptimizerKind.ADAMW
    lr0: float = Field(2e-5, gt=0.0)
    gamma: float = Field(1.0, gt=0.0, le=1.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(50, ge=1)
    lambda1: float = Field(0.8, ge=0.0)
    lambda2: float = Field(0.2, ge=0.0)
    seed: int = Field(0, ge=0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.01, ge=0.0)
    patience: Optional[int] = Field(None, ge=1)
    freeze: List[str] = Field(default_factory=list)
    keep_best: bool = True

    # Paths
    train_bundle: Optional[Path] = None
    val_bundle: Optional[Path] = None
    val_fraction: float = Field(0.2, ge=0.0, lt=1.0, description="Used when val_bundle is unset")
    checkpoint: Optional[Path] = None
    history: Optional[Path] = None
    report: Optional[Path] = None

    @field_validator("freeze", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    @field_validator("n_disc", "patience", "train_bundle", "val_bundle",
                     "checkpoint", "history", "report", mode="before")
    @classmethod
    def _blank_is_none(cls, value: Any) -> Any:
        return None if value == "" else value

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.task is Task.MULTILABEL_CONT and self.lambda1 + self.lambda2 <= 0:
            raise ValueError("lambda1 + lambda2 must be positive for multilabel_cont")
        return self

    def to_mcf_config(self) -> McfConfig:
        return McfConfig(**self.model_dump(include=set(McfConfig.model_fields)))

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump(include=set(TrainConfig.model_fields)))
