from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Direction(str, Enum):
    """Query modality -> database modality. The *B members use background codes."""
    T2I = "T2I"
    I2T = "I2T"
    I2I = "I2I"
    T2T = "T2T"
    T2IB = "T2IB"
    I2TB = "I2TB"

    @property
    def query_modality(self) -> str:
        return "text" if self.value.startswith("T") else "image"

    @property
    def db_modality(self) -> str:
        return "image" if self.value[2] == "I" else "text"

    @property
    def is_adversarial(self) -> bool:
        return self.value.endswith("B")

    @property
    def is_intra_modal(self) -> bool:
        return self.query_modality == self.db_modality

    @property
    def log_key(self) -> str:
        return f"f_{self.value.lower()}"


RETRIEVAL_DIRECTIONS = (Direction.T2I, Direction.I2T, Direction.I2I, Direction.T2T)
ADVERSARIAL_DIRECTIONS = (Direction.T2IB, Direction.I2TB)
ALL_DIRECTIONS = RETRIEVAL_DIRECTIONS + ADVERSARIAL_DIRECTIONS


class LossConfig(BaseModel):
    """Margin, distance and per-term weights of the ranking objective."""
    model_config = ConfigDict(frozen=True)

    margin: float = Field(gt=0)
    distance: Literal["squared", "euclidean"] = "squared"
    weights: Dict[Direction, float] = Field(default_factory=lambda: {d: 1.0 for d in ALL_DIRECTIONS})

    def weight(self, direction: Direction) -> float:
        return self.weights.get(direction, 1.0)


class TrainConfig(BaseModel):
    """Every key of the flat training config file."""
    model_config = ConfigDict(extra="forbid")

    # Optimization schedule
    batch_size: int = Field(64, ge=2)
    epochs: int = Field(100, ge=0)
    base_lr: float = Field(0.005, gt=0)
    lr_decay: float = Field(0.1, gt=0, le=1)
    lr_decay_every: int = Field(20, gt=0)
    adam_alpha: float = Field(0.0002, gt=0)
    adam_beta1: float = Field(0.5, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    d_steps_per_g_step: int = Field(4, ge=1)
    seed: int = 7

    # Codes and objective
    q: int = Field(16, gt=0)
    margin: Optional[float] = Field(None, gt=0)
    distance: Literal["squared", "euclidean"] = "squared"
    triplets_per_anchor: int = Field(4, gt=0)
    w_t2i: float = Field(1.0, ge=0)
    w_i2t: float = Field(1.0, ge=0)
    w_i2i: float = Field(1.0, ge=0)
    w_t2t: float = Field(1.0, ge=0)
    w_t2ib: float = Field(1.0, ge=0)
    w_i2tb: float = Field(1.0, ge=0)

    # Architecture
    feature_channels: int = Field(32, gt=0)
    patch_size: int = Field(2, gt=0)
    text_hidden: int = Field(128, gt=0)
    text_features: int = Field(64, gt=0)
    hash_hidden: int = Field(256, gt=0)
    image_alpha: Optional[float] = Field(None, gt=0)
    text_alpha: Optional[float] = Field(None, gt=0)

    checkpoint_every: int = Field(20, gt=0)

    @property
    def effective_margin(self) -> float:
        return self.margin if self.margin is not None else self.q / 4.0

    def loss_config(self) -> LossConfig:
        """Build the LossConfig the objective is evaluated with."""
        weights = {d: getattr(self, d.log_key.replace("f_", "w_")) for d in ALL_DIRECTIONS}
        return LossConfig(margin=self.effective_margin, distance=self.distance, weights=weights)

    def decay_at(self, epoch: int) -> float:
        return self.lr_decay ** ((max(epoch, 1) - 1) // self.lr_decay_every)

    def lr_at(self, epoch: int) -> float:
        """Encoder/discriminator step size for a 1-based epoch."""
        return self.base_lr * self.decay_at(epoch)

    def g_lr_at(self, epoch: int) -> float:
        """Generator step size, on the same decay schedule."""
        return self.adam_alpha * self.decay_at(epoch)


class DatasetManifest(BaseModel):
    """Header of a dataset directory."""
    version: int
    n: int = Field(gt=0)
    classes: int = Field(ge=2)
    vocab: int = Field(gt=0)
    image_height: int = Field(gt=0)
    image_width: int = Field(gt=0)
    image_channels: int = Field(gt=0)
    grid_height: int = Field(gt=0)
    grid_width: int = Field(gt=0)
    noise: float = Field(ge=0)
    seed: int
    has_masks: bool = True


class TrainLogRecord(BaseModel):
    """One line of the training log."""
    epoch: int
    step: int
    phase: Literal["D", "G"]
    f_t2i: float = Field(ge=0)
    f_i2t: float = Field(ge=0)
    f_i2i: float = Field(ge=0)
    f_t2t: float = Field(ge=0)
    f_t2ib: float = Field(ge=0)
    f_i2tb: float = Field(ge=0)
    occupancy_image: float = Field(ge=0, le=1)
    occupancy_text: float = Field(ge=0, le=1)
    lr: float

    @property
    def adversarial(self) -> float:
        return self.f_t2ib + self.f_i2tb

    @property
    def total(self) -> float:
        return self.f_t2i + self.f_i2t + self.f_i2i + self.f_t2t + self.adversarial


class EvalReport(BaseModel):
    """MAP, interpolated PR curve and per-query APs for one direction."""
    direction: Direction
    q: int
    map: float = Field(ge=0, le=1)
    map_at: Optional[int] = None
    ap: List[float]
    pr: List[Tuple[float, float]]
    n_queries: int
    n_db: int
    codes: Literal["foreground", "background"] = "foreground"

    @model_validator(mode="after")
    def _map_is_mean_ap(self):
        if self.ap and abs(self.map - sum(self.ap) / len(self.ap)) > 1e-12:
            raise ValueError("map must equal the mean of per-query APs")
        return self


class GradcheckEntry(BaseModel):
    name: str
    max_rel_err: float
    samples: int
    passed: bool


class GradcheckReport(BaseModel):
    """Finite-difference verification summary."""
    tol: float
    seed: int
    entries: List[GradcheckEntry] = []

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)


class MaskSummary(BaseModel):
    """Aggregate mask diagnostics for one split."""
    split: str
    count: int
    mean_occupancy_image: float
    mean_occupancy_text: float
    mean_iou: Optional[float] = None
    baseline_iou: Optional[float] = None
    empty_image_masks: int = 0
    empty_text_masks: int = 0
