import hashlib
import json
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


PARAM_NAMES = ("theta", "tx", "ty", "sigma", "sx", "sy")
METRICS_SCHEMA_VERSION = 1
PROBE_SCHEMA_VERSION = 1


class SSLMethod(str, Enum):
    SIMCLR = "simclr"
    BYOL = "byol"
    BARLOW_TWINS = "barlow_twins"


class Aggregation(str, Enum):
    DIFFERENCE = "difference"
    CONCATENATION = "concatenation"


class AffineViews(str, Enum):
    ONE = "one"
    BOTH = "both"


class RepresentationSource(str, Enum):
    ENCODER = "f"
    PROJECTOR = "g"


class HeadRole(str, Enum):
    PROJECTOR = "projector"
    PREDICTOR = "predictor"
    REGRESSOR = "regressor"


class EncoderArch(str, Enum):
    SMALL_CONV = "small_conv"
    RESNET50 = "resnet50"


class EmaSchedule(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


# ---------------------------------------------------------------------------
# Affine transformation parameters
# ---------------------------------------------------------------------------


class AffineParams(BaseModel):
    """The 6-DoF parameter vector [theta, tx, ty, sigma, sx, sy]."""

    theta: float = Field(default=0.0, description="Rotation angle in degrees")
    tx: float = Field(default=0.0, description="Horizontal translation as a signed fraction of the width")
    ty: float = Field(default=0.0, description="Vertical translation as a signed fraction of the height")
    sigma: float = Field(default=1.0, gt=0.0, description="Isotropic scale factor")
    sx: float = Field(default=0.0, description="Horizontal shear angle in degrees")
    sy: float = Field(default=0.0, description="Vertical shear angle in degrees")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_vector(cls, values) -> "AffineParams":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != len(PARAM_NAMES):
            raise ValueError(f"Expected {len(PARAM_NAMES)} parameters, got {values.shape[0]}")
        return cls(**{name: float(v) for name, v in zip(PARAM_NAMES, values)})

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()


class AffineRanges(BaseModel):
    """Sampling intervals for each affine component."""

    model_config = ConfigDict(extra="forbid")

    rotation: Tuple[float, float] = Field(default=(-90.0, 90.0), description="Rotation angle interval in degrees")
    translation: Tuple[float, float] = Field(default=(0.0, 0.25), description="Translation magnitude interval (fraction of size)")
    scale: Tuple[float, float] = Field(default=(0.7, 1.3), description="Scale factor interval")
    shear: Tuple[float, float] = Field(default=(-25.0, 25.0), description="Shear angle interval in degrees")
    signed_translation: bool = Field(default=True, description="Draw an independent random sign per translation axis")

    def target_intervals(self) -> np.ndarray:
        """Per-parameter interval the regression target lives in, shape (6, 2)."""
        t_lo, t_hi = self.translation
        if self.signed_translation:
            t_lo, t_hi = -t_hi, t_hi
        return np.array([
            self.rotation,
            (t_lo, t_hi),
            (t_lo, t_hi),
            self.scale,
            self.shear,
            self.shear,
        ], dtype=np.float64)

    @classmethod
    def identity(cls) -> "AffineRanges":
        """Ranges collapsed onto the identity transform."""
        return cls(rotation=(0.0, 0.0), translation=(0.0, 0.0), scale=(1.0, 1.0), shear=(0.0, 0.0))


COMPONENT_COLUMNS = {
    "rotation": (0,),
    "translation": (1, 2),
    "scale": (3,),
    "shear": (4, 5),
}


class ComponentMask(BaseModel):
    """Which affine components are sampled and regressed."""

    model_config = ConfigDict(extra="forbid")

    use_translation: bool = Field(default=True, description="Sample and predict tx, ty")
    use_shear: bool = Field(default=True, description="Sample and predict sx, sy")
    use_rotation: bool = Field(default=True, description="Sample and predict theta")
    use_scale: bool = Field(default=True, description="Sample and predict sigma")

    def enabled_components(self) -> List[str]:
        flags = {
            "rotation": self.use_rotation,
            "translation": self.use_translation,
            "scale": self.use_scale,
            "shear": self.use_shear,
        }
        return [name for name, on in flags.items() if on]

    def active_columns(self) -> List[int]:
        """Indices into PARAM_NAMES of the parameters this mask keeps, in ascending order."""
        columns: List[int] = []
        for name in self.enabled_components():
            columns.extend(COMPONENT_COLUMNS[name])
        return sorted(columns)

    def is_empty(self) -> bool:
        return not self.enabled_components()

    def is_full(self) -> bool:
        return len(self.enabled_components()) == len(COMPONENT_COLUMNS)

    def label(self) -> str:
        return "all" if self.is_full() else "+".join(self.enabled_components()) or "none"

    @classmethod
    def only(cls, component: str) -> "ComponentMask":
        if component == "all":
            return cls()
        if component not in COMPONENT_COLUMNS:
            raise ValueError(f"Unknown affine component: {component}")
        return cls(**{f"use_{name}": name == component for name in COMPONENT_COLUMNS})


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


class AugmentationConfig(BaseModel):
    """Stochastic view-generation pipeline (SimCLR defaults)."""

    model_config = ConfigDict(extra="forbid")

    resolution: int = Field(default=32, ge=1, description="Square side length of every view")
    crop_enabled: bool = Field(default=True, description="Apply RandomResizedCrop")
    crop_scale: Tuple[float, float] = Field(default=(0.08, 1.0), description="Crop area fraction interval")
    crop_ratio: Tuple[float, float] = Field(default=(3.0 / 4.0, 4.0 / 3.0), description="Crop aspect ratio interval")
    flip_enabled: bool = Field(default=True, description="Apply horizontal flip")
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0, description="Horizontal flip probability")
    color_jitter_enabled: bool = Field(default=True, description="Apply colour jitter")
    color_jitter_prob: float = Field(default=0.8, ge=0.0, le=1.0, description="Colour jitter probability")
    brightness: float = Field(default=0.8, ge=0.0, description="Brightness jitter strength")
    contrast: float = Field(default=0.8, ge=0.0, description="Contrast jitter strength")
    saturation: float = Field(default=0.8, ge=0.0, description="Saturation jitter strength")
    hue: float = Field(default=0.2, ge=0.0, le=0.5, description="Hue jitter strength")
    grayscale_enabled: bool = Field(default=True, description="Apply random grayscale")
    grayscale_prob: float = Field(default=0.2, ge=0.0, le=1.0, description="Grayscale probability")
    blur_enabled: bool = Field(default=True, description="Apply Gaussian blur")
    blur_prob: float = Field(default=0.5, ge=0.0, le=1.0, description="Gaussian blur probability")
    blur_kernel_fraction: float = Field(default=0.1, gt=0.0, le=1.0, description="Blur kernel size as a fraction of the resolution")
    blur_sigma: Tuple[float, float] = Field(default=(0.1, 2.0), description="Blur sigma interval")

    @field_validator("crop_scale")
    @classmethod
    def _check_crop_scale(cls, value):
        lo, hi = value
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        return value

    @field_validator("crop_ratio", "blur_sigma")
    @classmethod
    def _check_positive_interval(cls, value):
        lo, hi = value
        if not (0.0 < lo <= hi):
            raise ValueError("interval must satisfy 0 < lo <= hi")
        return value

    @classmethod
    def disabled(cls, resolution: int = 32) -> "AugmentationConfig":
        return cls(
            resolution=resolution,
            crop_enabled=False,
            flip_enabled=False,
            color_jitter_enabled=False,
            grayscale_enabled=False,
            blur_enabled=False,
        )


class EncoderSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: EncoderArch = Field(default=EncoderArch.SMALL_CONV, description="Backbone architecture")
    representation_dim: int = Field(default=256, gt=0, description="Dimension d of the encoder output h")
    small_input_stem: bool = Field(default=True, description="Use a 3x3 stride-1 stem without max-pool (ResNet on 32/64 px)")

    @model_validator(mode="after")
    def _check_resnet_dim(self):
        if self.arch == EncoderArch.RESNET50 and self.representation_dim != 2048:
            raise ValueError("resnet50 produces 2048-dimensional representations")
        if self.arch == EncoderArch.SMALL_CONV and self.representation_dim % 8 != 0:
            raise ValueError("small_conv representation_dim must be divisible by 8")
        return self


class HeadSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    role: HeadRole = Field(..., description="Projector g, predictor q or affine regressor r")
    hidden_dim: int = Field(default=512, gt=0, description="Hidden layer width")
    output_dim: int = Field(default=128, gt=0, description="Output width")


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    temperature: float = Field(default=0.5, gt=0.0, description="NT-Xent temperature")
    barlow_lambda: float = Field(default=5e-3, gt=0.0, description="Barlow Twins off-diagonal weight")
    ema_tau: float = Field(default=0.99, ge=0.0, le=1.0, description="BYOL target EMA decay")
    ema_schedule: EmaSchedule = Field(default=EmaSchedule.CONSTANT, description="Constant tau or cosine ramp to 1")


class AffineModuleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = Field(default=True, description="Run the affine branch at all")
    aggregation: Aggregation = Field(default=Aggregation.DIFFERENCE, description="Transition vector aggregation m")
    views: AffineViews = Field(default=AffineViews.ONE, description="Estimate phi for one view or both")
    source: RepresentationSource = Field(default=RepresentationSource.ENCODER, description="Aggregate encoder (f) or projector (g) outputs")
    components: ComponentMask = Field(default_factory=ComponentMask, description="Affine components to sample and regress")
    bounded: bool = Field(default=False, description="Crop the maximal inscribed rectangle of the warped footprint")
    beta1: float = Field(default=1.0, ge=0.0, description="Weight of the SSL loss")
    beta2: Optional[float] = Field(default=None, ge=0.0, description="Weight of the affine loss; None uses the method default")
    normalize_targets: bool = Field(default=True, description="Regress parameters normalised to [-1, 1]")
    ranges: AffineRanges = Field(default_factory=AffineRanges, description="Sampling intervals")
    regressor_hidden_dim: int = Field(default=512, gt=0, description="Hidden width of the regressor r")

    @model_validator(mode="after")
    def _check_weights(self):
        if self.components.is_empty():
            raise ValueError("at least one affine component must be enabled")
        if self.beta1 == 0.0 and self.beta2 == 0.0:
            raise ValueError("beta1 and beta2 cannot both be zero")
        return self

    @property
    def regressor_output_dim(self) -> int:
        return len(self.components.active_columns())

    def resolved_beta2(self, method: SSLMethod) -> float:
        if self.beta2 is not None:
            return self.beta2
        return 10.0 if SSLMethod(method) == SSLMethod.BARLOW_TWINS else 1.0


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.03, gt=0.0, description="Base learning rate")
    weight_decay: float = Field(default=4e-4, ge=0.0, description="L2 weight decay (not applied to biases and norms)")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="SGD momentum")
    batch_size: int = Field(default=256, ge=2, description="Images per step")
    epochs: int = Field(default=100, ge=1, description="Pretraining epochs")
    schedule: str = Field(default="cosine", pattern="^(cosine|constant)$", description="Learning rate schedule")
    warmup_epochs: int = Field(default=0, ge=0, description="Linear warmup epochs")
    grad_clip_norm: Optional[float] = Field(default=None, gt=0.0, description="Global gradient norm clip")


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str = Field(default="cifar10", description="Pretraining dataset id")
    limit: Optional[int] = Field(default=None, ge=0, description="Truncate the pretraining split")
    root: Optional[str] = Field(default=None, description="Dataset root; defaults to settings.data_root")
    num_workers: Optional[int] = Field(default=None, ge=0, description="Prefetch workers; defaults to settings.num_workers")


class EvalDatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., description="Downstream dataset id")
    train_limit: Optional[int] = Field(default=None, ge=0, description="Probe training images")
    eval_limit: Optional[int] = Field(default=None, ge=0, description="Held-out evaluation images")


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trials: int = Field(default=5, ge=1, description="Random probe trials per evaluation")
    reg_strength: float = Field(default=1.0, ge=0.0, description="L2 strength of the logistic regression")
    max_iter: int = Field(default=1000, ge=1, description="L-BFGS iteration cap")
    subsample_fraction: float = Field(default=0.9, gt=0.0, le=1.0, description="Fraction of probe training data drawn per trial")
    batch_size: int = Field(default=256, ge=1, description="Feature extraction batch size")


# Fields that do not change what a run computes
HASH_EXCLUDE = {"name": True, "output_dir": True, "data": {"root": True, "num_workers": True}}


class ExperimentConfig(BaseModel):
    """Declarative description of one pretraining run and its evaluation."""

    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = Field(default=None, description="Free-form label")
    method: SSLMethod = Field(default=SSLMethod.SIMCLR, description="Base SSL method")
    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    projector: HeadSpec = Field(default_factory=lambda: HeadSpec(role=HeadRole.PROJECTOR, hidden_dim=512, output_dim=128))
    predictor: HeadSpec = Field(default_factory=lambda: HeadSpec(role=HeadRole.PREDICTOR, hidden_dim=512, output_dim=128))
    loss: LossConfig = Field(default_factory=LossConfig)
    affine: AffineModuleConfig = Field(default_factory=AffineModuleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval_datasets: List[EvalDatasetSpec] = Field(default_factory=list, description="Downstream probe datasets")
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1, description="Pretraining seeds")
    eval_every: int = Field(default=10, ge=1, description="Epochs between periodic evaluations")
    checkpoint_every: int = Field(default=1, ge=1, description="Epochs between resumable checkpoints")
    output_dir: Optional[str] = Field(default=None, description="Result store root; defaults to settings.output_dir")

    @model_validator(mode="after")
    def _check_roles(self):
        if self.projector.role != HeadRole.PROJECTOR:
            raise ValueError("projector head must have role 'projector'")
        if self.predictor.role != HeadRole.PREDICTOR:
            raise ValueError("predictor head must have role 'predictor'")
        if self.predictor.output_dim != self.projector.output_dim:
            raise ValueError("predictor output must match projector output")
        return self

    def config_hash(self) -> str:
        """Stable identifier of the semantically meaningful fields."""
        payload = self.model_dump(mode="json", exclude=HASH_EXCLUDE)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seeds": [seed]}, deep=True)

    @property
    def beta2(self) -> float:
        return self.affine.resolved_beta2(self.method)

    def variant_label(self) -> str:
        """Short human label of the affine-module variant this config runs."""
        if not self.affine.enabled:
            return "standard"
        defaults = AffineModuleConfig()
        parts = []
        if self.affine.views != defaults.views:
            parts.append("2x")
        if self.affine.aggregation != defaults.aggregation:
            parts.append("concat")
        if self.affine.source != defaults.source:
            parts.append("g")
        if self.affine.bounded:
            parts.append("bounded")
        if not self.affine.components.is_full():
            parts.append(self.affine.components.label())
        return "affine" if not parts else "affine[" + ",".join(parts) + "]"


GRID_AXES = ("method", "affine", "aggregation", "views", "source", "components", "bounded", "seed")


class GridSpec(BaseModel):
    """A base config plus axis lists expanded by cartesian product."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="grid", description="Grid label")
    base: ExperimentConfig = Field(default_factory=ExperimentConfig)
    axes: Dict[str, List[Any]] = Field(default_factory=dict, description="Axis name to list of values")
    parallelism: int = Field(default=1, ge=1, description="Cells run concurrently")

    @field_validator("axes")
    @classmethod
    def _check_axes(cls, value):
        unknown = sorted(set(value) - set(GRID_AXES))
        if unknown:
            raise ValueError(f"Unknown grid axes: {unknown}; allowed: {list(GRID_AXES)}")
        for axis, values in value.items():
            if not values:
                raise ValueError(f"Grid axis '{axis}' has no values")
        return value


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


class MetricsRecord(BaseModel):
    # Diverged steps carry NaN losses
    model_config = ConfigDict(ser_json_inf_nan="constants")

    schema_version: int = Field(default=METRICS_SCHEMA_VERSION, description="Record schema version")
    run_id: str = Field(..., description="Config hash of the run")
    seed: int = Field(..., description="Pretraining seed (trial id)")
    epoch: int = Field(..., ge=0, description="Zero-based epoch")
    step: int = Field(..., ge=0, description="Global step")
    l_ssl: float = Field(..., description="SSL loss")
    l_affine: Optional[float] = Field(None, description="Affine loss (None when the module is off)")
    total_loss: float = Field(..., description="Combined loss")
    lr: float = Field(..., description="Learning rate used for the step")
    wall_clock: float = Field(..., description="Seconds since the session started")
    status: str = Field(default="ok", description="'ok' or 'diverged'")

    def deterministic_view(self) -> Dict[str, Any]:
        """The record without timing, for bit-exact replay comparisons."""
        return self.model_dump(exclude={"wall_clock"})


class ProbeResult(BaseModel):
    schema_version: int = Field(default=PROBE_SCHEMA_VERSION, description="Record schema version")
    run_id: str = Field(..., description="Config hash of the pretraining run")
    method: str = Field(..., description="SSL method")
    variant: str = Field(..., description="Affine-module variant label")
    dataset: str = Field(..., description="Downstream dataset id")
    seed: int = Field(..., description="Pretraining seed")
    epoch: int = Field(..., ge=0, description="Epochs completed by the evaluated checkpoint")
    checkpoint: str = Field(..., description="Checkpoint path or id")
    trial_seeds: List[int] = Field(..., description="Probe trial seeds")
    accuracies: List[float] = Field(..., description="Per-trial accuracy")
    mean: float = Field(..., ge=0.0, le=1.0, description="Mean accuracy over trials")
    ci_half_width: float = Field(..., ge=0.0, description="95% Student-t half width")
    degenerate_ci: bool = Field(default=False, description="True when fewer than two trials")
    n_trials: int = Field(..., ge=1, description="Number of trials")
    converged: bool = Field(default=True, description="Every probe reached the gradient tolerance")

    @field_validator("accuracies")
    @classmethod
    def _check_accuracies(cls, value):
        if any(not (0.0 <= a <= 1.0) for a in value):
            raise ValueError("accuracies must lie in [0, 1]")
        return value


class EvaluationWarning(BaseModel):
    run_id: str = Field(..., description="Config hash of the run")
    dataset: str = Field(..., description="Dataset that was skipped")
    message: str = Field(..., description="Why it was skipped")
    created_at: datetime = Field(default_factory=datetime.now)


class ResultsCell(BaseModel):
    mean: float = Field(..., description="Value in percent")
    ci_half_width: Optional[float] = Field(None, description="Half width in percent; None when not available")
    n: int = Field(default=1, description="Trial accuracies behind the cell")
    bold: bool = Field(default=False, description="Column maximum")
    significant: Optional[bool] = Field(None, description="Welch test against the baseline row at 0.05")
    source_runs: List[str] = Field(default_factory=list, description="Run ids the cell was computed from")

    def text(self) -> str:
        if self.ci_half_width is None:
            return f"{self.mean:.2f}"
        return f"{self.mean:.2f} ± {self.ci_half_width:.2f}"


class ResultsRow(BaseModel):
    method: str
    variant: str
    cells: Dict[str, Optional[ResultsCell]] = Field(default_factory=dict)


class ResultsTable(BaseModel):
    name: str = Field(..., description="Machine name of the table")
    title: str = Field(..., description="Caption")
    columns: List[str] = Field(..., description="Column keys (datasets or components)")
    rows: List[ResultsRow] = Field(default_factory=list)
    unit: str = Field(default="%", description="Unit of the cell values")


class CurveSeries(BaseModel):
    method: str
    variant: str
    dataset: str
    epochs: List[int]
    means: List[float]
    ci_half_widths: List[float]


class ConvergenceSummary(BaseModel):
    method: str
    dataset: str
    baseline_final_accuracy: float
    epoch_reached: Optional[int] = Field(None, description="First epoch the +affine curve reached the baseline's final accuracy")


# ---------------------------------------------------------------------------
# Results API responses
# ---------------------------------------------------------------------------


class RunSummary(BaseModel):
    id: str = Field(..., description="Config hash")
    method: str = Field(..., description="SSL method")
    variant: str = Field(..., description="Affine-module variant label")
    seed: int = Field(..., description="Pretraining seed")
    status: RunStatus = Field(..., description="Cell status")
    updated_at: Optional[datetime] = Field(None, description="Last status change")


class RunListResponse(BaseModel):
    runs: List[RunSummary] = Field(..., description="Cells in the store")
    total: int = Field(..., description="Number of cells")


class RunDetail(BaseModel):
    summary: RunSummary
    config: ExperimentConfig
    error_message: Optional[str] = None


class ErrorResponse(BaseModel):
    detail: str = Field(..., description="Error message")
    error_code: Optional[str] = Field(None, description="Error code")


class HealthResponse(BaseModel):
    status: str = Field(..., description="Service status")
    version: str = Field(..., description="Application version")
    uptime: float = Field(..., description="Uptime in seconds")
