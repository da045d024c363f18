"""Experiment configuration: a flat key-value file with dotted keys.

Grammar (version 1): one `key = value` per line, `#` starts a comment,
values are JSON literals (numbers, booleans, strings, lists) with bare
strings allowed. Unknown keys are rejected. The config fingerprint is a
sha256 over the canonical serialization of the effective (fully
defaulted) config, excluding the operational `threads` knob.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .maskembed import MaskEmbedConfig, ReconstructionSpec
from .synthdata import SynthSpec
from .vit import ViTConfig

CONFIG_VERSION = 1

STAGES = ("gen_data", "pretrain_teacher", "mim", "maskembed",
          "additive_baseline", "clipself_baseline", "probe")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""
    grid: int = 8
    patch_size: int = 4
    num_classes: int = 16
    classes_min: int = 2
    classes_max: int = 5
    occlusion_rate: float = 0.25
    texture_noise: float = 0.05
    align_count: int = 512
    probe_train_count: int = 256
    probe_eval_count: int = 128

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            grid_rows=self.grid, grid_cols=self.grid, patch_size=self.patch_size,
            num_classes=self.num_classes, classes_min=self.classes_min,
            classes_max=self.classes_max, occlusion_rate=self.occlusion_rate,
            texture_noise=self.texture_noise,
        )

    @property
    def total_count(self) -> int:
        return self.align_count + self.probe_train_count + self.probe_eval_count


@dataclass
class ModelConfig:
    dim: int = 48
    depth: int = 4
    heads: int = 4
    prefix_tokens: int = 1
    softcap: float = 30.0  # 0 disables the cap
    mlp_ratio: float = 4.0

    def vit_config(self, data: DataConfig) -> ViTConfig:
        return ViTConfig(
            image_size=data.grid * data.patch_size, patch_size=data.patch_size,
            dim=self.dim, depth=self.depth, heads=self.heads,
            num_prefix_tokens=self.prefix_tokens,
            softcap=self.softcap if self.softcap > 0 else None,
            mlp_ratio=self.mlp_ratio,
        )


@dataclass
class TrainStageConfig:
    epochs: int = 5
    batch_size: int = 32
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 20
    weight_decay: float = 0.01
    clip_norm: float = 1.0  # 0 disables clipping
    beta1: float = 0.9
    beta2: float = 0.95

    @property
    def clip(self) -> float | None:
        return self.clip_norm if self.clip_norm > 0 else None


@dataclass
class TeacherConfig(TrainStageConfig):
    epochs: int = 12
    max_lr: float = 2e-3
    beta2: float = 0.999
    mask_augment_prob: float = 0.5


@dataclass
class MimConfig(TrainStageConfig):
    epochs: int = 4
    sampler: str = "uniform"
    sampler_param: float = 0.0  # visible prob / target fraction where needed


@dataclass
class SpecKeys:
    """Reconstruction-spec selection, e.g. spec.target = "sequence.second_to_last"."""

    target: str = "sequence.second_to_last"
    loss: str = "mse"
    scope: str = "all_patches"


@dataclass
class MaskEmbedStageConfig(TrainStageConfig):
    epochs: int = 8
    spec: SpecKeys = field(default_factory=SpecKeys)
    sampler: str = "uniform"
    sampler_param: float = 0.0
    use_triple: bool = True
    augmentation: str = "none"
    crop_lo: float = 0.6
    crop_hi: float = 1.0
    fill: str = "dataset_mean"  # "dataset_mean" | "zero"
    layerscale_init: float = 1e-4
    decoder_mlp_ratio: float = 4.0

    def reconstruction_spec(self) -> ReconstructionSpec:
        if "." not in self.spec.target:
            raise ConfigError(f"target must be '<kind>.<layer>', got {self.spec.target!r}")
        kind, layer = self.spec.target.split(".", 1)
        return ReconstructionSpec(target=kind, layer=layer, loss_kind=self.spec.loss,
                                  loss_scope=self.spec.scope)

    def maskembed_config(self) -> MaskEmbedConfig:
        return MaskEmbedConfig(
            spec=self.reconstruction_spec(),
            mask_sampler=self.sampler,
            sampler_param=self.sampler_param if self.sampler != "uniform" else None,
            use_triple=self.use_triple,
            epochs=self.epochs, batch_size=self.batch_size,
            clip_norm=self.clip, weight_decay=self.weight_decay,
            augmentation=self.augmentation, crop_scale=(self.crop_lo, self.crop_hi),
            mask_fill=self.fill,
        )


@dataclass
class ClipSelfConfig(TrainStageConfig):
    epochs: int = 8
    max_lr: float = 1e-3


@dataclass
class AdditiveConfig:
    images: int = 4
    steps: int = 300


@dataclass
class ProbeConfig:
    heads: list[str] = field(default_factory=lambda: ["transformer"])
    interventions: list[str] = field(default_factory=lambda: ["none"])
    targets: list[str] = field(default_factory=lambda: ["teacher", "encoder"])
    epochs: int = 5
    batch_size: int = 32
    max_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_steps: int = 30
    weight_decay: float = 0.01


@dataclass
class ExperimentConfig:
    config_version: int = CONFIG_VERSION
    seed: int | None = None
    run_id: str = "run"
    threads: int = 1
    stages: list[str] = field(default_factory=lambda: ["gen_data", "pretrain_teacher", "maskembed", "probe"])
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    mim: MimConfig = field(default_factory=MimConfig)
    maskembed: MaskEmbedStageConfig = field(default_factory=MaskEmbedStageConfig)
    clipself: ClipSelfConfig = field(default_factory=ClipSelfConfig)
    additive: AdditiveConfig = field(default_factory=AdditiveConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {self.config_version}")
        if self.seed is None:
            raise ConfigError("a global seed is mandatory (set `seed = N` or pass --seed)")
        if not self.stages:
            raise ConfigError("stage list must not be empty")
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}; valid: {', '.join(STAGES)}")
        for h in self.probe.heads:
            if h not in ("transformer", "mlp", "linear"):
                raise ConfigError(f"unknown probe head {h!r}")
        for m in self.probe.interventions:
            if m not in ("none", "cls_only", "anonymize"):
                raise ConfigError(f"unknown intervention {m!r}")
        if self.model.prefix_tokens < 1 and "pretrain_teacher" in self.stages:
            raise ConfigError("teacher pretraining reads a prefix token; set model.prefix_tokens >= 1")
        # Fail early on inconsistent sub-configurations.
        self.data.synth_spec()
        self.model.vit_config(self.data)
        self.maskembed.maskembed_config()


# -- flat key-value parsing -----------------------------------------------------


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return [parse_value(part) for part in inner.split(",")] if inner else []
    return raw


def parse_flat_file(path) -> dict[str, object]:
    flat: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in flat:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        flat[key] = parse_value(raw)
    return flat


def _assign(obj, key_parts: list[str], value, full_key: str):
    head = key_parts[0]
    if not dataclasses.is_dataclass(obj) or head not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {full_key!r}")
    if len(key_parts) > 1:
        _assign(getattr(obj, head), key_parts[1:], value, full_key)
        return
    current = getattr(obj, head)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{full_key} expects a boolean, got {value!r}")
    elif isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{full_key} expects an integer, got {value!r}")
        value = int(value)
    elif isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{full_key} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{full_key} expects a string, got {value!r}")
    elif isinstance(current, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{full_key} expects a list, got {value!r}")
    elif current is None:
        # the only optional field is the integer seed
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{full_key} expects an integer, got {value!r}")
        value = int(value)
    setattr(obj, head, value)


def config_from_flat(flat: dict[str, object]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in flat.items():
        _assign(cfg, key.split("."), value, key)
    return cfg


def load_config(path) -> ExperimentConfig:
    return config_from_flat(parse_flat_file(path))


def to_flat_dict(cfg) -> dict[str, object]:
    """Effective config as sorted dotted keys (defaults resolved)."""
    out: dict[str, object] = {}

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value):
                walk(value, key + ".")
            else:
                out[key] = value

    walk(cfg, "")
    return dict(sorted(out.items()))


def config_fingerprint(cfg: ExperimentConfig) -> str:
    flat = to_flat_dict(cfg)
    flat.pop("threads", None)
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()


def synth_spec_from_file(path) -> SynthSpec:
    """Read a SynthSpec from a key-value file.

    Accepts the dataset spec field names directly (grid_rows = 8, ...); a
    bare `grid = N` sets both grid sides, and run-config `data.` prefixes
    are tolerated so a run config can double as a spec file."""
    flat = parse_flat_file(path)
    fields = {f.name for f in dataclasses.fields(SynthSpec)}
    kwargs = {}
    for key, value in flat.items():
        name = key.removeprefix("data.")
        if name in ("path", "align_count", "probe_train_count", "probe_eval_count"):
            continue
        if name == "grid":
            kwargs["grid_rows"] = int(value)
            kwargs["grid_cols"] = int(value)
            continue
        if name not in fields:
            raise ConfigError(f"unknown dataset spec key {key!r}")
        kwargs[name] = value
    try:
        return SynthSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid dataset spec: {exc}") from exc
