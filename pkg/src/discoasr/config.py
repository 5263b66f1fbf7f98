"""Run configuration: sectioned key-value files, presets, and CLI overrides.

Precedence is presets < config file < ``key=value`` overrides. Every key maps
onto a dataclass field of one of the five sections (model, training, cl, data,
eval); unknown keys and type mismatches are rejected with the offending key
path. The fully resolved config is embedded into checkpoints and reports.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .checkpoint import config_digest
from .continual import CLConfig, CLOptions
from .datagen import DatasetSpec
from .disconformer import ARCH_PRESETS, ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "EvalSection", "CLSection", "PRESETS", "load_config"]


class ConfigError(ValueError):
    """Bad config: unknown key, type mismatch, or invariant violation."""


@dataclass
class CLSection:
    """Continual-learning hyperparameters (finetuning loop plus plan options)."""

    steps: int = 30_000
    steps_per_split: tuple[int, ...] = ()
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    schedule: str = "cl"
    batch_utts: int = 8
    batch_frames: int = 2000
    k_ffn: int = 2
    k_att: int = 2
    k_conv: int = 12
    kd_lambda: float = 8.0
    kd_temperature: float = 1.0
    top_blocks: int = 1
    extra_att_blocks: int = 0
    augment: bool = True
    n_freq_masks: int = 2
    freq_mask_width: int = 27
    n_time_masks: int = 2
    time_mask_width: int = 100
    dropout_enabled: bool = True

    def cl_config(self, steps: int | None = None) -> CLConfig:
        return CLConfig(
            steps=steps if steps is not None else self.steps,
            peak_lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            schedule=self.schedule,
            batch_utts=self.batch_utts,
            batch_frames=self.batch_frames,
            augment=self.augment,
            n_freq_masks=self.n_freq_masks,
            freq_mask_width=self.freq_mask_width,
            n_time_masks=self.n_time_masks,
            time_mask_width=self.time_mask_width,
            dropout_enabled=self.dropout_enabled,
        )

    def cl_options(self, model: ModelConfig) -> CLOptions:
        return CLOptions(
            k_ff=self.k_ffn if model.ff_aug_experts else None,
            k_att=self.k_att if model.att_aug_heads else None,
            k_conv=self.k_conv if model.conv_aug_experts else None,
            top_blocks=self.top_blocks,
            extra_att_blocks=self.extra_att_blocks,
            kd_lambda=self.kd_lambda,
            kd_temperature=self.kd_temperature,
        )


@dataclass
class EvalSection:
    decode: str = "greedy"
    median: str = "interpolated"
    algorithms: tuple[str, ...] = ("disentangled_cl",)
    split_indices: tuple[int, ...] = (0, 1, 2)
    jobs: int = 1


# Training-section key "lr" maps onto TrainConfig.peak_lr.
_KEY_ALIASES = {("training", "lr"): "peak_lr"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    cl: CLSection = field(default_factory=CLSection)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    eval: EvalSection = field(default_factory=EvalSection)
    preset: str | None = None

    def as_dict(self) -> dict:
        out = {}
        for sec in ("model", "training", "cl", "data", "eval"):
            obj = getattr(self, sec)
            d = dataclasses.asdict(obj)
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            out[sec] = d
        out["preset"] = self.preset
        return out

    def digest(self) -> str:
        return config_digest(self.as_dict())

    def validate(self) -> None:
        m = self.model
        for kind, k, n in (("ffn", self.cl.k_ffn, m.ff_aug_experts),
                           ("att", self.cl.k_att, m.att_aug_heads),
                           ("conv", self.cl.k_conv, m.conv_aug_experts)):
            if n > 0 and not 1 <= k <= n:
                raise ConfigError(
                    f"cl.k_{kind}: {k} must satisfy 1 <= k <= {n} augment groups"
                )
        if self.cl.steps_per_split and len(self.cl.steps_per_split) != len(self.eval.split_indices):
            raise ConfigError(
                "cl.steps_per_split must have one entry per eval.split_indices entry"
            )
        if self.eval.jobs < 1:
            raise ConfigError("eval.jobs must be >= 1")


_SECTION_TYPES = {
    "model": ModelConfig,
    "training": TrainConfig,
    "cl": CLSection,
    "data": DatasetSpec,
    "eval": EvalSection,
}

# Desk-scale model used by the synthetic benchmark presets.
_TINY_COMMON = dict(
    model_dim=32, num_layers=2, output_dim=30, feature_dim=16, time_reduction_factor=2,
    ff_expert_dim=8, conv_kernel=7, dropout=0.05, max_relative_distance=16,
)
_TINY_TRAINING = dict(
    steps=400, lr=3e-3, eval_every=50, batch_utts=8, batch_frames=1200,
    n_freq_masks=1, freq_mask_width=2, n_time_masks=1, time_mask_width=4,
)
_TINY_CL = dict(
    steps=90, steps_per_split="30,60,90", lr=1.5e-3, batch_utts=8, batch_frames=1200,
    n_freq_masks=1, freq_mask_width=2, n_time_masks=1, time_mask_width=4,
)

PRESETS: dict[str, dict] = {
    name: {"model": dict(patch)} for name, patch in ARCH_PRESETS.items()
}
PRESETS.update({
    "tiny-ff": {
        "model": dict(_TINY_COMMON, ff_core_experts=2, ff_aug_experts=4,
                      att_core_heads=2, conv_channels_per_expert=4, conv_core_experts=2),
        "training": dict(_TINY_TRAINING),
        "cl": dict(_TINY_CL, k_ffn=2),
    },
    "tiny-base-ff": {
        "model": dict(_TINY_COMMON, ff_core_experts=2,
                      att_core_heads=2, conv_channels_per_expert=4, conv_core_experts=2),
        "training": dict(_TINY_TRAINING),
        "cl": dict(_TINY_CL),
    },
    "tiny-conv": {
        "model": dict(_TINY_COMMON, ff_core_experts=4, att_core_heads=2,
                      conv_channels_per_expert=4, conv_core_experts=2, conv_aug_experts=4),
        "training": dict(_TINY_TRAINING),
        "cl": dict(_TINY_CL, k_conv=3),
    },
    "tiny-base-conv": {
        "model": dict(_TINY_COMMON, ff_core_experts=4, att_core_heads=2,
                      conv_channels_per_expert=4, conv_core_experts=2),
        "training": dict(_TINY_TRAINING),
        "cl": dict(_TINY_CL, k_conv=3),
    },
    "tiny-wide-conv": {
        # Donor for the recombination grid: plain model as wide as tiny-conv
        # core plus augment.
        "model": dict(_TINY_COMMON, ff_core_experts=4, att_core_heads=2,
                      conv_channels_per_expert=4, conv_core_experts=6),
        "training": dict(_TINY_TRAINING),
        "cl": dict(_TINY_CL, k_conv=3),
    },
})


def _parse_value(raw, target_type, path: str):
    import typing

    if isinstance(raw, (int, float, bool, tuple)) or raw is None:
        value = raw
    else:
        raw = str(raw).strip()
        origin = typing.get_origin(target_type)
        try:
            if target_type is bool:
                low = raw.lower()
                if low in ("true", "1", "yes", "on"):
                    return True
                if low in ("false", "0", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            if target_type is int:
                return int(raw)
            if target_type is float:
                return float(raw)
            if target_type is str:
                return raw
            if target_type == int | None:
                return None if raw.lower() in ("none", "null", "") else int(raw)
            if target_type == str | None:
                return None if raw.lower() in ("none", "null", "") else raw
            if origin is tuple:
                args = typing.get_args(target_type)
                elem = args[0] if args else str
                if raw == "":
                    return ()
                return tuple(elem(x.strip()) for x in raw.split(","))
            raise ValueError(f"unsupported config field type {target_type}")
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from None
    # Already-typed values (from preset dicts): light coercion for tuples.
    if typing.get_origin(target_type) is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(value, str):
        return _parse_value(value, target_type, path)
    return value


def _field_types(section_cls) -> dict[str, object]:
    import typing

    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in fields(section_cls)}


def _apply(values: dict[str, dict], section: str, key: str, raw, source: str) -> None:
    if section not in _SECTION_TYPES:
        raise ConfigError(f"{source}: unknown section [{section}]")
    types = _field_types(_SECTION_TYPES[section])
    alias = _KEY_ALIASES.get((section, key), key)
    if alias not in types:
        raise ConfigError(f"{source}: unknown key {section}.{key}")
    values[section][alias] = _parse_value(raw, types[alias], f"{section}.{key}")


def load_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Resolve defaults, preset, file, and overrides into a validated RunConfig."""
    values: dict[str, dict] = {sec: {} for sec in _SECTION_TYPES}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; options: {sorted(PRESETS)}")
        for section, patch in PRESETS[preset].items():
            for key, raw in patch.items():
                _apply(values, section, key, raw, f"preset {preset}")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive
        parser.read(path)
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw, str(path))
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(values, section, key, raw, "override")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        try:
            sections[name] = cls(**values[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}]: {e}") from None
    cfg = RunConfig(**sections, preset=preset)
    cfg.validate()
    return cfg
