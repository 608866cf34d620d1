"""Run configuration: a flat INI-style key-value file with sections.

Every key has a default, unknown sections or keys are hard errors (they are
how ablation-grid typos surface), and toggle-dependent keys may only be set
explicitly when their toggle is on.  ``share_decoder`` defaults to ``auto``:
shared parameters whenever any distillation component is enabled, separate
otherwise.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..network import DetectorConfig

MD_VARIANTS = ("multi_target", "conditional", "conditional_hard")
PD_VARIANTS = ("naive", "weighted", "gated", "query_prior")
AUX_VARIANTS = ("md", "re_matching", "original_matching")


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 32
    num_queries: int = 24
    num_stages: int = 3
    grid_size: int = 8
    num_classes: int = 5
    ffn_dim: int = 64
    num_heads: int = 4
    share_decoder: str = "auto"  # auto | true | false
    anchor_bias_floor: float = 0.05


@dataclass
class LossSection:
    qfl_gamma: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    cost_cls: float = 2.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class DistillSection:
    md: bool = False
    pd: bool = False
    aux: bool = False
    md_variant: str = "multi_target"
    md_reg: bool = True
    md_downweight: float = 0.51
    md_cls_downweight: bool = False
    md_iou_threshold: float = 0.5
    pd_variant: str = "gated"
    pd_cls_mode: str = "full_vector"  # full_vector | single_entry
    pd_alpha: float = 0.25
    pd_beta: float = 0.75
    aux_variant: str = "md"


@dataclass
class EmaSection:
    decay: float = 0.99
    stop_update: bool = False
    stop_epoch: int = -1  # -1: freeze at the learning-rate decay epoch


@dataclass
class ScheduleSection:
    epochs: int = 20
    batch_size: int = 8
    optimizer: str = "adam"  # adam | sgd
    lr: float = 4e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_epoch: int = 16
    lr_decay_factor: float = 0.1


@dataclass
class DataSection:
    seed: int = 0
    train_scenes: int = 2000
    val_scenes: int = 200
    max_objects: int = 6
    noise_sigma: float = 0.1
    size_min: float = 0.08
    size_max: float = 0.5
    max_overlap_iou: float = 0.7
    train_file: str = ""
    val_file: str = ""


@dataclass
class RunSection:
    seed: int = 0
    out: str = ""
    reference_mode: bool = True
    precision: str = "float32"  # float32 | float64
    log_every: int = 50


@dataclass
class TrainConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    distill: DistillSection = field(default_factory=DistillSection)
    ema: EmaSection = field(default_factory=EmaSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self, explicit: set[tuple[str, str]] | None = None) -> None:
        d = self.distill
        if d.md_variant not in MD_VARIANTS:
            raise ConfigError(f"unknown md_variant: {d.md_variant}")
        if d.pd_variant not in PD_VARIANTS:
            raise ConfigError(f"unknown pd_variant: {d.pd_variant}")
        if d.aux_variant not in AUX_VARIANTS:
            raise ConfigError(f"unknown aux_variant: {d.aux_variant}")
        if d.pd_cls_mode not in ("full_vector", "single_entry"):
            raise ConfigError(f"unknown pd_cls_mode: {d.pd_cls_mode}")
        if self.model.share_decoder not in ("auto", "true", "false"):
            raise ConfigError(
                f"share_decoder must be auto/true/false: {self.model.share_decoder}"
            )
        if not 0.0 < d.md_downweight <= 1.0:
            raise ConfigError(f"md_downweight must lie in (0,1]: {d.md_downweight}")
        if not 0.0 <= self.ema.decay < 1.0:
            raise ConfigError(f"ema decay must lie in [0,1): {self.ema.decay}")
        if self.schedule.epochs < 1 or self.schedule.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.schedule.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer: {self.schedule.optimizer}")
        if self.run.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision: {self.run.precision}")
        if explicit:
            # a gated key explicitly set away from its default while the
            # component toggle is off is a config error (writing defaults
            # back, e.g. from a resolved-config dump, stays legal)
            defaults = DistillSection()
            gated = {
                ("distill", "md_variant"): d.md,
                ("distill", "md_reg"): d.md,
                ("distill", "md_downweight"): d.md,
                ("distill", "md_cls_downweight"): d.md,
                ("distill", "md_iou_threshold"): d.md,
                ("distill", "pd_variant"): d.pd,
                ("distill", "pd_cls_mode"): d.pd,
                ("distill", "pd_alpha"): d.pd,
                ("distill", "pd_beta"): d.pd,
                ("distill", "aux_variant"): d.aux,
            }
            for (section, key), enabled in gated.items():
                if (
                    (section, key) in explicit
                    and not enabled
                    and getattr(d, key) != getattr(defaults, key)
                ):
                    raise ConfigError(
                        f"[{section}] {key} set but its component toggle is off"
                    )

    def share_decoder_resolved(self) -> bool:
        if self.model.share_decoder == "auto":
            return self.distill.md or self.distill.pd or self.distill.aux
        return self.model.share_decoder == "true"

    def stop_epoch_resolved(self) -> int | None:
        if not self.ema.stop_update:
            return None
        if self.ema.stop_epoch >= 0:
            return self.ema.stop_epoch
        return self.schedule.lr_decay_epoch

    def detector_config(self) -> DetectorConfig:
        m = self.model
        return DetectorConfig(
            d_model=m.d_model,
            num_queries=m.num_queries,
            num_stages=m.num_stages,
            grid_size=m.grid_size,
            num_classes=m.num_classes,
            ffn_dim=m.ffn_dim,
            num_heads=m.num_heads,
            share_decoder=self.share_decoder_resolved(),
            anchor_bias_floor=m.anchor_bias_floor,
        )

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def resolved_dict(self) -> dict:
        out = self.to_dict()
        out["model"]["share_decoder"] = self.share_decoder_resolved()
        out["ema"]["stop_epoch"] = self.stop_epoch_resolved()
        return out

    def to_text(self) -> str:
        buf = io.StringIO()
        for name in _SECTIONS:
            buf.write(f"[{name}]\n")
            for f in fields(getattr(self, name)):
                buf.write(f"{f.name} = {getattr(getattr(self, name), f.name)}\n")
            buf.write("\n")
        return buf.getvalue()


_SECTIONS = {
    "model": ModelSection,
    "loss": LossSection,
    "distill": DistillSection,
    "ema": EmaSection,
    "schedule": ScheduleSection,
    "data": DataSection,
    "run": RunSection,
}

_BOOL_VALUES = {
    "true": True,
    "false": False,
    "1": True,
    "0": False,
    "yes": True,
    "no": False,
    "on": True,
    "off": False,
}


def _coerce(section: str, key: str, raw: str, target_type: type):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() not in _BOOL_VALUES:
            raise ConfigError(f"[{section}] {key}: not a boolean: {raw!r}")
        return _BOOL_VALUES[raw.lower()]
    if target_type is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: not an integer: {raw!r}") from exc
    if target_type is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: not a number: {raw!r}") from exc
    return raw


def parse_config(text: str) -> TrainConfig:
    """Parse a config file into a validated :class:`TrainConfig`."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=(";", "#")
    )
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    cfg = TrainConfig()
    explicit: set[tuple[str, str]] = set()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f.type for f in fields(target)}
        types = {f.name: type(getattr(target, f.name)) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key in [{section}]: {key}")
            setattr(target, key, _coerce(section, key, raw, types[key]))
            explicit.add((section, key))
    cfg.validate(explicit)
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def apply_overrides(base: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a copy of ``base`` with nested ``{section: {key: value}}``
    overrides applied; only the overridden keys count as explicit for the
    toggle-consistency validation."""
    import copy

    cfg = copy.deepcopy(base)
    explicit: set[tuple[str, str]] = set()
    for section, items in overrides.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: [{section}]")
        target = getattr(cfg, section)
        valid = {f.name for f in fields(target)}
        for key, value in items.items():
            if key not in valid:
                raise ConfigError(f"unknown key in [{section}]: {key}")
            setattr(target, key, value)
            explicit.add((section, key))
    cfg.validate(explicit)
    return cfg


def config_from_dict(overrides: dict) -> TrainConfig:
    """Build a config from nested ``{section: {key: value}}`` overrides."""
    return apply_overrides(TrainConfig(), overrides)
