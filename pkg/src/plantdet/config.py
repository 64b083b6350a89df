"""Run configuration: TOML file + profile + command-line overrides.

Example file::

    [model]
    strategy = "2:2"      # C3 stages : ST stages
    width = 16
    attention = "window"  # or "global"

    [train]
    epochs = 300
    batch = 32
    lr = 0.01

    [data]
    path = "datasets/leaves"
    resize = "stretch"

Unknown sections or keys are rejected so typos fail before any work starts.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .boxes import AnchorSet
from .errors import ConfigError, ContractError
from .loss import LossWeights
from .model import STRATEGIES, BackboneConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class ModelSection:
    strategy: str = "2:2"
    width: int = 16
    depth_multiple: float = 0.1
    window: int = 5
    head_dim: int = 32
    mlp_ratio: float = 4.0
    attention: str = "window"
    rel_pos_bias: bool = False
    anchors: tuple = ()  # 18 numbers (w, h pairs) in input pixels; empty = default set

    @property
    def counts(self) -> tuple[int, int]:
        return parse_strategy(self.strategy)

    def backbone(self) -> BackboneConfig:
        c3, st = self.counts
        return BackboneConfig(c3, st, self.width, self.depth_multiple, self.window, self.head_dim,
                              self.mlp_ratio, self.attention, self.rel_pos_bias)

    def anchor_set(self) -> AnchorSet:
        return AnchorSet.from_flat(self.anchors) if self.anchors else AnchorSet()


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 300
    batch: int = 32
    lr: float = 0.01
    lr_final: float = 0.01  # final lr as a fraction of the initial one
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: float = 3.0
    warmup_momentum: float = 0.8
    seed: int = 0
    img_size: int = 640
    train_split: str = "train"
    val_split: str = "val"
    eval_interval: int = 1


@dataclass(frozen=True)
class EvalSection:
    conf: float = 0.001
    iou: float = 0.6
    max_det: int = 300
    match_iou: float = 0.5
    ap_method: str = "all"
    split: str = "test"


@dataclass(frozen=True)
class DataSection:
    path: str = ""
    resize: str = "stretch"


@dataclass(frozen=True)
class LossSection:
    box: float = 0.05
    obj: float = 1.0
    cls: float = -1.0  # negative = 0.5 * nc / 80
    balance: tuple = (4.0, 1.0, 0.4)
    obj_pos_weight: float = 1.0
    cls_pos_weight: float = 1.0
    obj_target: str = "iou"

    def weights(self) -> LossWeights:
        return LossWeights(self.box, self.obj, None if self.cls < 0 else self.cls,
                           tuple(self.balance), self.obj_pos_weight, self.cls_pos_weight,
                           self.obj_target)


@dataclass(frozen=True)
class SynthSection:
    n_images: int = 8
    image_size: int = 128
    classes: int = 3
    leaves_min: int = 2
    leaves_max: int = 4
    occlusion: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    loss: LossSection = field(default_factory=LossSection)
    synth: SynthSection = field(default_factory=SynthSection)
    profile: str = "default"

    def to_dict(self) -> dict:
        return asdict(self)

    def with_updates(self, **sections) -> "RunConfig":
        """``cfg.with_updates(train={"epochs": 3})`` -> new validated config."""
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        out.validate()
        return out

    def validate(self) -> None:
        m, t, e, d, lo = self.model, self.train, self.eval, self.data, self.loss
        try:
            m.backbone()
            m.anchor_set()
            lo.weights()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (t.epochs >= 1, "train.epochs must be >= 1"),
            (t.batch >= 1, "train.batch must be >= 1"),
            (t.lr > 0, "train.lr must be positive"),
            (0 < t.lr_final <= 1, "train.lr_final must lie in (0, 1]"),
            (0 <= t.momentum < 1, "train.momentum must lie in [0, 1)"),
            (t.weight_decay >= 0, "train.weight_decay must be >= 0"),
            (t.warmup_epochs >= 0, "train.warmup_epochs must be >= 0"),
            (t.img_size > 0 and t.img_size % 32 == 0, "train.img_size must be a positive multiple of 32"),
            (t.eval_interval >= 1, "train.eval_interval must be >= 1"),
            (0 <= e.conf <= 1, "eval.conf must lie in [0, 1]"),
            (0 <= e.iou <= 1, "eval.iou must lie in [0, 1]"),
            (0 < e.match_iou <= 1, "eval.match_iou must lie in (0, 1]"),
            (e.max_det >= 1, "eval.max_det must be >= 1"),
            (e.ap_method in ("all", "11"), "eval.ap_method must be 'all' or '11'"),
            (d.resize in ("stretch", "letterbox"), "data.resize must be 'stretch' or 'letterbox'"),
            (len(lo.balance) == 3, "loss.balance needs three values"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if d.path and not Path(d.path).exists():
            raise ConfigError(f"data.path {d.path} does not exist")


def parse_strategy(text: str) -> tuple[int, int]:
    try:
        c3, st = (int(v) for v in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"strategy must look like 'c3:st', got {text!r}") from None
    if (c3, st) not in STRATEGIES:
        raise ConfigError(f"strategy {c3}:{st} not in {[f'{a}:{b}' for a, b in STRATEGIES]}")
    return c3, st


PROFILES = {
    "default": {},
    # Desk-scale acceptance run: a width-16 model overfitting 8 synthetic images.
    "smoke": {
        "model": {"width": 16, "strategy": "2:2"},
        "train": {"epochs": 300, "batch": 8, "img_size": 128, "lr": 0.01, "warmup_epochs": 3.0,
                  "train_split": "all", "val_split": "all", "eval_interval": 25, "weight_decay": 0.0},
        "eval": {"split": "all"},
        "loss": {"cls": 0.5},
        "synth": {"n_images": 8, "image_size": 128, "classes": 3, "leaves_min": 2, "leaves_max": 4},
    },
}


def _section_types(cls) -> dict:
    return {f.name: f for f in fields(cls)}


def _coerce(section: str, key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} must be a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    return value


def _merge(cfg: RunConfig, data: dict, origin: str) -> RunConfig:
    sections = {f.name for f in fields(RunConfig)} - {"profile"}
    for name, values in data.items():
        if name not in sections:
            raise ConfigError(f"{origin}: unknown section [{name}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: [{name}] must be a table")
        current = getattr(cfg, name)
        known = _section_types(type(current))
        updates = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{origin}: unknown key {name}.{key}")
            updates[key] = _coerce(name, key, value, getattr(current, key))
        cfg = replace(cfg, **{name: replace(current, **updates)})
    return cfg


def load_config(path=None, profile: str | None = None, overrides: dict | None = None,
                base: dict | None = None) -> RunConfig:
    """Defaults <- profile <- ``base`` <- config file <- overrides, then validate.

    ``base`` is a ``RunConfig.to_dict()`` snapshot, e.g. the one stored in a checkpoint.
    """
    cfg = RunConfig()
    base = dict(base or {})
    prof = profile or base.pop("profile", None) or "default"
    base.pop("profile", None)
    if prof not in PROFILES:
        raise ConfigError(f"unknown profile {prof!r} (have {sorted(PROFILES)})")
    cfg = replace(_merge(cfg, PROFILES[prof], f"profile {prof}"), profile=prof)
    if base:
        cfg = _merge(cfg, base, "stored config")
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = _merge(cfg, data, str(path))
    if overrides:
        cfg = _merge(cfg, overrides, "command line")
    cfg.validate()
    return cfg
