"""The PlantDet network: hybrid C3/ST backbone, PAN-FPN neck, three-scale head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .attention import STBlock
from .blocks import C3, CBS, SPPF
from .boxes import STRIDES, AnchorSet
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, concat, upsample_nearest2x

STRATEGIES = ((0, 4), (1, 3), (2, 2), (3, 1), (4, 0))
BACKBONE_DEPTHS = (3, 6, 9, 3)
NECK_DEPTH = 3
OBJ_PRIOR = 0.01


@dataclass(frozen=True)
class BackboneConfig:
    """Backbone layout.  Defaults are the tiny desk-scale profile.

    ``c3_count`` C3 stages come first, followed by ``st_count`` ST stages.
    ``attention`` selects windowed (W-MSA/SW-MSA) or global attention inside
    the ST stages.
    """

    c3_count: int = 2
    st_count: int = 2
    width: int = 16
    depth_multiple: float = 0.1
    window: int = 5
    head_dim: int = 32
    mlp_ratio: float = 4.0
    attention: str = "window"
    rel_pos_bias: bool = False

    def __post_init__(self):
        if (self.c3_count, self.st_count) not in STRATEGIES:
            raise ConfigError(
                f"strategy ({self.c3_count}, {self.st_count}) not in {list(STRATEGIES)}")
        if self.width < 1 or self.window < 1 or self.head_dim < 1:
            raise ConfigError("width, window and head_dim must be positive")
        if self.depth_multiple <= 0:
            raise ConfigError("depth_multiple must be positive")
        if self.attention not in ("window", "global"):
            raise ConfigError(f"attention must be 'window' or 'global', got {self.attention!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        """Stem width followed by the four stage widths."""
        return tuple(self.width * 2 ** i for i in range(5))

    @property
    def stage_kinds(self) -> tuple[str, ...]:
        return ("c3",) * self.c3_count + ("st",) * self.st_count

    def depth(self, base: int) -> int:
        return max(1, round(base * self.depth_multiple))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.p3, self.p4, self.p5]


class DetectorModel(Module):
    def __init__(self, cfg: BackboneConfig, nc: int, anchors: AnchorSet | None = None,
                 seed: int = 0, class_names: list[str] | None = None):
        super().__init__()
        if nc < 1:
            raise ConfigError(f"class count must be >= 1, got {nc}")
        anchors = anchors or AnchorSet()
        if class_names is not None and len(class_names) != nc:
            raise ConfigError(f"{len(class_names)} class names for nc={nc}")
        self.cfg, self.nc, self.anchors = cfg, nc, anchors
        self.class_names = list(class_names) if class_names else [str(i) for i in range(nc)]
        self.seed = seed
        self.na = 3
        self.no = 5 + nc
        rng = np.random.default_rng(seed)
        w = cfg.widths

        for i, kind in enumerate(cfg.stage_kinds):
            if kind == "st" and w[i + 1] % cfg.head_dim:
                raise ConfigError(
                    f"ST stage {i + 1} width {w[i + 1]} not divisible by head dim {cfg.head_dim}")

        # backbone
        self.stem = CBS(rng, 3, w[0], 6, 2, 2)
        self.down = [CBS(rng, w[i], w[i + 1], 3, 2) for i in range(4)]
        self.stages = []
        for i, kind in enumerate(cfg.stage_kinds):
            c = w[i + 1]
            if kind == "c3":
                self.stages.append(C3(rng, c, c, cfg.depth(BACKBONE_DEPTHS[i]), shortcut=True))
            else:
                self.stages.append(STBlock(rng, c, cfg.head_dim, cfg.window, cfg.mlp_ratio,
                                           cfg.attention, cfg.rel_pos_bias))
        self.sppf = SPPF(rng, w[4], w[4], 5)

        # neck
        n = cfg.depth(NECK_DEPTH)
        c3_, c4_, c5_ = w[2], w[3], w[4]
        self.lat5 = CBS(rng, c5_, c4_, 1)
        self.td4 = C3(rng, 2 * c4_, c4_, n, shortcut=False)
        self.lat4 = CBS(rng, c4_, c3_, 1)
        self.td3 = C3(rng, 2 * c3_, c3_, n, shortcut=False)
        self.down3 = CBS(rng, c3_, c3_, 3, 2)
        self.bu4 = C3(rng, 2 * c3_, c4_, n, shortcut=False)
        self.down4 = CBS(rng, c4_, c4_, 3, 2)
        self.bu5 = C3(rng, 2 * c4_, c5_, n, shortcut=False)

        # head
        self.head = [Conv2d(rng, c, self.na * self.no, 1, bias=True) for c in (c3_, c4_, c5_)]
        self._init_head_bias()

    def _init_head_bias(self) -> None:
        obj = math.log(OBJ_PRIOR / (1.0 - OBJ_PRIOR))
        cls = math.log(0.6 / (self.nc - 0.99))
        for conv in self.head:
            b = conv.bias.data.reshape(self.na, self.no)
            b[:, 4] = obj
            b[:, 5:] = cls

    @property
    def strides(self) -> tuple[int, ...]:
        return STRIDES

    def backbone_forward(self, x: Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected [B, 3, H, W] input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise DimensionError(f"input sides must be multiples of 32, got {x.shape[2:]}")
        y = self.stem(x)
        taps = []
        for down, stage in zip(self.down, self.stages):
            y = stage(down(y))
            taps.append(y)
        return FeaturePyramid(taps[1], taps[2], self.sppf(taps[3]))

    def neck_forward(self, fp: FeaturePyramid) -> FeaturePyramid:
        h10 = self.lat5(fp.p5)
        h13 = self.td4(concat([upsample_nearest2x(h10), fp.p4], axis=1))
        h14 = self.lat4(h13)
        p3 = self.td3(concat([upsample_nearest2x(h14), fp.p3], axis=1))
        p4 = self.bu4(concat([self.down3(p3), h14], axis=1))
        p5 = self.bu5(concat([self.down4(p4), h10], axis=1))
        return FeaturePyramid(p3, p4, p5)

    def head_forward(self, fp: FeaturePyramid) -> list[Tensor]:
        """Raw logits ``[B, na, H, W, 5 + nc]`` per level (no activation)."""
        out = []
        for conv, feat in zip(self.head, fp.levels()):
            y = conv(feat)
            b, _, h, w = y.shape
            out.append(y.reshape(b, self.na, self.no, h, w).permute(0, 1, 3, 4, 2))
        return out

    def forward(self, x: Tensor) -> list[Tensor]:
        return self.head_forward(self.neck_forward(self.backbone_forward(x)))

    def config_dict(self) -> dict:
        return {
            "backbone": self.cfg.to_dict(),
            "nc": self.nc,
            "anchors": [list(a) for a in self.anchors.sizes],
            "class_names": list(self.class_names),
            "seed": self.seed,
        }


def build_model(cfg: BackboneConfig, nc: int, anchors: AnchorSet | None = None, seed: int = 0,
                class_names: list[str] | None = None) -> DetectorModel:
    return DetectorModel(cfg, nc, anchors, seed, class_names)


def backbone_forward(model: DetectorModel, x: Tensor) -> FeaturePyramid:
    return model.backbone_forward(x)


def neck_forward(model: DetectorModel, fp: FeaturePyramid) -> FeaturePyramid:
    return model.neck_forward(fp)


def head_forward(model: DetectorModel, fp: FeaturePyramid) -> list[Tensor]:
    return model.head_forward(fp)


def count_parameters(model: Module) -> int:
    return model.param_store().numel()
