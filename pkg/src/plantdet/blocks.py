"""Convolutional building blocks of the backbone and neck: CBS, C3, SPPF."""

from __future__ import annotations

from . import functional as F
from .errors import DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, concat


class CBS(Module):
    """Conv (no bias) -> BatchNorm -> SiLU."""

    def __init__(self, rng, cin: int, cout: int, k: int = 1, stride: int = 1,
                 padding: int | None = None):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.conv = Conv2d(rng, cin, cout, k, stride, padding, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise DimensionError(f"CBS expects {self.cin} input channels, got {x.shape}")
        return F.silu(self.bn(self.conv(x)))


class Bottleneck(Module):
    def __init__(self, rng, cin: int, cout: int, shortcut: bool = True, expansion: float = 1.0):
        super().__init__()
        hidden = int(cout * expansion)
        self.cv1 = CBS(rng, cin, hidden, 1)
        self.cv2 = CBS(rng, hidden, cout, 3)
        self.add = shortcut and cin == cout

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(Module):
    """CSP bottleneck: two parallel 1x1 branches, n bottlenecks on one, 1x1 fuse."""

    def __init__(self, rng, cin: int, cout: int, n: int = 1, shortcut: bool = True,
                 expansion: float = 0.5):
        super().__init__()
        hidden = int(cout * expansion)
        self.cv1 = CBS(rng, cin, hidden, 1)
        self.cv2 = CBS(rng, cin, hidden, 1)
        self.m = [Bottleneck(rng, hidden, hidden, shortcut, 1.0) for _ in range(n)]
        self.cv3 = CBS(rng, 2 * hidden, cout, 1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        for block in self.m:
            y = block(y)
        return self.cv3(concat([y, self.cv2(x)], axis=1))


class SPPF(Module):
    """Three serial k x k stride-1 max-pools; input and every pool output are concatenated."""

    def __init__(self, rng, cin: int, cout: int, k: int = 5):
        super().__init__()
        hidden = cin // 2
        self.k = k
        self.cv1 = CBS(rng, cin, hidden, 1)
        self.cv2 = CBS(rng, hidden * 4, cout, 1)

    def pooled(self, x: Tensor) -> Tensor:
        """The concatenated [x, p1, p2, p3] feature, before the output conv."""
        p = self.k // 2
        y1 = F.maxpool2d(x, self.k, 1, p)
        y2 = F.maxpool2d(y1, self.k, 1, p)
        y3 = F.maxpool2d(y2, self.k, 1, p)
        return concat([x, y1, y2, y3], axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.cv2(self.pooled(self.cv1(x)))


def cbs_forward(x: Tensor, block: CBS) -> Tensor:
    return block(x)


def c3_forward(x: Tensor, block: C3) -> Tensor:
    return block(x)


def sppf_forward(x: Tensor, block: SPPF) -> Tensor:
    return block(x)
