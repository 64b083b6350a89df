"""Window attention (W-MSA / SW-MSA), a global MSA baseline, and the ST block.

Feature maps inside this module are channel-last ``[B, H, W, C]``.  Maps whose
sides are not multiples of the window size are zero-padded on the bottom/right
after the first LayerNorm and cropped again after attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, DimensionError
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .tensor import Tensor, pad, roll

MASK_VALUE = -1e4


@dataclass(frozen=True)
class WindowSpec:
    window: int
    shift: int
    height: int
    width: int

    def __post_init__(self):
        if self.window < 1:
            raise ContractError(f"window size must be positive, got {self.window}")
        if self.shift not in (0, self.window // 2):
            raise ContractError(f"shift must be 0 or {self.window // 2}, got {self.shift}")

    @property
    def pad_h(self) -> int:
        return (-self.height) % self.window

    @property
    def pad_w(self) -> int:
        return (-self.width) % self.window

    @property
    def padded_h(self) -> int:
        return self.height + self.pad_h

    @property
    def padded_w(self) -> int:
        return self.width + self.pad_w

    @property
    def grid(self) -> tuple[int, int]:
        return self.padded_h // self.window, self.padded_w // self.window

    @property
    def num_windows(self) -> int:
        gh, gw = self.grid
        return gh * gw


def window_partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """``[B, Hp, Wp, C]`` -> ``[B * nW, W*W, C]``, windows in row-major order."""
    b, h, w, c = x.shape
    ws = spec.window
    if (h, w) != (spec.padded_h, spec.padded_w) or h % ws or w % ws:
        raise DimensionError(
            f"window_partition needs a {spec.padded_h}x{spec.padded_w} map divisible by {ws}, got {x.shape}")
    gh, gw = h // ws, w // ws
    y = x.reshape(b, gh, ws, gw, ws, c).permute(0, 1, 3, 2, 4, 5)
    return y.reshape(b * gh * gw, ws * ws, c)


def window_reverse(windows: Tensor, spec: WindowSpec, height: int, width: int) -> Tensor:
    """Inverse of :func:`window_partition` for a ``height x width`` padded map."""
    ws = spec.window
    if height % ws or width % ws:
        raise DimensionError(f"{height}x{width} map is not divisible by window {ws}")
    gh, gw = height // ws, width // ws
    n, tokens, c = windows.shape
    if tokens != ws * ws or n % (gh * gw):
        raise DimensionError(
            f"{windows.shape} windows do not tile a {height}x{width} map with window {ws}")
    b = n // (gh * gw)
    y = windows.reshape(b, gh, gw, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return y.reshape(b, height, width, c)


def _region_labels(n: int, window: int, shift: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    if n > window:
        labels[n - window:n - shift] = 1
        labels[n - shift:] = 2
    return labels


@lru_cache(maxsize=64)
def _mask_array(window: int, shift: int, hp: int, wp: int) -> np.ndarray:
    rows = _region_labels(hp, window, shift)
    cols = _region_labels(wp, window, shift)
    ids = rows[:, None] * 3 + cols[None, :]
    gh, gw = hp // window, wp // window
    ids = ids.reshape(gh, window, gw, window).transpose(0, 2, 1, 3).reshape(gh * gw, window * window)
    mask = np.where(ids[:, :, None] != ids[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def attention_mask(spec: WindowSpec) -> Tensor:
    """Additive ``[nW, W*W, W*W]`` mask for shifted windows.

    Positions rolled in from the opposite border of the map form their own
    region and may not attend across the seam.  An axis spanned by a single
    window has no seam: rolling it only permutes tokens inside that window.
    """
    if spec.shift == 0:
        raise ContractError("attention_mask is only defined for shifted windows (shift > 0)")
    return Tensor(_mask_array(spec.window, spec.shift, spec.padded_h, spec.padded_w))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention over token groups ``[S, N, C]``."""

    def __init__(self, rng, dim: int, heads: int, window: int | None = None,
                 rel_pos_bias: bool = False):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.window = window
        self.rel_bias_table = None
        if rel_pos_bias:
            if window is None:
                raise ConfigError("relative position bias needs a window size")
            self.rel_bias_table = parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
            self._rel_index = _relative_index(window)

    def forward(self, tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        s, n, c = tokens.shape
        if c != self.dim:
            raise DimensionError(f"attention expects width {self.dim}, got {tokens.shape}")
        h, d = self.heads, self.head_dim
        qkv = self.qkv(tokens).reshape(s, n, 3, h, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        logits = q @ k.permute(0, 1, 3, 2)  # [S, h, N, N]
        if self.rel_bias_table is not None:
            bias = self.rel_bias_table[self._rel_index].reshape(n, n, h).permute(2, 0, 1)
            logits = logits + bias
        if mask is not None:
            nw = mask.shape[0]
            if s % nw:
                raise DimensionError(f"{s} windows not a multiple of mask count {nw}")
            tiled = np.broadcast_to(mask[:, None], (nw, h, n, n)).astype(logits.dtype)
            logits = (logits.reshape(s // nw, nw, h, n, n) + Tensor(tiled, dtype=logits.dtype))
            logits = logits.reshape(s, h, n, n)
        attn = F.softmax_lastdim(logits)
        out = (attn @ v).permute(0, 2, 1, 3).reshape(s, n, c)
        return self.proj(out)

    def attention_weights(self, tokens: Tensor, mask: np.ndarray | None = None) -> np.ndarray:
        """Post-softmax weights ``[S, h, N, N]`` (diagnostics only, no tape)."""
        s, n, _ = tokens.shape
        h, d = self.heads, self.head_dim
        qkv = self.qkv(tokens).data.reshape(s, n, 3, h, d).transpose(2, 0, 3, 1, 4)
        logits = (qkv[0] * self.scale) @ qkv[1].transpose(0, 1, 3, 2)
        if mask is not None:
            nw = mask.shape[0]
            logits = (logits.reshape(s // nw, nw, h, n, n) + mask[:, None]).reshape(s, h, n, n)
        return F.softmax_lastdim(Tensor(logits, dtype=logits.dtype)).data


def _relative_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return (rel[0] * (2 * window - 1) + rel[1]).reshape(-1)


def wmsa_forward(x: Tensor, attn: MultiHeadSelfAttention, window: int, shift: int) -> Tensor:
    """Windowed attention over ``x[B, H, W, C]`` with optional cyclic shift."""
    b, h, w, c = x.shape
    spec = WindowSpec(window, shift, h, w)
    if c % attn.heads:
        raise DimensionError(f"width {c} not divisible by {attn.heads} heads")
    y = pad(x, ((0, 0), (0, spec.pad_h), (0, spec.pad_w), (0, 0)))
    mask = None
    if shift:
        y = roll(y, (-shift, -shift), (1, 2))
        mask = _mask_array(window, shift, spec.padded_h, spec.padded_w)
    y = attn(window_partition(y, spec), mask)
    y = window_reverse(y, spec, spec.padded_h, spec.padded_w)
    if shift:
        y = roll(y, (shift, shift), (1, 2))
    if spec.pad_h or spec.pad_w:
        y = y[:, :h, :w, :]
    return y


def global_msa_forward(x: Tensor, attn: MultiHeadSelfAttention) -> Tensor:
    """Full-sequence attention over all ``H*W`` positions of ``x[B, H, W, C]``."""
    b, h, w, c = x.shape
    return attn(x.reshape(b, h * w, c)).reshape(b, h, w, c)


class MLP(Module):
    def __init__(self, rng, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class STSubBlock(Module):
    """LN -> (S)W-MSA -> +res -> LN -> MLP -> +res, channel-last."""

    def __init__(self, rng, dim: int, heads: int, window: int, shift: int, mlp_ratio: float,
                 kind: str = "window", rel_pos_bias: bool = False):
        super().__init__()
        if kind not in ("window", "global"):
            raise ConfigError(f"unknown attention kind {kind!r}")
        self.window, self.shift, self.kind = window, shift, kind
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads, window if kind == "window" else None,
                                           rel_pos_bias and kind == "window")
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        if self.kind == "window":
            y = wmsa_forward(y, self.attn, self.window, self.shift)
        else:
            y = global_msa_forward(y, self.attn)
        x = x + y
        return x + self.mlp(self.norm2(x))


class STBlock(Module):
    """A W-MSA sub-block followed by an SW-MSA sub-block on ``[B, C, H, W]`` maps.

    With ``kind="global"`` both sub-blocks attend over the whole map instead
    (the plain-MSA ablation arm).
    """

    def __init__(self, rng, dim: int, head_dim: int = 32, window: int = 5, mlp_ratio: float = 4.0,
                 kind: str = "window", rel_pos_bias: bool = False):
        super().__init__()
        if dim % head_dim:
            raise ConfigError(f"ST block width {dim} not divisible by head dim {head_dim}")
        heads = dim // head_dim
        self.blocks = [
            STSubBlock(rng, dim, heads, window, 0, mlp_ratio, kind, rel_pos_bias),
            STSubBlock(rng, dim, heads, window, window // 2, mlp_ratio, kind, rel_pos_bias),
        ]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"ST block expects [B, C, H, W], got {x.shape}")
        y = x.permute(0, 2, 3, 1)
        for block in self.blocks:
            y = block(y)
        return y.permute(0, 3, 1, 2)


def st_block_forward(x: Tensor, block: STBlock) -> Tensor:
    return block(x)
