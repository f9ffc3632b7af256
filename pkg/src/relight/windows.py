"""Window partition/reverse and the patch embedding / recovery stack.

These are the tensor-layout primitives of both attention branches: the
local branch slices feature maps into non-overlapping square windows (no
shifting between layers), the global branch turns the image into a short
token sequence via an 8x8 stride-8 convolution and later recovers the
full resolution again.

Windows are flattened row-major: window k covers the s x s block whose
top-left corner is (floor(k / num_w) * s, (k mod num_w) * s), and tokens
inside a window run row by row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, PartitionError
from .tensor import Tensor

PATCH = 8  # global-branch patch side and stride


@dataclass(frozen=True)
class WindowLayout:
    """Geometry of one partition: s divides H and W, windows tile the map."""

    window_size: int
    num_windows_h: int
    num_windows_w: int
    channels: int

    @classmethod
    def of(cls, channels: int, height: int, width: int, s: int) -> "WindowLayout":
        if s < 1 or height % s or width % s:
            raise PartitionError(f"window size {s} does not divide feature map {height}x{width}")
        return cls(s, height // s, width // s, channels)

    @property
    def num_windows(self) -> int:
        return self.num_windows_h * self.num_windows_w


def window_partition(x: Tensor, s: int) -> Tensor:
    """[C,H,W] -> [num_windows, s*s, C]; lossless, exactly inverted by window_reverse."""
    C, H, W = x.shape
    layout = WindowLayout.of(C, H, W, s)
    nh, nw = layout.num_windows_h, layout.num_windows_w
    t = T.reshape(x, (C, nh, s, nw, s))
    t = T.permute(t, (1, 3, 2, 4, 0))  # (nh, nw, s, s, C)
    return T.reshape(t, (nh * nw, s * s, C))


def window_reverse(w: Tensor, s: int, height: int, width: int) -> Tensor:
    """[num_windows, s*s, C] -> [C,H,W]; exact inverse of window_partition."""
    nwin, tokens, C = w.shape
    layout = WindowLayout.of(C, height, width, s)
    if nwin * tokens != height * width or tokens != s * s:
        raise PartitionError(
            f"cannot reverse {nwin} windows of {tokens} tokens into {height}x{width} with size {s}"
        )
    nh, nw = layout.num_windows_h, layout.num_windows_w
    t = T.reshape(w, (nh, nw, s, s, C))
    t = T.permute(t, (4, 0, 2, 1, 3))  # (C, nh, s, nw, s)
    return T.reshape(t, (C, height, width))


def patch_embed(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[3,H,W] -> token sequence [L,d] via an 8x8 stride-8 convolution.

    L = (H/8)*(W/8); token k is the patch at row-major position k.
    """
    _, H, W = x.shape
    if H % PATCH or W % PATCH:
        raise PartitionError(f"patch embedding needs {PATCH} | H and {PATCH} | W, got {H}x{W}")
    d = w.shape[0]
    z = T.conv2d(x, w, b, stride=PATCH)  # (d, H/8, W/8)
    z = T.reshape(z, (d, (H // PATCH) * (W // PATCH)))
    return T.permute(z, (1, 0))


def add_positional_encoding(z: Tensor, p: Tensor) -> Tensor:
    """Elementwise z + p; p is a learnable [L,d] table sized at train resolution."""
    if z.shape != p.shape:
        raise ConfigError(
            f"positional encoding shape {p.shape} does not match sequence {z.shape}; "
            "inference resolution must equal the training resolution"
        )
    return T.add(z, p)


@dataclass
class PatchRecoverWeights:
    """Three stages of x2 nearest upsample -> 3x3 conv -> leaky_relu."""

    convs: list  # [(w, b)] * 3


def patch_recover(z: Tensor, weights: PatchRecoverWeights, height: int, width: int) -> Tensor:
    """[L,d] tokens -> [C,H,W] feature map, undoing the 8x downsampling.

    The token count must equal (H/8)*(W/8) for the configured resolution.
    """
    L, d = z.shape
    hh, ww = height // PATCH, width // PATCH
    if L != hh * ww or height % PATCH or width % PATCH:
        raise ConfigError(f"{L} tokens cannot recover a {height}x{width} map (expected {hh * ww})")
    x = T.permute(z, (1, 0))
    x = T.reshape(x, (d, hh, ww))
    for w, b in weights.convs:
        x = T.upsample_nearest(x, 2)
        x = T.conv2d(x, w, b, stride=1, pad=1)
        x = T.leaky_relu(x, 0.2)
    return x
