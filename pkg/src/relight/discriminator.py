"""Whole-image and random-patch discriminators for adversarial training.

Both share the same architecture — three stride-2 3x3 convolutions
(channels 16 -> 32 -> 64, leaky_relu 0.2) followed by a linear layer to a
single logit — instantiated separately for the full image and for the
smaller random patches.  Outputs are raw logits; loss code applies a
numerically stable log-sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

CONV_CHANNELS = (16, 32, 64)


@dataclass
class DiscriminatorWeights:
    input_size: int  # square side the stack was built for
    convs: list = field(default_factory=list)  # [(w, b)] * 3, stride 2, pad 1
    linear_w: Tensor = None
    linear_b: Tensor = None


def _spatial_after_convs(size: int) -> int:
    for _ in CONV_CHANNELS:
        size = (size + 2 - 3) // 2 + 1  # 3x3, stride 2, pad 1
    return size


def init_discriminator(input_size: int, seed: int) -> DiscriminatorWeights:
    """Deterministic fan-in uniform init for a given square input side."""
    if input_size < 8:
        raise ConfigError(f"discriminator input side {input_size} too small for three stride-2 convs")
    rng = np.random.default_rng(seed)
    convs = []
    cin = 3
    for cout in CONV_CHANNELS:
        bound = 1.0 / np.sqrt(9 * cin)
        w = Tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(cout), requires_grad=True)
        convs.append((w, b))
        cin = cout
    side = _spatial_after_convs(input_size)
    feat = CONV_CHANNELS[-1] * side * side
    bound = 1.0 / np.sqrt(feat)
    return DiscriminatorWeights(
        input_size=input_size,
        convs=convs,
        linear_w=Tensor(rng.uniform(-bound, bound, size=(feat, 1)), requires_grad=True),
        linear_b=Tensor(np.zeros(1), requires_grad=True),
    )


def discriminate(x: Tensor, w: DiscriminatorWeights) -> Tensor:
    """Score one [3,S,S] image or patch; returns a scalar logit tensor."""
    if x.shape != (3, w.input_size, w.input_size):
        raise ConfigError(f"discriminator built for 3x{w.input_size}x{w.input_size}, got {x.shape}")
    feat = x
    for cw, cb in w.convs:
        feat = T.leaky_relu(T.conv2d(feat, cw, cb, stride=2, pad=1), 0.2)
    flat = T.reshape(feat, (1, feat.size))
    logit = T.add_bias(flat @ w.linear_w, w.linear_b)
    return T.reshape(logit, ())


def discriminate_global(x: Tensor, w: DiscriminatorWeights) -> Tensor:
    """Whole-image logit; probability of 'real' is sigmoid(logit)."""
    return discriminate(x, w)


def sample_patch_positions(rng, height: int, width: int, patch: int, n: int) -> list[tuple[int, int]]:
    """n uniform top-left offsets for patch x patch crops inside the image."""
    if patch > height or patch > width:
        raise ConfigError(f"patch side {patch} exceeds image {height}x{width}")
    return [
        (int(rng.integers(0, height - patch + 1)), int(rng.integers(0, width - patch + 1)))
        for _ in range(n)
    ]


def discriminate_local(
    x: Tensor, w: DiscriminatorWeights, rng, n_patches: int = 4
) -> list[tuple[Tensor, Tensor]]:
    """Score n_patches random crops of x; returns [(patch, logit)] pairs.

    Crop positions come from rng, so a seeded generator reproduces them;
    gradients flow through the crops into x.
    """
    _, H, Wd = x.shape
    patch = w.input_size
    out = []
    for top, left in sample_patch_positions(rng, H, Wd, patch, n_patches):
        p = T.crop(x, top, left, patch, patch)
        out.append((p, discriminate(p, w)))
    return out
