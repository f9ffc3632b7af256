"""The five training objectives and their weighted aggregation.

Sign conventions for the adversarial terms: the discriminator loss is the
standard -[log s(real) + log(1 - s(fake))], and the generator loss
defaults to the non-saturating -log s(fake).  The saturating alternative
(minimizing -log(1 - s(fake)), which pushes the generator away from
fooling the discriminator) is kept behind a flag for fidelity
experiments only.  Everything is computed through softplus so no logit
magnitude can overflow.

The content-preservation term compares activations of a frozen
random-weight conv pyramid (an established perceptual-distance proxy)
instead of a pretrained classifier, keeping the build hermetic; the
extractor weights are drawn once from a fixed published seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DivergenceError
from .tensor import Tensor

# Fixed seed for the frozen feature extractor: the bytes "MSATR" read as a
# big-endian integer, so any implementation can reproduce the weights.
FEATURE_EXTRACTOR_SEED = int.from_bytes(b"MSATR", "big")

LOSS_TERMS = ("adv_global", "adv_local", "sfp", "identity", "luminance")


@dataclass(frozen=True)
class LossWeights:
    w_adv_global: float = 1.0
    w_adv_local: float = 1.0
    w_sfp: float = 1.0
    w_identity: float = 0.5
    w_luminance: float = 1.0

    def __post_init__(self):
        for name, v in self.to_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return {
            "adv_global": self.w_adv_global,
            "adv_local": self.w_adv_local,
            "sfp": self.w_sfp,
            "identity": self.w_identity,
            "luminance": self.w_luminance,
        }


class FeatureExtractor:
    """Three frozen conv layers (3->8->16->32, 3x3, stride 2, relu).

    Weights are drawn once from FEATURE_EXTRACTOR_SEED and never trained;
    calling the extractor returns the three post-relu feature maps.
    """

    CHANNELS = (8, 16, 32)

    def __init__(self, seed: int = FEATURE_EXTRACTOR_SEED):
        rng = np.random.default_rng(seed)
        self.convs = []
        cin = 3
        for cout in self.CHANNELS:
            bound = 1.0 / np.sqrt(9 * cin)
            w = Tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
            b = Tensor(np.zeros(cout))
            self.convs.append((w, b))
            cin = cout

    @property
    def num_layers(self) -> int:
        return len(self.convs)

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        feat = x
        for w, b in self.convs:
            feat = T.relu(T.conv2d(feat, w, b, stride=2, pad=1))
            feats.append(feat)
        return feats


def luminance_consistency_loss(
    i: Tensor,
    k: Tensor,
    region: tuple[int, int, int, int],
    alpha: float | None = None,
    alpha_weighted: bool = False,
) -> Tensor:
    """Mean squared difference between the two enhancements over one region.

    i is the second-pass (re-enhanced) image, k the first-pass enhanced
    image; region is (top, left, height, width).  The default normalizer
    is the region's element count.  alpha_weighted additionally divides
    by the mixing coefficient (the literal printed form), which blows up
    as alpha -> 0 and is kept only for comparison runs.
    """
    if i.shape != k.shape:
        raise ContractError(f"luminance loss operands differ in shape: {i.shape} vs {k.shape}")
    top, left, h, w = region
    if h <= 0 or w <= 0:
        raise ContractError(f"luminance loss region {region} is empty")
    diff = T.sub(T.crop(i, top, left, h, w), T.crop(k, top, left, h, w))
    loss = T.mean(T.square(diff))
    if alpha_weighted:
        if alpha is None or alpha <= 0:
            raise ContractError("alpha_weighted luminance loss needs alpha > 0")
        loss = T.scale(loss, 1.0 / alpha)
    return loss


def stack_scalars(logits: list[Tensor]) -> Tensor:
    """Concatenate scalar tensors into one [n] tensor (gradients preserved)."""
    if not logits:
        raise ContractError("empty logit list")
    return T.concat([T.reshape(t, (1,)) for t in logits], axis=0)


def adversarial_losses(
    logits_real: Tensor, logits_fake: Tensor, saturating: bool = False
) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from raw logits of any shape.

    d_loss = mean -[log s(real) + log(1 - s(fake))]
    g_loss = mean -log s(fake)          (default, non-saturating)
           = mean -log(1 - s(fake))     (saturating=True, printed form)
    """
    d_loss = T.add(T.mean(T.softplus(T.scale(logits_real, -1.0))), T.mean(T.softplus(logits_fake)))
    if saturating:
        g_loss = T.mean(T.softplus(logits_fake))
    else:
        g_loss = T.mean(T.softplus(T.scale(logits_fake, -1.0)))
    return d_loss, g_loss


def self_feature_preserving_loss(x_low: Tensor, x_enh: Tensor, fe: FeatureExtractor) -> Tensor:
    """Mean over extractor layers of the RMS distance between feature maps.

    Symmetric in its image arguments; zero iff the features coincide.
    Not differentiable exactly at zero feature distance (the norm's kink),
    which training never hits for distinct images.
    """
    if x_low.shape != x_enh.shape:
        raise ContractError(f"sfp operands differ in shape: {x_low.shape} vs {x_enh.shape}")
    feats_low = fe(x_low)
    feats_enh = fe(x_enh)
    total = None
    for fl, fen in zip(feats_low, feats_enh):
        term = T.sqrt(T.mean(T.square(T.sub(fen, fl))))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / fe.num_layers)


def identity_invariant_loss(x_r: Tensor, g_out: Tensor, squared: bool = True) -> Tensor:
    """Penalty for changing an already-normal image: count-normalized MSE.

    squared=False switches to the RMS reading of the norm notation.
    """
    if x_r.shape != g_out.shape:
        raise ContractError(f"identity loss operands differ in shape: {x_r.shape} vs {g_out.shape}")
    mse = T.mean(T.square(T.sub(g_out, x_r)))
    return mse if squared else T.sqrt(mse)


def total_generator_loss(parts: dict[str, Tensor], w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the supplied loss terms plus a per-term breakdown.

    parts maps term names (subset of LOSS_TERMS) to scalar tensors; the
    breakdown holds each weighted contribution and sums to the total.
    A non-finite part raises DivergenceError naming the term.
    """
    weights = w.to_dict()
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown:
        raise ContractError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    breakdown: dict[str, float] = {}
    for name in LOSS_TERMS:
        if name not in parts:
            continue
        part = parts[name]
        value = float(part.data)
        if not np.isfinite(value):
            raise DivergenceError(f"loss term {name!r} is non-finite ({value})")
        weighted = T.scale(part, weights[name])
        breakdown[name] = float(weighted.data)
        total = weighted if total is None else T.add(total, weighted)
    if total is None:
        total = Tensor(np.zeros(()))
    breakdown["total"] = float(total.data)
    return total, breakdown
