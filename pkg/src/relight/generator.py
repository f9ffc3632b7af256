"""The complete enhancement network: both branches, fusion, reconstruction.

The forward pass stacks the local multi-scale window features with the
recovered global features along channels, fuses them with two 3x3 convs
(leaky_relu 0.2), projects to RGB with a 1x1 conv and applies a sigmoid,
so outputs always lie strictly inside (0,1).

Ablation variants route a single branch into the same fusion head.
Channel/head/dim hyperparameters are declared configuration, not claims;
the defaults are sized so CPU tests stay fast while all three window
scales remain meaningful.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import attention as A
from . import tensor as T
from . import windows as W
from .errors import ConfigError, ContractError
from .tensor import Tensor

VARIANTS = ("full", "local-only", "global-only")


@dataclass(frozen=True)
class GeneratorConfig:
    local_dim: int = 16
    global_embed_dim: int = 16
    global_out_dim: int = 16
    local_heads: int = 2
    global_heads: int = 4
    num_local_layers: int = 3
    height: int = 64
    width: int = 64
    fusion_channels: int = 32
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown generator variant {self.variant!r}; expected one of {VARIANTS}")
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"train resolution {self.height}x{self.width} must be divisible by 8")
        if not 1 <= self.num_local_layers <= len(A.LOCAL_WINDOW_SIZES):
            raise ConfigError(f"num_local_layers must be in 1..{len(A.LOCAL_WINDOW_SIZES)}")
        if self.local_dim % self.local_heads:
            raise ConfigError(f"local_heads {self.local_heads} does not divide local_dim {self.local_dim}")
        if self.global_embed_dim % self.global_heads:
            raise ConfigError(
                f"global_heads {self.global_heads} does not divide global_embed_dim {self.global_embed_dim}"
            )
        largest = A.LOCAL_WINDOW_SIZES[self.num_local_layers - 1]
        if self.height % largest or self.width % largest:
            raise ConfigError(f"resolution {self.height}x{self.width} not divisible by window {largest}")

    @property
    def num_tokens(self) -> int:
        return (self.height // W.PATCH) * (self.width // W.PATCH)

    @property
    def fused_channels_in(self) -> int:
        if self.variant == "local-only":
            return self.local_dim
        if self.variant == "global-only":
            return self.global_out_dim
        return self.local_dim + self.global_out_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GeneratorWeights:
    cfg: GeneratorConfig
    local: A.LocalBranchWeights | None
    global_: A.GlobalBranchWeights | None
    fuse1_w: Tensor = None
    fuse1_b: Tensor = None
    fuse2_w: Tensor = None
    fuse2_b: Tensor = None
    out_w: Tensor = None
    out_b: Tensor = None


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _init_mhsa(rng, d, heads):
    return A.MhsaWeights(
        w_q=_uniform(rng, (d, d), d),
        w_k=_uniform(rng, (d, d), d),
        w_v=_uniform(rng, (d, d), d),
        w_o=_uniform(rng, (d, d), d),
        num_heads=heads,
    )


def _init_block(rng, d, heads):
    return A.WindowBlockWeights(
        norm1_g=Tensor(np.ones(d), requires_grad=True),
        norm1_b=_zeros(d),
        mhsa=_init_mhsa(rng, d, heads),
        norm2_g=Tensor(np.ones(d), requires_grad=True),
        norm2_b=_zeros(d),
        mlp_w1=_uniform(rng, (d, 4 * d), d),
        mlp_b1=_zeros(4 * d),
        mlp_w2=_uniform(rng, (4 * d, d), 4 * d),
        mlp_b2=_zeros(d),
    )


def init_weights(cfg: GeneratorConfig, seed: int) -> GeneratorWeights:
    """Deterministic weight construction: scaled-uniform (fan-in) linears and
    convs, zero biases, small-normal (sigma 0.02) positional encoding."""
    rng = np.random.default_rng(seed)

    local = None
    if cfg.variant != "global-only":
        local = A.LocalBranchWeights(
            embed_w=_uniform(rng, (cfg.local_dim, 3, 1, 1), 3),
            embed_b=_zeros(cfg.local_dim),
            blocks=[_init_block(rng, cfg.local_dim, cfg.local_heads) for _ in range(cfg.num_local_layers)],
        )

    global_ = None
    if cfg.variant != "local-only":
        d = cfg.global_embed_dim
        chans = [d, cfg.global_out_dim, cfg.global_out_dim, cfg.global_out_dim]
        recover = W.PatchRecoverWeights(
            convs=[
                (_uniform(rng, (chans[i + 1], chans[i], 3, 3), 9 * chans[i]), _zeros(chans[i + 1]))
                for i in range(3)
            ]
        )
        global_ = A.GlobalBranchWeights(
            patch_w=_uniform(rng, (d, 3, W.PATCH, W.PATCH), 3 * W.PATCH * W.PATCH),
            patch_b=_zeros(d),
            pos=Tensor(rng.normal(0.0, 0.02, size=(cfg.num_tokens, d)), requires_grad=True),
            blocks=[_init_block(rng, d, cfg.global_heads) for _ in range(2)],
            recover=recover,
        )

    cin, fc = cfg.fused_channels_in, cfg.fusion_channels
    return GeneratorWeights(
        cfg=cfg,
        local=local,
        global_=global_,
        fuse1_w=_uniform(rng, (fc, cin, 3, 3), 9 * cin),
        fuse1_b=_zeros(fc),
        fuse2_w=_uniform(rng, (fc, fc, 3, 3), 9 * fc),
        fuse2_b=_zeros(fc),
        out_w=_uniform(rng, (3, fc, 1, 1), fc),
        out_b=_zeros(3),
    )


def ablation_variant(kind: str, cfg: GeneratorConfig, seed: int) -> GeneratorWeights:
    """Build a generator for one of the ablation axes: full, local-only, global-only."""
    if kind not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {kind!r}; expected one of {VARIANTS}")
    return init_weights(dataclasses.replace(cfg, variant=kind), seed)


def forward(x: Tensor, w: GeneratorWeights) -> Tensor:
    """Enhance a [3,H,W] image in [0,1]; output has the same shape, values in (0,1)."""
    cfg = w.cfg
    if x.shape != (3, cfg.height, cfg.width):
        raise ConfigError(f"input shape {x.shape} does not match configured resolution (3, {cfg.height}, {cfg.width})")
    if not np.isfinite(x.data).all():
        raise ContractError("generator input contains non-finite values")

    if cfg.variant == "local-only":
        feat = A.local_branch(x, w.local)
    elif cfg.variant == "global-only":
        feat = A.global_branch(x, w.global_)
    else:
        feat = T.concat([A.local_branch(x, w.local), A.global_branch(x, w.global_)], axis=0)

    feat = T.leaky_relu(T.conv2d(feat, w.fuse1_w, w.fuse1_b, pad=1), 0.2)
    feat = T.leaky_relu(T.conv2d(feat, w.fuse2_w, w.fuse2_b, pad=1), 0.2)
    return T.sigmoid(T.conv2d(feat, w.out_w, w.out_b))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk any weights structure, yielding (dotted_name, tensor) pairs in
    deterministic field order.  Configs and scalars are skipped."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, GeneratorConfig):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(child, name)


def parameters(w) -> dict[str, Tensor]:
    """Named trainable parameters of a weights structure."""
    return {name: t for name, t in named_parameters(w) if t.requires_grad}


def parameter_count(w) -> int:
    return sum(t.size for t in parameters(w).values())
