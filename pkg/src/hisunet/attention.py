"""Channel/spatial attention and the weighting attention module (WAM).

A WAM blends the SIV and SIC feature maps of one U-net level with learnable
per-element weight grids, gates the blend and each branch input with
channel-then-spatial attention, and re-injects the gated blend into both
branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    activation,
    concat,
    conv2d,
    dense,
    ew,
    pool_channel,
    pool_spatial,
)

REDUCTION = 8
SPATIAL_KERNEL = 7
WAM_INIT = 0.5


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ChannelAttnParams:
    """Shared C -> C/r -> C MLP applied to both pooled descriptors."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, reduction: int = REDUCTION) -> "ChannelAttnParams":
        hidden = max(1, channels // reduction)
        return cls(
            w1=Tensor(_uniform(rng, (hidden, channels), channels), requires_grad=True),
            b1=Tensor(_uniform(rng, (hidden,), channels), requires_grad=True),
            w2=Tensor(_uniform(rng, (channels, hidden), hidden), requires_grad=True),
            b2=Tensor(_uniform(rng, (channels,), hidden), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class SpatialAttnParams:
    """One k x k kernel mapping the [avg; max] channel-pooled stack to one map."""

    kernel: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, k: int = SPATIAL_KERNEL) -> "SpatialAttnParams":
        return cls(kernel=Tensor(_uniform(rng, (1, 2, k, k), 2 * k * k), requires_grad=True))

    def tensors(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel}


@dataclass
class AttnPair:
    channel: ChannelAttnParams
    spatial: SpatialAttnParams

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "AttnPair":
        return cls(ChannelAttnParams.init(channels, rng), SpatialAttnParams.init(rng))

    def tensors(self) -> dict[str, Tensor]:
        out = {f"ca.{k}": v for k, v in self.channel.tensors().items()}
        out.update({f"sa.{k}": v for k, v in self.spatial.tensors().items()})
        return out


def _mlp(d: Tensor, p: ChannelAttnParams) -> Tensor:
    return dense(activation(dense(d, p.w1, p.b1), "relu"), p.w2, p.b2)


def channel_attention(x: Tensor, p: ChannelAttnParams, identity: bool = False) -> Tensor:
    """``sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))`` with shape ``(B, C, 1, 1)``."""
    if x.shape[1] != p.channels:
        raise ShapeError(f"channel_attention: input has {x.shape[1]} channels, params expect {p.channels}", dim="channels")
    if identity:
        return Tensor(np.ones((x.shape[0], x.shape[1], 1, 1), dtype=x.dtype))
    logits = ew(_mlp(pool_spatial(x, "avg"), p), _mlp(pool_spatial(x, "max"), p), "add")
    return activation(logits, "sigmoid")


def spatial_attention(x: Tensor, p: SpatialAttnParams, identity: bool = False) -> Tensor:
    """``sigmoid(conv([avgpool_c(x); maxpool_c(x)]))`` with shape ``(B, 1, H, W)``."""
    if identity:
        B, _, H, W = x.shape
        return Tensor(np.ones((B, 1, H, W), dtype=x.dtype))
    stacked = concat([pool_channel(x, "avg"), pool_channel(x, "max")], axis=1)
    return activation(conv2d(stacked, p.kernel), "sigmoid")


def cbam_apply(x: Tensor, pair: AttnPair, identity: bool = False) -> Tensor:
    """``Ms(x) * (Mc(x) * x)``; both maps are computed from the same ``x``."""
    mc = channel_attention(x, pair.channel, identity)
    ms = spatial_attention(x, pair.spatial, identity)
    return ew(ew(x, mc, "mul"), ms, "mul")


@dataclass
class WamParams:
    a_in_siv: Tensor
    a_in_sic: Tensor
    a_out_siv: Tensor
    a_out_sic: Tensor
    attn_shared: AttnPair
    attn_siv: AttnPair
    attn_sic: AttnPair
    identity: bool = field(default=False)

    @classmethod
    def init(cls, channels: int, height: int, width: int, rng: np.random.Generator) -> "WamParams":
        def grid() -> Tensor:
            return Tensor(np.full((1, channels, height, width), WAM_INIT), requires_grad=True)

        return cls(
            a_in_siv=grid(),
            a_in_sic=grid(),
            a_out_siv=grid(),
            a_out_sic=grid(),
            attn_shared=AttnPair.init(channels, rng),
            attn_siv=AttnPair.init(channels, rng),
            attn_sic=AttnPair.init(channels, rng),
        )

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.a_in_siv.shape

    def grids(self) -> dict[str, Tensor]:
        return {
            "a_in_siv": self.a_in_siv,
            "a_in_sic": self.a_in_sic,
            "a_out_siv": self.a_out_siv,
            "a_out_sic": self.a_out_sic,
        }

    def tensors(self) -> dict[str, Tensor]:
        out = dict(self.grids())
        for tag, pair in (("shared", self.attn_shared), ("siv", self.attn_siv), ("sic", self.attn_sic)):
            out.update({f"attn_{tag}.{k}": v for k, v in pair.tensors().items()})
        return out


def wam_forward(xi_siv: Tensor, xi_sic: Tensor, p: WamParams) -> tuple[Tensor, Tensor]:
    """Exchange information between the SIV and SIC branches at one level.

    Returns ``(out_siv, out_sic)``, each shaped like the inputs.
    """
    if xi_siv.shape != xi_sic.shape:
        raise ShapeError(f"wam_forward: branch shapes differ {xi_siv.shape} vs {xi_sic.shape}", dim="branch")
    if xi_siv.shape[1:] != p.grid_shape[1:]:
        raise ShapeError(
            f"wam_forward: features {xi_siv.shape[1:]} do not match weight grids {p.grid_shape[1:]}", dim="grid"
        )
    share = ew(ew(xi_siv, p.a_in_siv, "mul"), ew(xi_sic, p.a_in_sic, "mul"), "add")
    share = cbam_apply(share, p.attn_shared, p.identity)
    out_siv = ew(ew(share, p.a_out_siv, "mul"), cbam_apply(xi_siv, p.attn_siv, p.identity), "add")
    out_sic = ew(ew(share, p.a_out_sic, "mul"), cbam_apply(xi_sic, p.attn_sic, p.identity), "add")
    return out_siv, out_sic
