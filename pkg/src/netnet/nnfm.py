"""Nearest-neighbor fusion of pyramid levels, plus a top-down pyramid arm for ablation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnops import (ConfigError, ConvParams, adaptive_max_pool, bilinear_upsample, conv, identity_conv,
                    init_conv, zero_conv)
from .tensor import Parameter, ShapeError, Tensor, add


@dataclass
class NnfmLevel:
    level: int
    prev: ConvParams | None  # pool + 1×1 from level-1
    same: ConvParams
    next: ConvParams | None  # upsample + 1×1 from level+1

    def parameters(self) -> list[Parameter]:
        return [p for c in (self.prev, self.same, self.next) if c is not None for p in c.parameters()]


def fused_levels(levels: int) -> list[int]:
    return list(range(min(4, levels)))


def init_nnfm(rng: np.random.Generator, channels: list[int], identity: bool = False,
              std: float = 0.01) -> list[NnfmLevel]:
    """Branch convs per fused level.

    The same-level branch starts as the identity and the neighbor branches
    start small, so a fresh module barely perturbs the pyramid.
    ``identity=True`` zeroes the neighbor branches exactly.
    """
    out = []
    n = len(channels)
    for s in fused_levels(n):
        c = channels[s]
        name = f"nnfm{s}"
        prev = nxt = None
        if s > 0:
            prev = zero_conv(channels[s - 1], c, 1, f"{name}.prev") if identity else \
                init_conv(rng, channels[s - 1], c, 1, f"{name}.prev", std=std)
        if s + 1 < n:
            nxt = zero_conv(channels[s + 1], c, 1, f"{name}.next") if identity else \
                init_conv(rng, channels[s + 1], c, 1, f"{name}.next", std=std)
        out.append(NnfmLevel(s, prev, identity_conv(c, f"{name}.same"), nxt))
    return out


def nnfm_fuse(p_prev: Tensor | None, p_s: Tensor, p_next: Tensor | None, params: NnfmLevel) -> Tensor:
    h, w = p_s.shape[-2:]
    out = conv(p_s, params.same)
    if p_prev is not None and params.prev is not None:
        if p_prev.shape[-2] <= h or p_prev.shape[-1] <= w:
            raise ShapeError(f"previous level {p_prev.shape[-2:]} must be finer than {h}×{w}")
        out = add(out, conv(adaptive_max_pool(p_prev, h, w), params.prev))
    if p_next is not None and params.next is not None:
        if p_next.shape[-2] >= h or p_next.shape[-1] >= w:
            raise ShapeError(f"next level {p_next.shape[-2:]} must be coarser than {h}×{w}")
        out = add(out, conv(bilinear_upsample(p_next, h, w), params.next))
    return out


def nnfm_apply(pyramid: list[Tensor], params: list[NnfmLevel]) -> list[Tensor]:
    out = list(pyramid)
    n = len(pyramid)
    for lp in params:
        s = lp.level
        if s >= n:
            raise ConfigError(f"fusion configured for level {s} of a {n}-level pyramid")
        prev = pyramid[s - 1] if s > 0 else None
        nxt = pyramid[s + 1] if s + 1 < n else None
        out[s] = nnfm_fuse(prev, pyramid[s], nxt, lp)
    return out


# top-down pyramid ablation arm


@dataclass
class TdpLevel:
    level: int
    lateral: ConvParams  # applied to the upsampled coarser result, c_{s+1} -> c_s

    def parameters(self) -> list[Parameter]:
        return self.lateral.parameters()


def init_tdp(rng: np.random.Generator, channels: list[int], std: float = 0.01) -> list[TdpLevel]:
    return [TdpLevel(s, init_conv(rng, channels[s + 1], channels[s], 1, f"tdp{s}.lateral", std=std))
            for s in range(len(channels) - 1)]


def tdp_apply(pyramid: list[Tensor], params: list[TdpLevel]) -> list[Tensor]:
    """t_S = p_S; t_s = p_s + C1×1(U(t_{s+1})) from the deepest level upward."""
    out = list(pyramid)
    for lp in sorted(params, key=lambda q: -q.level):
        s = lp.level
        h, w = pyramid[s].shape[-2:]
        out[s] = add(pyramid[s], conv(bilinear_upsample(out[s + 1], h, w), lp.lateral))
    return out
