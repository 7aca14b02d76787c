"""Neighbor erasing and transferring between pyramid levels.

A gate computed from the deeper level marks regions of larger objects at the
shallow resolution.  The gated shallow feature is removed from the shallow
level (erasing) and pushed, downsampled, into the deep level (transferring).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .nnops import (ConfigError, ConvParams, FusionParams, adaptive_max_pool, bilinear_upsample,
                    channel_reduce, conv, fusion_block, init_conv, init_fusion)
from .tensor import (Parameter, ShapeError, Tensor, concat, expand_channels, matmul, mul, reshape,
                     sigmoid, softmax, sub, add, transpose)


class GateMode(str, enum.Enum):
    CHANNELWISE_CONV = "channelwise_conv"
    MAX_ATTENTION = "max"
    AVG_ATTENTION = "avg"
    MIX_ATTENTION = "mix"
    GLOBAL_SIMPLIFIED = "global"


class Topology(str, enum.Enum):
    SKIPPED = "skipped"
    ADJACENT = "adjacent"


@dataclass
class GateParams:
    mode: GateMode
    conv: ConvParams | None = None
    # GlobalSimplified only: query/key bottlenecks and scalar value projection
    query: ConvParams | None = None
    key: ConvParams | None = None
    value: ConvParams | None = None

    def parameters(self) -> list[Parameter]:
        return [p for c in (self.conv, self.query, self.key, self.value) if c is not None
                for p in c.parameters()]


@dataclass
class NEMParams:
    gate: GateParams
    fusion: FusionParams | None = None

    def parameters(self) -> list[Parameter]:
        out = self.gate.parameters()
        if self.fusion is not None:
            out += self.fusion.parameters()
        return out


@dataclass
class NTMParams:
    conv: ConvParams

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters()


@dataclass
class NETMParams:
    """One shallow/deep pair. ``ntm`` is None for erase-only, and
    ``erase`` False for transfer-only wiring."""

    shallow: int
    deep: int
    nem: NEMParams
    ntm: NTMParams | None = None
    erase: bool = True

    def parameters(self) -> list[Parameter]:
        out = self.nem.parameters()
        if self.ntm is not None:
            out += self.ntm.parameters()
        return out


GATE_BIAS_INIT = -4.0


def init_gate(rng: np.random.Generator, mode: GateMode, deep_ch: int, shallow_ch: int,
              name: str = "gate") -> GateParams:
    mode = GateMode(mode)
    if mode is GateMode.CHANNELWISE_CONV:
        return GateParams(mode, conv=init_conv(rng, deep_ch, shallow_ch, 1, f"{name}.conv", std=0.01))
    if mode is GateMode.MIX_ATTENTION:
        return GateParams(mode, conv=init_conv(rng, 2, 1, 1, f"{name}.conv"))
    if mode is GateMode.GLOBAL_SIMPLIFIED:
        inner = max(1, shallow_ch // 8)
        return GateParams(mode,
                          query=init_conv(rng, deep_ch, inner, 1, f"{name}.query"),
                          key=init_conv(rng, deep_ch, inner, 1, f"{name}.key"),
                          value=init_conv(rng, deep_ch, 1, 1, f"{name}.value"))
    return GateParams(mode)


def _global_logits(up: Tensor, gp: GateParams) -> Tensor:
    # channel-bottlenecked spatial self-attention, reduced to one scalar per position
    h, w = up.shape[-2:]
    lead = up.shape[:-3]
    q, k, v = conv(up, gp.query), conv(up, gp.key), conv(up, gp.value)
    inner = q.shape[-3]
    qf = transpose(reshape(q, lead + (inner, h * w)), tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    kf = reshape(k, lead + (inner, h * w))
    affinity = softmax(mul(matmul(qf, kf), Tensor(1.0 / np.sqrt(inner))), axis=-1)
    vf = reshape(v, lead + (h * w, 1))
    return reshape(matmul(affinity, vf), lead + (1, h, w))


def compute_gate(p_deep: Tensor, shallow_shape, mode: GateMode, params: GateParams) -> Tensor:
    """Gate in (0, 1) at the shallow resolution, with 1 or c_shallow channels."""
    mode = GateMode(mode)
    c_s, h_s, w_s = shallow_shape[-3:]
    h_d, w_d = p_deep.shape[-2:]
    if h_d > h_s or w_d > w_s:
        raise ShapeError(f"deep level {h_d}×{w_d} is larger than shallow {h_s}×{w_s}")
    up = bilinear_upsample(p_deep, h_s, w_s)
    if mode is GateMode.CHANNELWISE_CONV:
        if params.conv.in_ch != p_deep.shape[-3] or params.conv.out_ch != c_s:
            raise ConfigError(f"gate conv {params.conv.in_ch}->{params.conv.out_ch} does not map "
                              f"{p_deep.shape[-3]} deep channels to {c_s} shallow channels")
        logits = conv(up, params.conv)
    elif mode is GateMode.MAX_ATTENTION:
        logits = channel_reduce(up, "max")
    elif mode is GateMode.AVG_ATTENTION:
        logits = channel_reduce(up, "avg")
    elif mode is GateMode.MIX_ATTENTION:
        stacked = concat([channel_reduce(up, "max"), channel_reduce(up, "avg")], axis=-3)
        logits = conv(stacked, params.conv)
    else:
        logits = _global_logits(up, params)
    return sigmoid(logits)


def extract_salient(p_shallow: Tensor, g: Tensor) -> Tensor:
    if g.shape[-2:] != p_shallow.shape[-2:]:
        raise ShapeError(f"gate spatial {g.shape[-2:]} != feature spatial {p_shallow.shape[-2:]}")
    c = p_shallow.shape[-3]
    if g.shape[-3] == 1 and c != 1:
        g = expand_channels(g, c)
    elif g.shape != p_shallow.shape:
        raise ShapeError(f"gate shape {g.shape} incompatible with feature {p_shallow.shape}")
    return mul(p_shallow, g)


def erase(p_shallow: Tensor, p_es: Tensor) -> Tensor:
    if p_shallow.shape != p_es.shape:
        raise ShapeError(f"erase: shape mismatch {p_shallow.shape} vs {p_es.shape}")
    return sub(p_shallow, p_es)


def transfer(p_es: Tensor, p_deep: Tensor, params: NTMParams) -> Tensor:
    if params.conv.in_ch != p_es.shape[-3] or params.conv.out_ch != p_deep.shape[-3]:
        raise ConfigError(f"transfer conv {params.conv.in_ch}->{params.conv.out_ch} incompatible with "
                          f"{p_es.shape[-3]} -> {p_deep.shape[-3]} channels")
    down = adaptive_max_pool(p_es, *p_deep.shape[-2:])
    return add(conv(down, params.conv), p_deep)


def netm_apply(p_shallow: Tensor, p_deep: Tensor, params: NETMParams,
               mode: GateMode | None = None) -> tuple[Tensor, Tensor]:
    mode = params.nem.gate.mode if mode is None else GateMode(mode)
    g = compute_gate(p_deep, p_shallow.shape, mode, params.nem.gate)
    p_es = extract_salient(p_shallow, g)
    new_shallow = p_shallow
    if params.erase:
        new_shallow = erase(p_shallow, p_es)
        if params.nem.fusion is not None:
            new_shallow = fusion_block(new_shallow, params.nem.fusion)
    new_deep = p_deep if params.ntm is None else transfer(p_es, p_deep, params.ntm)
    return new_shallow, new_deep


def level_pairs(levels: int, topology: Topology) -> list[tuple[int, int]]:
    topology = Topology(topology)
    if levels < 4:
        raise ConfigError(f"wiring needs at least 4 pyramid levels, got {levels}")
    if topology is Topology.SKIPPED:
        return [(0, 2), (1, 3)]
    return [(0, 1), (1, 2), (2, 3)]


def init_wiring(rng: np.random.Generator, channels: list[int], topology: Topology,
                mode: GateMode = GateMode.CHANNELWISE_CONV, erase: bool = True, transfer: bool = True,
                fusion: bool = True, fusion_ratio: int = 2, gate_bias: float = GATE_BIAS_INIT) -> list[NETMParams]:
    """Parameters for every NETM instance of a topology.

    Adjacent wiring is the erase-only ablation, so ``transfer`` is ignored there.
    Learned gates start almost closed (sigmoid(gate_bias)), so a fresh module
    passes the shallow level through nearly untouched, like the fusion block.
    """
    topology = Topology(topology)
    out = []
    for i, (s, d) in enumerate(level_pairs(len(channels), topology)):
        c_s, c_d = channels[s], channels[d]
        name = f"netm{i}"
        fuse = init_fusion(rng, c_s, max(1, c_s // fusion_ratio), f"{name}.fusion") if (fusion and erase) else None
        gate = init_gate(rng, mode, c_d, c_s, f"{name}.gate")
        logit_conv = gate.conv if gate.conv is not None else gate.value
        if logit_conv is not None:
            logit_conv.bias.data = np.full(logit_conv.bias.shape, gate_bias)
        nem = NEMParams(gate, fuse)
        ntm = None
        if transfer and topology is Topology.SKIPPED:
            ntm = NTMParams(init_conv(rng, c_s, c_d, 1, f"{name}.transfer", std=0.01))
        out.append(NETMParams(s, d, nem, ntm, erase=erase))
    return out


def wire(pyramid: list[Tensor], topology: Topology, params: list[NETMParams]) -> list[Tensor]:
    topology = Topology(topology)
    pairs = level_pairs(len(pyramid), topology)
    if [(p.shallow, p.deep) for p in params] != pairs:
        raise ConfigError(f"parameters are wired for {[(p.shallow, p.deep) for p in params]}, "
                          f"topology {topology.value} needs {pairs}")
    out = list(pyramid)
    for p in params:
        # adjacent NEMs all gate from the original deep level
        deep_src = pyramid[p.deep] if topology is Topology.ADJACENT else out[p.deep]
        new_s, new_d = netm_apply(out[p.shallow], deep_src, p)
        out[p.shallow] = new_s
        if topology is Topology.SKIPPED:
            out[p.deep] = new_d
    return out
