"""Finite-difference verification of every differentiable operation.

Each registered check builds small random inputs from a seed, reduces the
op's output to a scalar with a fixed random projection, and compares the
tape gradient of every input against central differences.

A failing coordinate whose central difference shifts, when h shrinks a
hundredfold, by a tenth or more of its disagreement sits within a step of a kink (relu crossing,
max-pool tie); differences there are no oracle, so it is set aside and
counted.  A check fails outright if more than 1% of its coordinates need
this.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import netm, nnfm, nnops
from .boxes import GroundTruthBox
from .detector import Detector, ModelConfig, match_anchors, multibox_loss
from .netm import GateMode, Topology
from .pyramid import PyramidConfig, build_backbone, forward_pyramid
from .tensor import (Parameter, Tape, Tensor, add, backward, concat, expand_channels, finite_difference,
                     log_softmax, matmul, max_relative_error, mean, mul, relu, reshape, sigmoid, smooth_l1,
                     softmax, sub, take_along, tensor_sum, transpose)

REL_TOL = 1e-4
ABS_TOL = 1e-7
ZERO_TOL = 1e-8
MAX_SKIPPED_FRACTION = 0.01


@dataclass
class CheckResult:
    name: str
    max_rel: float
    max_abs_near_zero: float
    seeds: int
    n_inputs: int
    n_coords: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return (self.max_rel <= REL_TOL and self.max_abs_near_zero <= ABS_TOL
                and self.n_skipped <= MAX_SKIPPED_FRACTION * max(self.n_coords, 1))


def _leaf(rng, shape, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale)


def _conv(rng, cin, cout, k, stride=1):
    p = nnops.init_conv(rng, cin, cout, k, stride=stride)
    p.bias.data[:] = rng.standard_normal(cout) * 0.1
    return p


def gradient_errors(fn: Callable[[], Tensor], inputs: list[Parameter], rng: np.random.Generator,
                    h: float = 1e-5, corrupt: bool = False) -> tuple[float, float, int, int]:
    """Worst (relative, near-zero absolute) disagreement over all inputs,
    plus the number of coordinates checked and set aside as non-smooth."""
    with Tape():
        probe = fn()
    weights = Tensor(rng.standard_normal(probe.shape))

    def scalar():
        return tensor_sum(mul(fn(), weights))

    for p in inputs:
        p.zero_grad()
    with Tape() as tape:
        loss = scalar()
    backward(tape, loss)
    worst_rel = worst_abs = 0.0
    coords = skipped = 0
    for p in inputs:
        analytic = p.grad.copy()
        if corrupt:
            analytic.reshape(-1)[0] += 1.0
        saved = p.data

        def f(t):
            p.data = t.data
            try:
                return scalar()
            finally:
                p.data = saved

        numeric = finite_difference(f, Tensor(saved), h).data
        keep = np.ones(numeric.shape, dtype=bool)
        for i in np.flatnonzero(~_agrees(analytic, numeric)):
            if not _converged(f, saved, i, h, numeric.reshape(-1)[i], analytic.reshape(-1)[i]):
                keep.reshape(-1)[i] = False
        coords += keep.size
        skipped += int((~keep).sum())
        rel, ab = max_relative_error(analytic[keep], numeric[keep], ZERO_TOL)
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
    return worst_rel, worst_abs, coords, skipped


def _agrees(analytic, numeric):
    near = np.abs(analytic) < ZERO_TOL
    diff = np.abs(analytic - numeric)
    return np.where(near, diff <= ABS_TOL, diff <= REL_TOL * np.abs(analytic))


def _converged(f, base, i, h, at_h, analytic) -> bool:
    """Whether the disagreement along coordinate i survives a much smaller step.

    On a smooth function the central difference barely moves when h shrinks,
    far less than any real gradient error; a shift comparable to the
    disagreement means a kink lies within the step.
    """
    small = h / 100
    x = base.copy()
    x.reshape(-1)[i] += small
    fp = f(Tensor(x)).item()
    x.reshape(-1)[i] -= 2 * small
    fm = f(Tensor(x)).item()
    at_small = (fp - fm) / (2 * small)
    return abs(at_small - at_h) <= 0.1 * abs(at_h - analytic)


# --------------------------------------------------------------------------
# registry: name -> builder(rng) -> (fn, inputs)


def _jitter_biases(params, rng):
    # zero-init biases put units fed only by dead relus exactly on a relu kink,
    # where central differences are one-sided; move them off it
    for p in params:
        if p.name.endswith(".bias") or p.data.ndim == 1:
            p.data = rng.uniform(0.05, 0.3, p.data.shape) * rng.choice([-1.0, 1.0], p.data.shape)


def _binary(op):
    def build(rng):
        a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 3, 4))
        return (lambda: op(a, b)), [a, b]
    return build


def _unary(op, shape=(2, 3, 4), scale=1.0):
    def build(rng):
        a = _leaf(rng, shape, scale)
        return (lambda: op(a)), [a]
    return build


def _conv_check(cin, cout, k, stride=1, size=6):
    def build(rng):
        x = _leaf(rng, (2, cin, size, size))
        p = _conv(rng, cin, cout, k, stride)
        return (lambda: nnops.conv(x, p)), [x, p.kernel, p.bias]
    return build


def _gate_check(mode):
    def build(rng):
        deep = _leaf(rng, (3, 3, 3))
        gp = netm.init_gate(rng, mode, 3, 4)
        for q in gp.parameters():
            q.data = rng.standard_normal(q.shape) * 0.5
        return (lambda: netm.compute_gate(deep, (4, 6, 6), mode, gp)), [deep] + gp.parameters()
    return build


def _netm_params(rng, c_s=3, c_d=4, mode=GateMode.CHANNELWISE_CONV):
    gate = netm.init_gate(rng, mode, c_d, c_s)
    fusion = nnops.init_fusion(rng, c_s, 2)
    _jitter_biases(fusion.parameters(), rng)
    p = netm.NETMParams(0, 2, netm.NEMParams(gate, fusion), netm.NTMParams(_conv(rng, c_s, c_d, 1)))
    for q in p.parameters():
        q.data = rng.standard_normal(q.shape) * 0.5
    return p


def _build_extract(rng):
    p, g = _leaf(rng, (3, 5, 5)), Parameter(rng.uniform(0.05, 0.95, (1, 5, 5)))
    return (lambda: netm.extract_salient(p, g)), [p, g]


def _build_erase(rng):
    p, g = _leaf(rng, (3, 5, 5)), Parameter(rng.uniform(0.05, 0.95, (3, 5, 5)))
    return (lambda: netm.erase(p, netm.extract_salient(p, g))), [p, g]


def _build_transfer(rng):
    es, deep = _leaf(rng, (3, 7, 7)), _leaf(rng, (4, 3, 3))
    ntm = netm.NTMParams(_conv(rng, 3, 4, 1))
    return (lambda: netm.transfer(es, deep, ntm)), [es, deep] + ntm.parameters()


def _build_netm(rng):
    shallow, deep = _leaf(rng, (3, 6, 6)), _leaf(rng, (4, 3, 3))
    p = _netm_params(rng)

    def fn():
        a, b = netm.netm_apply(shallow, deep, p)
        return concat([reshape(a, (-1,)), reshape(b, (-1,))], axis=0)
    return fn, [shallow, deep] + p.parameters()


def _pyramid_leaves(rng, sizes=(8, 4, 2, 1), chans=(2, 3, 2, 2)):
    return [_leaf(rng, (c, s, s)) for c, s in zip(chans, sizes)]


def _flat(feats):
    return concat([reshape(f, (-1,)) for f in feats], axis=0)


def _build_wire(topology):
    def build(rng):
        feats = _pyramid_leaves(rng)
        chans = [f.shape[0] for f in feats]
        params = netm.init_wiring(rng, chans, topology, transfer=topology is Topology.SKIPPED)
        for q in (q for p in params for q in p.parameters()):
            q.data = rng.standard_normal(q.shape) * 0.5
        return (lambda: _flat(netm.wire(feats, topology, params))), feats + [q for p in params for q in p.parameters()]
    return build


def _build_nnfm(rng):
    feats = _pyramid_leaves(rng)
    params = nnfm.init_nnfm(rng, [f.shape[0] for f in feats], std=0.5)
    return (lambda: _flat(nnfm.nnfm_apply(feats, params))), feats + [q for p in params for q in p.parameters()]


def _build_tdp(rng):
    feats = _pyramid_leaves(rng)
    params = nnfm.init_tdp(rng, [f.shape[0] for f in feats], std=0.5)
    return (lambda: _flat(nnfm.tdp_apply(feats, params))), feats + [q for p in params for q in p.parameters()]


def _build_fusion(rng):
    x = _leaf(rng, (2, 3, 5, 5))
    fp = nnops.init_fusion(rng, 3, 2)
    fp.expand.kernel.data = rng.standard_normal(fp.expand.kernel.shape) * 0.5
    _jitter_biases(fp.parameters(), rng)
    return (lambda: nnops.fusion_block(x, fp)), [x] + fp.parameters()


def _build_pyramid(rng):
    cfg = PyramidConfig(input_size=16, sizes=[8, 4, 2], channels=[2, 2, 2], stem_channels=2)
    bb = build_backbone(cfg, int(rng.integers(1 << 31)))
    _jitter_biases(bb.parameters(), rng)
    img = Tensor(rng.standard_normal((1, 16, 16)))
    return (lambda: _flat(forward_pyramid(img, bb))), bb.parameters()


def _build_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 5))
    return (lambda: matmul(a, b)), [a, b]


def _build_take(rng):
    a = _leaf(rng, (3, 5, 4))
    idx = rng.integers(0, 4, (3, 5))
    return (lambda: take_along(a, idx, axis=-1)), [a]


def _build_loss(rng):
    n, k = 6, 3
    logits, boxes = _leaf(rng, (1, n, k)), _leaf(rng, (1, n, 4), 0.5)
    labels = np.array([[1, 0, 2, 0, 0, 0]])
    targets = rng.standard_normal((1, n, 4)) * 0.5
    return (lambda: multibox_loss(logits, boxes, labels, targets)), [logits, boxes]


def mini_detector(seed: int) -> Detector:
    """NETM detector with under 500 parameters on a 16×16 input."""
    cfg = ModelConfig(pyramid=PyramidConfig(input_size=16, sizes=[8, 4, 2, 1], channels=[2, 2, 2, 2],
                                            stem_channels=2),
                      num_classes=2, variant="netm", head_kernel=1, anchor_ratios=(1.0,),
                      anchor_extra_scale=False)
    model = Detector(cfg, seed)
    rng = np.random.default_rng([seed, 9])
    for q in model.parameters():
        if q.name.startswith(("head", "netm")):
            q.data = rng.standard_normal(q.shape) * 0.5
    _jitter_biases(model.parameters(), rng)
    return model


def _build_end_to_end(rng):
    model = mini_detector(int(rng.integers(1 << 31)))
    img = Tensor(rng.uniform(0, 1, (1, 16, 16)))
    gts = [GroundTruthBox(0.1, 0.1, 0.6, 0.55, 1, "large"), GroundTruthBox(0.7, 0.7, 0.85, 0.9, 1, "small")]
    a = match_anchors(model.anchors, gts)

    def fn():
        c, b = model.forward(img)
        return multibox_loss(c, b, a.labels[None], a.targets[None])
    return fn, model.parameters()


REGISTRY: dict[str, Callable] = {
    "add": _binary(add),
    "sub": _binary(sub),
    "mul": _binary(mul),
    "sigmoid": _unary(sigmoid, scale=2.0),
    "relu": _unary(relu),
    "reshape": _unary(lambda a: reshape(a, (4, 6))),
    "transpose": _unary(lambda a: transpose(a, (2, 0, 1))),
    "concat": _binary(lambda a, b: concat([a, b], axis=1)),
    "sum": _unary(lambda a: tensor_sum(a, axis=1)),
    "mean": _unary(mean),
    "matmul": _build_matmul,
    "softmax": _unary(lambda a: softmax(a, axis=-1)),
    "log_softmax": _unary(lambda a: log_softmax(a, axis=-1)),
    "take_along": _build_take,
    "smooth_l1": _unary(smooth_l1, scale=1.5),
    "expand_channels": _unary(lambda a: expand_channels(a, 3), shape=(1, 3, 4)),
    "conv1x1": _conv_check(3, 4, 1),
    "conv3x3": _conv_check(3, 4, 3),
    "conv3x3_stride2": _conv_check(2, 3, 3, stride=2, size=7),
    "max_pool": _unary(lambda a: nnops.pool(a, "max", 2, 2), shape=(2, 3, 6, 6)),
    "max_pool_padded": _unary(lambda a: nnops.pool(a, "max", 3, 2, 1), shape=(2, 3, 7, 7)),
    "avg_pool": _unary(lambda a: nnops.pool(a, "avg", 2, 2), shape=(2, 3, 6, 6)),
    "adaptive_max_pool": _unary(lambda a: nnops.adaptive_max_pool(a, 3, 3), shape=(2, 7, 7)),
    "channel_max": _unary(lambda a: nnops.channel_reduce(a, "max"), shape=(4, 3, 3)),
    "channel_avg": _unary(lambda a: nnops.channel_reduce(a, "avg"), shape=(4, 3, 3)),
    "bilinear_upsample": _unary(lambda a: nnops.bilinear_upsample(a, 7, 6), shape=(2, 3, 4)),
    "fusion_block": _build_fusion,
    "gate_channelwise_conv": _gate_check(GateMode.CHANNELWISE_CONV),
    "gate_max": _gate_check(GateMode.MAX_ATTENTION),
    "gate_avg": _gate_check(GateMode.AVG_ATTENTION),
    "gate_mix": _gate_check(GateMode.MIX_ATTENTION),
    "gate_global": _gate_check(GateMode.GLOBAL_SIMPLIFIED),
    "extract_salient": _build_extract,
    "erase": _build_erase,
    "transfer": _build_transfer,
    "netm_apply": _build_netm,
    "wire_skipped": _build_wire(Topology.SKIPPED),
    "wire_adjacent": _build_wire(Topology.ADJACENT),
    "nnfm_apply": _build_nnfm,
    "tdp_apply": _build_tdp,
    "forward_pyramid": _build_pyramid,
    "multibox_loss": _build_loss,
    "end_to_end_detector": _build_end_to_end,
}


def run_check(name: str, seeds: int = 20, base_seed: int = 0, corrupt: bool = False) -> CheckResult:
    build = REGISTRY[name]
    worst_rel = worst_abs = 0.0
    n_inputs = coords = skipped = 0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s, sum(map(ord, name))])
        fn, inputs = build(rng)
        n_inputs = len(inputs)
        rel, ab, c, k = gradient_errors(fn, inputs, rng, corrupt=corrupt)
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
        coords += c
        skipped += k
    return CheckResult(name, worst_rel, worst_abs, seeds, n_inputs, coords, skipped)


def run_all(seeds: int = 20, base_seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    return [run_check(name, seeds, base_seed, corrupt=(name == corrupt)) for name in REGISTRY]
