"""Single-shot multibox detector over a (possibly reconfigured) feature pyramid."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Detection, GroundTruthBox, iou, iou_matrix
from .netm import GateMode, NETMParams, Topology, init_wiring, wire
from .nnfm import NnfmLevel, TdpLevel, init_nnfm, init_tdp, nnfm_apply, tdp_apply
from .nnops import ConfigError, ConvParams, conv, init_conv
from .pyramid import Backbone, PyramidConfig, build_backbone, forward_pyramid
from .tensor import (Parameter, ShapeError, Tensor, Tape, add, backward, concat, log_softmax, mul,
                     reshape, smooth_l1, take_along, tensor_sum, transpose, zero_grad)

log = logging.getLogger(__name__)

VARIANCES = (0.1, 0.2)


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    NEM = "nem"
    NTM = "ntm"
    NETM = "netm"
    NETM_TDP = "netm+tdp"
    NETNET = "netnet"
    NNEM = "nnem"


# --------------------------------------------------------------------------
# anchors


@dataclass
class AnchorConfig:
    sizes: list[int]
    scales: list[list[float]]
    ratios: tuple[float, ...] = (1.0, 2.0, 0.5)

    def __post_init__(self):
        if len(self.scales) != len(self.sizes):
            raise ConfigError("one scale list per pyramid level is required")

    @property
    def per_cell(self) -> list[int]:
        return [len(s) * len(self.ratios) for s in self.scales]

    @classmethod
    def ramp(cls, sizes: list[int], smin: float = 0.1, smax: float = 0.9,
             ratios=(1.0, 2.0, 0.5), extra_scale: bool = True) -> "AnchorConfig":
        """Linear scale ramp, optionally with a geometric-mean scale added per level."""
        n = len(sizes)
        base = [smin + (smax - smin) * k / (n - 1) for k in range(n)] + [1.0]
        scales = [[base[k], math.sqrt(base[k] * base[k + 1])] if extra_scale else [base[k]]
                  for k in range(n)]
        return cls(list(sizes), scales, tuple(ratios))


def generate_anchors(config: AnchorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Anchors as (A, 4) [cx, cy, w, h] plus the pyramid level of each.

    Order: level, then cell row-major, then scale, then ratio.
    """
    boxes, levels = [], []
    for lvl, (size, scales) in enumerate(zip(config.sizes, config.scales)):
        shapes = [(s * math.sqrt(r), s / math.sqrt(r)) for s in scales for r in config.ratios]
        for i in range(size):
            for j in range(size):
                cx, cy = (j + 0.5) / size, (i + 0.5) / size
                for w, h in shapes:
                    boxes.append((cx, cy, w, h))
                    levels.append(lvl)
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(levels, dtype=np.int64)


def center_to_corner(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corner_to_center(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


# --------------------------------------------------------------------------
# matching and box coding


@dataclass
class Assignment:
    labels: np.ndarray   # (A,) int, 0 = background
    matched: np.ndarray  # (A,) int, matched GT index or -1
    targets: np.ndarray  # (A, 4) encoded offsets (zero for background)


def match_anchors(anchors: np.ndarray, gts: list[GroundTruthBox], pos_thresh: float = 0.5) -> Assignment:
    """Each GT claims its best anchor; other anchors are positive when IoU >= pos_thresh."""
    a = anchors.shape[0]
    labels = np.zeros(a, dtype=np.int64)
    matched = np.full(a, -1, dtype=np.int64)
    targets = np.zeros((a, 4))
    if not gts:
        return Assignment(labels, matched, targets)
    gt_boxes = np.array([g.coords for g in gts])
    overlaps = iou_matrix(gt_boxes, center_to_corner(anchors))  # (G, A)
    best_gt = overlaps.argmax(axis=0)
    best_gt_iou = overlaps.max(axis=0)
    best_anchor = overlaps.argmax(axis=1)
    for j, k in enumerate(best_anchor):
        best_gt[k] = j
        best_gt_iou[k] = 2.0
    pos = best_gt_iou >= pos_thresh
    matched[pos] = best_gt[pos]
    classes = np.array([g.class_id for g in gts])
    labels[pos] = classes[best_gt[pos]]
    targets[pos] = encode(gt_boxes[best_gt[pos]], anchors[pos])
    return Assignment(labels, matched, targets)


def encode(gt_corner: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Regression offsets of corner-format boxes w.r.t. center-format anchors."""
    g = corner_to_center(gt_corner)
    a = np.asarray(anchor, dtype=np.float64)
    v0, v1 = VARIANCES
    return np.concatenate([(g[..., :2] - a[..., :2]) / (a[..., 2:] * v0),
                           np.log(g[..., 2:] / a[..., 2:]) / v1], axis=-1)


def decode(pred: np.ndarray, anchor: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    v0, v1 = VARIANCES
    ctr = a[..., :2] + pred[..., :2] * v0 * a[..., 2:]
    wh = np.maximum(a[..., 2:] * np.exp(np.clip(pred[..., 2:] * v1, -30.0, 30.0)), eps)
    return center_to_corner(np.concatenate([ctr, wh], axis=-1))


# --------------------------------------------------------------------------
# loss


def mine_negatives(neg_ce: np.ndarray, labels: np.ndarray, neg_ratio: int = 3) -> np.ndarray:
    """Boolean mask of hard negatives per image: highest background CE first.

    An image without positives still mines ``neg_ratio`` negatives.
    """
    mask = np.zeros_like(labels, dtype=bool)
    for n in range(labels.shape[0]):
        neg = labels[n] == 0
        num_pos = int((~neg).sum())
        k = min(neg_ratio * max(num_pos, 1), int(neg.sum()))
        if k == 0:
            continue
        cand = np.where(neg)[0]
        # stable descending sort: ties resolved by anchor order
        order = np.argsort(-neg_ce[n, cand], kind="stable")[:k]
        mask[n, cand[order]] = True
    return mask


def multibox_loss(cls_logits: Tensor, box_preds: Tensor, labels: np.ndarray, targets: np.ndarray,
                  neg_ratio: int = 3) -> Tensor:
    """Smooth-L1 localization plus cross-entropy over positives and hard negatives.

    Inputs are batched: logits (N, A, K), boxes (N, A, 4), labels (N, A),
    targets (N, A, 4). The sum is divided by the number of positives (at least 1).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if cls_logits.ndim == 2:
        cls_logits = reshape(cls_logits, (1,) + cls_logits.shape)
        box_preds = reshape(box_preds, (1,) + box_preds.shape)
        labels = labels[None]
        targets = np.asarray(targets)[None]
    n, a, k = cls_logits.shape
    if box_preds.shape != (n, a, 4) or labels.shape != (n, a) or np.shape(targets) != (n, a, 4):
        raise ShapeError(f"multibox_loss: logits {cls_logits.shape}, boxes {box_preds.shape}, "
                         f"labels {labels.shape}, targets {np.shape(targets)} disagree")
    logp = log_softmax(cls_logits, axis=-1)
    neg_ce = -logp.data[..., 0]
    pos = labels > 0
    selected = pos | mine_negatives(neg_ce, labels, neg_ratio)
    norm = 1.0 / max(int(pos.sum()), 1)
    ce = take_along(logp, labels, axis=-1)
    cls_term = tensor_sum(mul(ce, Tensor(np.where(selected, -norm, 0.0))))
    diff = add(box_preds, Tensor(-np.asarray(targets, dtype=np.float64)))
    loc_term = tensor_sum(mul(smooth_l1(diff), Tensor(np.repeat(pos[..., None] * norm, 4, axis=-1))))
    return add(cls_term, loc_term)


# --------------------------------------------------------------------------
# model


@dataclass
class Head:
    cls: ConvParams
    loc: ConvParams

    def parameters(self) -> list[Parameter]:
        return self.cls.parameters() + self.loc.parameters()


@dataclass
class ModelConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    num_classes: int = 4
    variant: Variant = Variant.NETM
    gate_mode: GateMode = GateMode.CHANNELWISE_CONV
    topology: Topology | None = None  # None: implied by the variant
    fusion: bool = True
    head_kernel: int = 3
    anchor_min: float = 0.1
    anchor_max: float = 0.9
    anchor_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    anchor_extra_scale: bool = True

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.gate_mode = GateMode(self.gate_mode)
        implied = Topology.ADJACENT if self.variant is Variant.NNEM else Topology.SKIPPED
        if self.topology is None:
            self.topology = implied
        self.topology = Topology(self.topology)
        if self.variant is not Variant.BASELINE and self.topology is not implied:
            raise ConfigError(f"variant {self.variant.value} requires topology {implied.value}")
        if self.num_classes < 2:
            raise ConfigError("num_classes counts background and must be >= 2")
        if self.head_kernel not in (1, 3):
            raise ConfigError("head_kernel must be 1 or 3")

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig.ramp(self.pyramid.sizes, self.anchor_min, self.anchor_max,
                                 tuple(self.anchor_ratios), self.anchor_extra_scale)


class Detector:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        v = config.variant
        rng = np.random.default_rng([seed, 1])
        self.backbone: Backbone = build_backbone(config.pyramid, seed)
        chans = config.pyramid.channels
        self.wiring: list[NETMParams] = []
        if v is not Variant.BASELINE:
            erase = v is not Variant.NTM
            transfer = v not in (Variant.NEM, Variant.NNEM)
            self.wiring = init_wiring(rng, chans, config.topology, config.gate_mode,
                                      erase=erase, transfer=transfer, fusion=config.fusion)
        self.nnfm: list[NnfmLevel] = init_nnfm(rng, chans) if v is Variant.NETNET else []
        self.tdp: list[TdpLevel] = init_tdp(rng, chans) if v is Variant.NETM_TDP else []
        self.anchor_config = config.anchor_config()
        self.anchors, self.anchor_levels = generate_anchors(self.anchor_config)
        k = config.num_classes
        self.heads = []
        for lvl, (c, per) in enumerate(zip(chans, self.anchor_config.per_cell)):
            self.heads.append(Head(init_conv(rng, c, per * k, config.head_kernel, f"head{lvl}.cls", std=0.01),
                                   init_conv(rng, c, per * 4, config.head_kernel, f"head{lvl}.loc", std=0.01)))

    def parameters(self) -> list[Parameter]:
        out = self.backbone.parameters()
        for group in (self.nnfm, self.tdp, self.wiring, self.heads):
            for item in group:
                out += item.parameters()
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise RuntimeError("duplicate parameter names")
        return named

    def features(self, images: Tensor) -> list[Tensor]:
        feats = forward_pyramid(images, self.backbone)
        if self.nnfm:
            feats = nnfm_apply(feats, self.nnfm)
        if self.tdp:
            feats = tdp_apply(feats, self.tdp)
        if self.wiring:
            feats = wire(feats, self.config.topology, self.wiring)
        return feats

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Batched (N, A, K) class logits and (N, A, 4) offsets."""
        if images.ndim == 3:
            images = reshape(images, (1,) + images.shape)
        k = self.config.num_classes
        cls_parts, loc_parts = [], []
        for feat, head, per in zip(self.features(images), self.heads, self.anchor_config.per_cell):
            n, _, h, w = feat.shape
            for params, width, sink in ((head.cls, k, cls_parts), (head.loc, 4, loc_parts)):
                out = reshape(conv(feat, params), (n, per, width, h, w))
                sink.append(reshape(transpose(out, (0, 3, 4, 1, 2)), (n, h * w * per, width)))
        return concat(cls_parts, axis=1), concat(loc_parts, axis=1)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr0: float = 0.002
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    milestones: tuple[int, ...] = (90, 120, 140)
    gamma: float = 0.1
    epochs: int = 160
    batch_size: int = 32
    seed: int = 0
    neg_ratio: int = 3

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0 or self.gamma <= 0:
            raise ConfigError("learning-rate settings must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigError("epochs and batch_size must be positive")
        if any(a >= b for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must increase: {self.milestones}")

    @classmethod
    def desk(cls, seed: int = 0) -> "TrainConfig":
        return cls(epochs=30, milestones=(20, 26), batch_size=16, seed=seed)

    def learning_rate(self, epoch: int, step: int, steps_per_epoch: int) -> float:
        if epoch < self.warmup_epochs:
            frac = (epoch * steps_per_epoch + step) / (self.warmup_epochs * steps_per_epoch)
            return self.lr0 / 10 + (self.lr0 - self.lr0 / 10) * frac
        return self.lr0 * self.gamma ** sum(epoch >= m for m in self.milestones)


class DivergenceError(RuntimeError):
    pass


def assign_dataset(model: Detector, scenes, pos_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    labels, targets = [], []
    for sc in scenes:
        a = match_anchors(model.anchors, sc.gts, pos_thresh)
        labels.append(a.labels)
        targets.append(a.targets)
    return np.stack(labels), np.stack(targets)


def train(model: Detector, dataset, cfg: TrainConfig, progress=None) -> list[float]:
    """SGD with momentum, weight decay, linear warm-up and step decay.

    Returns the mean loss of each epoch.
    """
    if not dataset:
        raise ValueError("empty training set")
    images = np.stack([sc.image.data for sc in dataset])
    labels, targets = assign_dataset(model, dataset)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(dataset)
    steps = math.ceil(n / cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            zero_grad(params)
            with Tape() as tape:
                cls_logits, box_preds = model.forward(Tensor(images[idx]))
                loss = multibox_loss(cls_logits, box_preds, labels[idx], targets[idx], cfg.neg_ratio)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
            backward(tape, loss)
            lr = cfg.learning_rate(epoch, step, steps)
            for p, v in zip(params, velocity):
                g = p.grad + cfg.weight_decay * p.data
                v *= cfg.momentum
                v += g
                p.data -= lr * v
            total += value * len(idx)
        history.append(total / n)
        if not math.isfinite(history[-1]):
            raise DivergenceError(f"non-finite mean loss at epoch {epoch}")
        log.info("epoch %d loss %.6f", epoch, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    return history


# --------------------------------------------------------------------------
# inference


def nms(dets: list[Detection], thresh: float) -> list[Detection]:
    """Greedy suppression of same-class boxes; equal scores keep input order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(iou(d, k) < thresh for k in kept):
            kept.append(d)
    return kept


def _nms_indices(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> list[int]:
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(int(order[i]))
        suppressed |= overlaps[i] >= thresh
    return keep


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def postprocess(logits: np.ndarray, offsets: np.ndarray, anchors: np.ndarray, image_id: int = 0,
                score_thresh: float = 0.05, nms_thresh: float = 0.45, top_k: int = 100,
                pre_nms_top_k: int = 400) -> list[Detection]:
    probs = softmax_np(logits)
    boxes = np.clip(decode(offsets, anchors), 0.0, 1.0)
    out: list[Detection] = []
    for c in range(1, probs.shape[-1]):
        cand = np.where(probs[:, c] > score_thresh)[0]
        if cand.size == 0:
            continue
        cand = cand[np.argsort(-probs[cand, c], kind="stable")[:pre_nms_top_k]]
        valid = (boxes[cand, 2] > boxes[cand, 0]) & (boxes[cand, 3] > boxes[cand, 1])
        cand = cand[valid]
        for i in _nms_indices(boxes[cand], probs[cand, c], nms_thresh):
            a = cand[i]
            out.append(Detection(*map(float, boxes[a]), class_id=c, score=float(probs[a, c]),
                                 image_id=image_id))
    out.sort(key=lambda d: -d.score)
    return out[:top_k]


def predict(image: Tensor, model: Detector, score_thresh: float = 0.05, nms_thresh: float = 0.45,
            top_k: int = 100, image_id: int = 0) -> list[Detection]:
    logits, offsets = model.forward(image)
    return postprocess(logits.data[0], offsets.data[0], model.anchors, image_id,
                       score_thresh, nms_thresh, top_k)


def predict_batch(scenes, model: Detector, batch_size: int = 32, first_image_id: int = 0,
                  **kwargs) -> list[list[Detection]]:
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        logits, offsets = model.forward(Tensor(np.stack([s.image.data for s in chunk])))
        for i in range(len(chunk)):
            out.append(postprocess(logits.data[i], offsets.data[i], model.anchors,
                                   first_image_id + start + i, **kwargs))
    return out
