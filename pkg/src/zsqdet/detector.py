"""Tiny anchor-free grid detector, its training loss, and prediction decoding.

Head layout per cell: ``tx, ty, tw, th, obj, class_0 .. class_{C-1}``.
Decoding: ``cx = (sigmoid(tx) + gx) / G``, ``w = sigmoid(tw) ** 2`` (and the
same for y/h), score ``sigmoid(obj) * max_k sigmoid(class_k)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .quant import Quantizer
from .tensor import Tensor

LOSS_WEIGHTS = (0.05, 1.0, 0.5)  # box, conf, cls


class LabelError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BoxLabel:
    batch_index: int
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def clamped(self) -> BoxLabel:
        x1, y1, x2, y2 = self.xyxy()
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, 1.0), min(y2, 1.0)
        return replace(self, cx=(x1 + x2) / 2, cy=(y1 + y2) / 2,
                       w=max(x2 - x1, 0.0), h=max(y2 - y1, 0.0))

    def with_batch(self, index: int) -> BoxLabel:
        return replace(self, batch_index=index)


def validate_label(label: BoxLabel, num_classes: int, batch_size: int | None = None) -> BoxLabel:
    """Clamp a label into the image; reject it if nothing is left or fields are invalid."""
    if not 0 <= label.class_id < num_classes:
        raise LabelError(f"class_id {label.class_id} outside [0, {num_classes})")
    if batch_size is not None and not 0 <= label.batch_index < batch_size:
        raise LabelError(f"batch_index {label.batch_index} outside [0, {batch_size})")
    if not all(math.isfinite(v) for v in (label.cx, label.cy, label.w, label.h)):
        raise LabelError(f"non-finite box {label}")
    c = label.clamped()
    if c.w <= 0 or c.h <= 0:
        raise LabelError(f"box lies outside the image after clamping: {label}")
    return c


def iou(a: BoxLabel, b: BoxLabel) -> float:
    ax1, ay1, ax2, ay2 = a.xyxy()
    bx1, by1, bx2, by2 = b.xyxy()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def boxes_xyxy(labels: Sequence[BoxLabel]) -> np.ndarray:
    if not labels:
        return np.zeros((0, 4))
    return np.array([lb.xyxy() for lb in labels], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between xyxy box arrays of shape (n, 4) and (m, 4)."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
                 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
                 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order (ties: lower index first)."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return keep


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng: np.random.Generator,
                 bias: bool = False, init_std: float | None = None):
        fan_in = cin * kernel * kernel
        std = math.sqrt(2.0 / fan_in) if init_std is None else init_std
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = kernel // 2
        self.weight_quant: Quantizer | None = None
        self.act_quant: Quantizer | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.act_quant is not None:
            x = self.act_quant(x)
        w = self.weight_quant(self.weight) if self.weight_quant is not None else self.weight
        return T.conv2d(x, w, self.bias, self.stride, self.padding)


class BatchNorm2d:
    """BatchNorm with three modes.

    ``train`` normalizes with batch statistics and updates the running buffers;
    ``eval`` uses the running buffers; ``measure`` behaves like ``eval`` but
    also records differentiable batch mean/variance of its input in
    ``last_stats`` without touching the buffers.
    """

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.last_stats: tuple[Tensor, Tensor] | None = None

    def __call__(self, x: Tensor, mode: str, momentum: float = T.BN_MOMENTUM) -> Tensor:
        if mode == "measure":
            self.last_stats = (T.channel_mean(x), T.channel_var(x))
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             train=(mode == "train"), momentum=momentum)


class GridDetector:
    """Conv-BN-SiLU stages (stride 2, 2, 2, 1) followed by a 1x1 prediction conv."""

    MODES = ("train", "eval", "measure")

    def __init__(self, num_classes: int = 6, channels: Sequence[int] = (16, 32, 64),
                 image_size: int = 64, seed: int = 0):
        if num_classes < 1:
            raise GeometryError("num_classes must be >= 1")
        if len(channels) != 3 or any(c < 1 for c in channels):
            raise GeometryError(f"expected three positive stage widths, got {channels}")
        if image_size <= 0 or image_size % self.stride:
            raise GeometryError(f"image size {image_size} not divisible by stride {self.stride}")
        self.num_classes = num_classes
        self.channels = tuple(int(c) for c in channels)
        self.image_size = image_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        c0, c1, c2 = self.channels
        plan = [(3, c0, 2), (c0, c1, 2), (c1, c2, 2), (c2, c2, 1)]
        self.convs = [Conv2d(i, o, 3, s, rng) for i, o, s in plan]
        self.bns = [BatchNorm2d(o) for _, o, _ in plan]
        self.head = Conv2d(c2, 5 + num_classes, 1, 1, rng, bias=True, init_std=0.01)
        # objectness starts near 1% so early training is not swamped by negatives
        self.head.bias.data[4] = -4.5
        self.head.bias.data[5:] = -2.0
        self.mode = "train"
        self.bn_momentum = T.BN_MOMENTUM
        self.tap_names = ("stage1", "stage2", "stage3")

    stride = 8

    def grid_size(self, image_size: int | None = None) -> int:
        size = self.image_size if image_size is None else image_size
        if size % self.stride:
            raise GeometryError(f"image size {size} not divisible by stride {self.stride}")
        return size // self.stride

    def set_mode(self, mode: str) -> GridDetector:
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        return self

    def forward(self, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != x.shape[3]:
            raise T.ShapeError("detector input (expects N x 3 x H x H)", x.shape)
        if x.shape[2] % self.stride:
            raise GeometryError(f"input size {x.shape[2]} not divisible by stride {self.stride}")
        taps: dict[str, Tensor] = {}
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            h = T.silu(bn(conv(h), self.mode, self.bn_momentum))
            if i < len(self.tap_names):
                taps[self.tap_names[i]] = h
        return self.head(h), taps

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    # -- introspection ----------------------------------------------------
    def conv_layers(self) -> list[Conv2d]:
        return [*self.convs, self.head]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out[f"block{i}.conv.weight"] = conv.weight
            out[f"block{i}.bn.gamma"] = bn.gamma
            out[f"block{i}.bn.beta"] = bn.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.bns):
            out[f"block{i}.bn.running_mean"] = bn.running_mean
            out[f"block{i}.bn.running_var"] = bn.running_var
        return out

    def named_quantizers(self) -> dict[str, Quantizer]:
        names = [f"block{i}.conv" for i in range(len(self.convs))] + ["head"]
        out = {}
        for name, conv in zip(names, self.conv_layers()):
            if conv.weight_quant is not None:
                out[f"{name}.weight_quant"] = conv.weight_quant
            if conv.act_quant is not None:
                out[f"{name}.act_quant"] = conv.act_quant
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def quantizer_parameters(self) -> list[Tensor]:
        return [t for q in self.named_quantizers().values() for t in q.learnable()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def architecture(self) -> dict:
        return {"num_classes": self.num_classes, "channels": list(self.channels),
                "image_size": self.image_size, "seed": self.seed}

    def copy(self) -> GridDetector:
        return copy.deepcopy(self)


def build_model(channels: Sequence[int] = (16, 32, 64), num_classes: int = 6,
                image_size: int = 64, seed: int = 0) -> GridDetector:
    return GridDetector(num_classes=num_classes, channels=channels, image_size=image_size, seed=seed)


# ---------------------------------------------------------------------------
# targets, loss, decoding
# ---------------------------------------------------------------------------

def assign_targets(labels: Sequence[BoxLabel], batch_size: int, grid: int, num_classes: int):
    """Map each label to the cell containing its centre.

    Returns ``(index, boxes)`` where ``index`` is an int array of rows
    ``(batch, gy, gx, class)`` and ``boxes`` the matching ``(cx, cy, w, h)``.
    When two labels share a cell the larger box wins, then the lower class id.
    """
    winners: dict[tuple[int, int, int], BoxLabel] = {}
    for raw in labels:
        lb = validate_label(raw, num_classes, batch_size)
        gx = min(int(lb.cx * grid), grid - 1)
        gy = min(int(lb.cy * grid), grid - 1)
        key = (lb.batch_index, gy, gx)
        cur = winners.get(key)
        if cur is None or (lb.area, -lb.class_id) > (cur.area, -cur.class_id):
            winners[key] = lb
    keys = sorted(winners)
    index = np.array([(*k, winners[k].class_id) for k in keys], dtype=np.int64).reshape(-1, 4)
    boxes = np.array([(winners[k].cx, winners[k].cy, winners[k].w, winners[k].h) for k in keys],
                     dtype=np.float64).reshape(-1, 4)
    return index, boxes


def _bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    return T.softplus(z) - z * Tensor(target)


def box_iou_tensor(pred_box: Sequence[Tensor], target: np.ndarray) -> Tensor:
    """Differentiable IoU between predicted (cx, cy, w, h) tensors and constant targets."""
    cx, cy, w, h = pred_box
    tx1 = Tensor(target[:, 0] - target[:, 2] / 2)
    ty1 = Tensor(target[:, 1] - target[:, 3] / 2)
    tx2 = Tensor(target[:, 0] + target[:, 2] / 2)
    ty2 = Tensor(target[:, 1] + target[:, 3] / 2)
    px1, px2 = cx - w * 0.5, cx + w * 0.5
    py1, py2 = cy - h * 0.5, cy + h * 0.5
    iw = T.relu(T.minimum(px2, tx2) - T.maximum(px1, tx1))
    ih = T.relu(T.minimum(py2, ty2) - T.maximum(py1, ty1))
    inter = iw * ih
    union = w * h + Tensor(target[:, 2] * target[:, 3]) - inter
    return inter / union


@dataclass
class DetectLoss:
    total: Tensor
    category: Tensor
    box: Tensor
    conf: Tensor

    def __iter__(self):
        return iter((self.total, self.category, self.box, self.conf))


def detect_loss(pred: Tensor, labels: Sequence[BoxLabel],
                weights: Sequence[float] = LOSS_WEIGHTS) -> DetectLoss:
    """Detection loss ``λ_box·L_box + λ_conf·L_conf + λ_cls·L_category``."""
    if pred.ndim != 4 or pred.shape[2] != pred.shape[3] or pred.shape[1] < 6:
        raise T.ShapeError("detect_loss(pred)", pred.shape)
    n, ch, g, _ = pred.shape
    num_classes = ch - 5
    index, boxes = assign_targets(labels, n, g, num_classes)
    obj_target = np.zeros((n, g, g))
    if len(index):
        obj_target[index[:, 0], index[:, 1], index[:, 2]] = 1.0
    l_conf = _bce_with_logits(pred[:, 4], obj_target).mean()
    if len(index) == 0:
        zero = Tensor(0.0)
        l_box = l_cls = zero
    else:
        b, gy, gx, cls = index.T
        cells = pred[b, :, gy, gx]  # (K, 5 + C)
        px = (T.sigmoid(cells[:, 0]) + Tensor(gx.astype(np.float64))) * (1.0 / g)
        py = (T.sigmoid(cells[:, 1]) + Tensor(gy.astype(np.float64))) * (1.0 / g)
        pw = T.sigmoid(cells[:, 2]) ** 2
        ph = T.sigmoid(cells[:, 3]) ** 2
        l_box = (1.0 - box_iou_tensor((px, py, pw, ph), boxes)).mean()
        onehot = np.zeros((len(index), num_classes))
        onehot[np.arange(len(index)), cls] = 1.0
        l_cls = _bce_with_logits(cells[:, 5:], onehot).mean()
    wb, wc, wk = weights
    total = l_box * wb + l_conf * wc + l_cls * wk
    return DetectLoss(total, l_cls, l_box, l_conf)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def encode_label(label: BoxLabel, grid: int) -> tuple[int, int, np.ndarray]:
    """Exact inverse of the decoding parameterization (box channels only)."""
    gx = min(int(label.cx * grid), grid - 1)
    gy = min(int(label.cy * grid), grid - 1)
    t = np.array([_logit(label.cx * grid - gx), _logit(label.cy * grid - gy),
                  _logit(math.sqrt(label.w)), _logit(math.sqrt(label.h))])
    return gy, gx, t


def _sig(x: np.ndarray) -> np.ndarray:
    return T._sigmoid(np.asarray(x, dtype=np.float64))


def decode_predictions(pred: Tensor | np.ndarray, conf_thresh: float, iou_thresh: float,
                       agnostic: bool = False, max_det: int = 100) -> list[BoxLabel]:
    """Turn raw head outputs into scored boxes, then per-class greedy NMS per image."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    n, ch, g, _ = p.shape
    gy, gx = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    out: list[BoxLabel] = []
    for bi in range(n):
        cell = p[bi]
        obj = _sig(cell[4])
        cls_prob = _sig(cell[5:])
        cls_id = cls_prob.argmax(axis=0)
        score = obj * cls_prob.max(axis=0)
        keep = score > conf_thresh
        if not keep.any():
            continue
        cx = (_sig(cell[0]) + gx) / g
        cy = (_sig(cell[1]) + gy) / g
        w = _sig(cell[2]) ** 2
        h = _sig(cell[3]) ** 2
        cand = [BoxLabel(bi, int(cls_id[y, x]), float(cx[y, x]), float(cy[y, x]),
                         float(w[y, x]), float(h[y, x]), float(score[y, x])).clamped()
                for y, x in zip(*np.nonzero(keep))]
        cand = [c for c in cand if c.w > 0 and c.h > 0]
        kept: list[BoxLabel] = []
        groups = [cand] if agnostic else [[c for c in cand if c.class_id == k]
                                          for k in sorted({c.class_id for c in cand})]
        for group in groups:
            idx = nms(boxes_xyxy(group), np.array([c.confidence for c in group]), iou_thresh)
            kept.extend(group[i] for i in idx)
        kept.sort(key=lambda c: -c.confidence)
        out.extend(kept[:max_det])
    return out
