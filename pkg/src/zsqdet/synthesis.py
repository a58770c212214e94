"""Task-specific calibration-set synthesis by inverting a frozen detector.

Images are optimized in an unconstrained domain ``z`` (initialized from
N(0, 1)) and shown to the teacher as ``x = sigmoid(z)`` in [0, 1]. The
regularizers act on ``x``, the image the teacher sees (before cutout).

Two stages:

1. label sampling at low resolution: start from one random box per image and
   alternate image updates with adaptive relabelling by the teacher;
2. image synthesis at full resolution with the labels frozen, Adam with a
   cosine-annealed learning rate, and cutout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import SynthesisConfig
from .detector import BoxLabel, GridDetector, boxes_xyxy, decode_predictions, detect_loss, iou_matrix
from .optim import Adam, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)

BOX_MIN, BOX_MAX = 0.2, 0.8
SOURCES = ("adaptive", "tile", "multisample", "gaussian", "real")


class SynthesisError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _measure_forward(model: GridDetector, images: Tensor) -> tuple[Tensor, Tensor, dict]:
    """Forward in measure mode; returns (pred, prior loss, taps)."""
    if not model.bns:
        raise SynthesisError("model has no batch-norm layers to align")
    prev = model.mode
    model.set_mode("measure")
    try:
        pred, taps = model.forward(images)
    finally:
        model.set_mode(prev)
    terms = []
    for bn in model.bns:
        mu, var = bn.last_stats
        bn.last_stats = None
        terms.append(T.l2norm(mu - Tensor(bn.running_mean)))
        terms.append(T.l2norm(var - Tensor(bn.running_var)))
    prior = terms[0]
    for t in terms[1:]:
        prior = prior + t
    return pred, prior, taps


def bns_alignment_loss(model: GridDetector, images: Tensor) -> Tensor:
    """Sum over BN layers of ||batch mean - running mean|| + ||batch var - running var||."""
    return _measure_forward(model, images)[1]


def tv_loss(x: Tensor) -> Tensor:
    """Mean squared forward difference along height plus along width."""
    dh = x[:, :, 1:, :] - x[:, :, :-1, :]
    dw = x[:, :, :, 1:] - x[:, :, :, :-1]
    return (dh * dh).mean() + (dw * dw).mean()


def regularizer_loss(x: Tensor, alpha_tv: float, alpha_l2: float) -> Tensor:
    """``alpha_tv * L_TV + alpha_l2 * ||x||^2`` with the squared norm averaged over the batch."""
    n = x.shape[0] if x.ndim == 4 else 1
    total = Tensor(0.0)
    if alpha_tv:
        total = total + tv_loss(x) * alpha_tv
    if alpha_l2:
        total = total + (x * x).sum() * (alpha_l2 / n)
    return total


@dataclass
class SynthesisLoss:
    total: Tensor
    prior: Tensor
    detect: Tensor
    reg: Tensor


@dataclass
class SynthesisState:
    latent: Tensor  # N x 3 x R x R, requires grad; the image is sigmoid(latent)
    labels: list[BoxLabel]
    optimizer: Adam | None = None
    iteration: int = 0

    @property
    def images(self) -> np.ndarray:
        return T._sigmoid(self.latent.data)

    def labels_per_image(self) -> list[list[BoxLabel]]:
        out: list[list[BoxLabel]] = [[] for _ in range(self.latent.shape[0])]
        for lb in self.labels:
            out[lb.batch_index].append(lb)
        return out


def synthesis_objective(model: GridDetector, state: SynthesisState, cfg: SynthesisConfig,
                        mask: np.ndarray | None = None) -> SynthesisLoss:
    """``α_prior·L_prior + α_detect·L_detect + L_reg``; ``mask`` applies cutout to the model input."""
    x = image = T.sigmoid(state.latent)
    if mask is not None:
        x = x * Tensor(mask)
    pred, prior, _ = _measure_forward(model, x)
    if cfg.alpha_detect:
        det = detect_loss(pred, state.labels).total
    else:
        det = Tensor(0.0)
    reg = regularizer_loss(image, cfg.alpha_tv, cfg.alpha_l2)
    total = prior * cfg.alpha_prior + det * cfg.alpha_detect + reg
    return SynthesisLoss(total, prior, det, reg)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def sample_initial_label(num_classes: int, rng: np.random.Generator, batch_index: int = 0,
                         lo: float = BOX_MIN, hi: float = BOX_MAX) -> BoxLabel:
    """One uniformly sampled box fully inside the image."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    cls = min(int(rng.uniform(0, num_classes)), num_classes - 1)
    w = rng.uniform(lo, hi)
    h = rng.uniform(lo, hi)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return BoxLabel(batch_index, cls, float(cx), float(cy), float(w), float(h), 1.0)


def adaptive_label_update(existing: Sequence[BoxLabel], detected: Sequence[BoxLabel],
                          iou_thresh: float) -> list[BoxLabel]:
    """One relabelling round for a single image.

    Detections that overlap no existing label are added; existing labels that
    overlap no detection are dropped. If nothing would remain, the
    highest-confidence existing label is kept so the image never goes empty.
    """
    existing, detected = list(existing), list(detected)
    ious = iou_matrix(boxes_xyxy(detected), boxes_xyxy(existing))
    if existing:
        add = [d for d, row in zip(detected, ious) if row.max() < iou_thresh]
    else:
        add = detected
    if detected:
        keep = [e for e, col in zip(existing, ious.T) if col.max() >= iou_thresh]
    else:
        keep = []
    result = keep + add
    if not result and existing:
        best = max(range(len(existing)), key=lambda i: (existing[i].confidence, -i))
        result = [existing[best]]
    return result


def adaptive_label_step(state: SynthesisState, teacher: GridDetector, conf_thresh: float,
                        iou_thresh: float) -> list[BoxLabel]:
    """Re-detect objects on the current images and update ``state.labels`` in place."""
    prev = teacher.mode
    teacher.set_mode("eval")
    try:
        with T.no_grad():
            pred = teacher(Tensor(state.images))
    finally:
        teacher.set_mode(prev)
    detections = decode_predictions(pred, conf_thresh, iou_thresh)
    per_det: list[list[BoxLabel]] = [[] for _ in range(state.latent.shape[0])]
    for d in detections:
        per_det[d.batch_index].append(d)
    new: list[BoxLabel] = []
    for i, old in enumerate(state.labels_per_image()):
        new.extend(lb.with_batch(i) for lb in adaptive_label_update(old, per_det[i], iou_thresh))
    state.labels = new
    return new


def tile_labels(num_classes: int, rng: np.random.Generator, k: int, n: int | None = None,
                batch_index: int = 0) -> list[BoxLabel]:
    """One box inside each of ``n`` distinct cells of a ``k x k`` grid (all cells if ``n`` is None)."""
    cells = [(r, c) for r in range(k) for c in range(k)]
    if n is not None:
        pick = rng.choice(len(cells), size=min(n, len(cells)), replace=False)
        cells = [cells[i] for i in sorted(pick)]
    out = []
    size = 1.0 / k
    for r, c in cells:
        lb = sample_initial_label(num_classes, rng, batch_index)
        w, h = lb.w * size, lb.h * size
        cx = c * size + rng.uniform(w / 2, size - w / 2)
        cy = r * size + rng.uniform(h / 2, size - h / 2)
        out.append(BoxLabel(batch_index, lb.class_id, float(cx), float(cy), float(w), float(h)))
    return out


def _draw_count(rng: np.random.Generator, histogram: dict) -> int:
    counts = sorted((int(k), v) for k, v in histogram.items() if int(k) > 0 and v > 0)
    if not counts:
        raise ValueError("label-count histogram is empty")
    values = np.array([c for c, _ in counts])
    p = np.array([v for _, v in counts], dtype=np.float64)
    return int(rng.choice(values, p=p / p.sum()))


def exact_counts(histogram: dict, total: int) -> list[int]:
    """Per-image label counts whose histogram matches ``histogram`` scaled to ``total`` images.

    Largest-remainder rounding, so the result reproduces the provided histogram
    exactly whenever ``total`` equals its image count.
    """
    items = sorted((int(k), v) for k, v in histogram.items() if int(k) > 0 and v > 0)
    n_src = sum(v for _, v in items)
    raw = [(k, v * total / n_src) for k, v in items]
    base = {k: int(math.floor(x)) for k, x in raw}
    rest = total - sum(base.values())
    for k, _ in sorted(raw, key=lambda kx: (-(kx[1] - math.floor(kx[1])), kx[0]))[:rest]:
        base[k] += 1
    return [k for k, _ in items for _ in range(base[k])]


def baseline_labels(kind: str, distribution_mode: str, count: int, num_classes: int,
                    rng: np.random.Generator, histogram: dict | None = None,
                    fixed_count: int = 3, tile_k: int = 2) -> list[list[BoxLabel]]:
    """Labels for the data-free baselines, one list per image.

    ``in`` mode draws per-image label counts from the real ``histogram``;
    ``out`` mode uses ``fixed_count`` (multisample) or a full ``tile_k`` grid (tile).
    """
    if distribution_mode not in ("in", "out"):
        raise ValueError(f"distribution_mode must be 'in' or 'out', got {distribution_mode!r}")
    if distribution_mode == "in" and not histogram:
        raise ValueError("in-distribution baselines need the real label-count histogram")
    if kind == "gaussian":
        return [[sample_initial_label(num_classes, rng, i)] for i in range(count)]
    if distribution_mode == "in":
        counts = exact_counts(histogram, count)
        counts = [counts[i] for i in rng.permutation(len(counts))]
    else:
        counts = [fixed_count if kind == "multisample" else tile_k * tile_k] * count
    out = []
    for i, n in enumerate(counts):
        if kind == "multisample":
            out.append([sample_initial_label(num_classes, rng, i) for _ in range(n)])
        elif kind == "tile":
            k = tile_k if distribution_mode == "out" else max(1, math.ceil(math.sqrt(n)))
            out.append(tile_labels(num_classes, rng, k, None if distribution_mode == "out" else n, i))
        else:
            raise ValueError(f"unknown baseline kind {kind!r}")
    return out


# ---------------------------------------------------------------------------
# optimization loops
# ---------------------------------------------------------------------------

def cutout_mask(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    side = max(1, size // 4)
    mask = np.ones((n, 3, size, size))
    for i in range(n):
        y, x = rng.integers(0, size - side + 1, size=2)
        mask[i, :, y:y + side, x:x + side] = 0.0
    return mask


def _check_finite(loss: SynthesisLoss, where: str) -> None:
    value = loss.total.item()
    if not math.isfinite(value):
        raise SynthesisError(f"synthesis diverged at {where}: total={value}, "
                             f"prior={loss.prior.item()}, detect={loss.detect.item()}, "
                             f"reg={loss.reg.item()}")


def sample_labels(teacher: GridDetector, cfg: SynthesisConfig, n: int, rng: np.random.Generator,
                  progress: Callable | None = None) -> list[list[BoxLabel]]:
    """Stage 1: adaptive label sampling at low resolution."""
    res = cfg.low_resolution
    state = SynthesisState(
        Tensor(rng.standard_normal((n, 3, res, res)), requires_grad=True),
        [sample_initial_label(teacher.num_classes, rng, i) for i in range(n)])
    opt = Adam([state.latent], lr=cfg.lr)
    for it in range(cfg.label_iterations):
        opt.zero_grad()
        loss = synthesis_objective(teacher, state, cfg)
        _check_finite(loss, f"label stage iteration {it}")
        loss.total.backward()
        opt.step()
        state.iteration = it + 1
        if state.iteration % cfg.interval == 0:
            adaptive_label_step(state, teacher, cfg.conf_thresh, cfg.iou_thresh)
        if progress:
            progress("labels", it, loss)
    return state.labels_per_image()


@dataclass
class BatchResult:
    images: np.ndarray
    labels: list[list[BoxLabel]]
    prior_initial: float
    prior_final: float
    history: list[dict] = field(default_factory=list)


def synthesize_images(teacher: GridDetector, cfg: SynthesisConfig, labels: list[list[BoxLabel]],
                      rng: np.random.Generator, progress: Callable | None = None) -> BatchResult:
    """Stage 2: optimize fresh N(0, 1) latents toward fixed labels at full resolution."""
    n, res = len(labels), cfg.resolution
    flat = [lb.with_batch(i) for i, lbs in enumerate(labels) for lb in lbs]
    state = SynthesisState(Tensor(rng.standard_normal((n, 3, res, res)), requires_grad=True), flat)
    opt = Adam([state.latent], lr=cfg.lr)
    state.optimizer = opt
    with T.no_grad():
        prior_initial = bns_alignment_loss(teacher, Tensor(state.images)).item()
    history = []
    for it in range(cfg.iterations):
        opt.lr = cosine_lr(cfg.lr, it, cfg.iterations)
        mask = cutout_mask(rng, n, res) if cfg.cutout_enabled else None
        opt.zero_grad()
        loss = synthesis_objective(teacher, state, cfg, mask)
        _check_finite(loss, f"image stage iteration {it}")
        loss.total.backward()
        opt.step()
        state.iteration = it + 1
        history.append({"iteration": it, "total": loss.total.item(), "prior": loss.prior.item(),
                        "detect": loss.detect.item(), "reg": loss.reg.item()})
        if progress:
            progress("images", it, loss)
    with T.no_grad():
        prior_final = bns_alignment_loss(teacher, Tensor(state.images)).item()
    return BatchResult(state.images, labels, prior_initial, prior_final, history)


@dataclass
class CalibrationSet:
    images: np.ndarray  # float in [0, 1]
    labels: list[list[BoxLabel]]
    source: str
    prior_initial: list[float] = field(default_factory=list)
    prior_final: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def _batch_rng(seed: int, batch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, batch, tag])


def generate_calibration_set(teacher: GridDetector, cfg: SynthesisConfig, count: int,
                             method: str = "adaptive", distribution_mode: str = "out",
                             histogram: dict | None = None, real_labels=None,
                             fixed_count: int = 3, tile_k: int = 2,
                             progress: Callable | None = None) -> CalibrationSet:
    """Produce ``count`` labelled images; batches are independent and seeded by index.

    ``method`` is one of adaptive, multisample, tile, gaussian, real. The
    teacher is only read: its parameters and BN buffers are left untouched.
    """
    if method not in SOURCES:
        raise ValueError(f"unknown synthesis method {method!r}")
    if count <= 0:
        raise ValueError("count must be positive")
    images, labels, p0, p1 = [], [], [], []
    for b, start in enumerate(range(0, count, cfg.batch_size)):
        n = min(cfg.batch_size, count - start)
        label_rng = _batch_rng(cfg.seed, b, 0)
        if method == "adaptive":
            lbs = sample_labels(teacher, cfg, n, label_rng, progress)
        elif method == "real":
            if not real_labels:
                raise ValueError("method 'real' needs real_labels")
            lbs = [[lb.with_batch(i) for lb in real_labels[(start + i) % len(real_labels)]]
                   for i in range(n)]
        else:
            lbs = baseline_labels(method, distribution_mode, n, teacher.num_classes, label_rng,
                                  histogram, fixed_count, tile_k)
        image_rng = _batch_rng(cfg.seed, b, 1)
        if method == "gaussian":
            latent = image_rng.standard_normal((n, 3, cfg.resolution, cfg.resolution))
            images.append(T._sigmoid(latent))
            labels.extend(lbs)
            continue
        res = synthesize_images(teacher, cfg, lbs, image_rng, progress)
        images.append(res.images)
        labels.extend(res.labels)
        p0.append(res.prior_initial)
        p1.append(res.prior_final)
        log.info("synthesis batch %d: prior %.4g -> %.4g", b, res.prior_initial, res.prior_final)
    labels = [[lb.with_batch(i) for lb in lbs] for i, lbs in enumerate(labels)]
    return CalibrationSet(np.concatenate(images), labels, method, p0, p1)
