"""Quantization-aware training of a low-bit student by distilling a frozen teacher."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import QATConfig
from .detector import BoxLabel, GridDetector, detect_loss
from .metrics import evaluate
from .optim import Adam, cosine_lr
from .quant import attach_quantizers
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_KD", "L_feat", "L_detect", "total", "mAP", "mAP50", "wall_clock_s")


class DistillError(ValueError):
    pass


def _binary_kl(t_logit: Tensor, s_logit: Tensor) -> Tensor:
    """Elementwise KL(Bern(sigmoid(t)) || Bern(sigmoid(s)))."""
    pt = T.sigmoid(t_logit)
    # log sigmoid(z) = -softplus(-z), log(1 - sigmoid(z)) = -softplus(z)
    log_pt, log_1pt = -T.softplus(-t_logit), -T.softplus(t_logit)
    log_ps, log_1ps = -T.softplus(-s_logit), -T.softplus(s_logit)
    return pt * (log_pt - log_ps) + (1.0 - pt) * (log_1pt - log_1ps)


def kd_loss(teacher_pred: Tensor, student_pred: Tensor, tau: float, objectness: bool = True) -> Tensor:
    """``tau^2 / N`` times the per-image sum of cell-wise KL(teacher || student).

    Class logits use a softmax over the class axis; objectness uses a
    Bernoulli KL at the same temperature. Box channels are not distilled.
    """
    if not tau > 0:
        raise DistillError(f"tau must be > 0, got {tau}")
    if teacher_pred.shape != student_pred.shape:
        raise T.ShapeError("kd_loss", teacher_pred.shape, student_pred.shape)
    n = teacher_pred.shape[0]
    zt = teacher_pred.detach()
    total = Tensor(0.0)
    if teacher_pred.shape[1] > 5:
        ct, cs = zt[:, 5:] * (1.0 / tau), student_pred[:, 5:] * (1.0 / tau)
        lpt, lps = T.log_softmax(ct, axis=1), T.log_softmax(cs, axis=1)
        total = total + (T.exp(lpt) * (lpt - lps)).sum()
    if objectness:
        total = total + _binary_kl(zt[:, 4:5] * (1.0 / tau), student_pred[:, 4:5] * (1.0 / tau)).sum()
    return total * (tau * tau / n)


def feature_loss(teacher_feats: dict[str, Tensor], student_feats: dict[str, Tensor],
                 layers: Sequence[str] | None = None) -> Tensor:
    """``1 / (N L)`` times the summed squared distance between matching feature maps."""
    layers = list(layers) if layers is not None else sorted(teacher_feats)
    if not layers:
        raise DistillError("no feature layers selected")
    missing = [k for k in layers if k not in teacher_feats or k not in student_feats]
    if missing:
        raise DistillError(f"feature taps missing: {missing}")
    total = Tensor(0.0)
    n = None
    for k in layers:
        ft, fs = teacher_feats[k].detach(), student_feats[k]
        if ft.shape != fs.shape:
            raise T.ShapeError(f"feature_loss[{k}]", ft.shape, fs.shape)
        n = ft.shape[0]
        d = fs - ft
        total = total + (d * d).sum()
    return total * (1.0 / (n * len(layers)))


@dataclass
class QATLoss:
    total: Tensor
    kd: Tensor
    feat: Tensor
    detect: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return self.kd.item(), self.feat.item(), self.detect.item(), self.total.item()


def qat_total_loss(cfg: QATConfig, teacher: GridDetector, student: GridDetector, images: np.ndarray,
                   labels: Sequence[BoxLabel]) -> QATLoss:
    """``beta_kl L_KD + beta_feat L_feat + beta_detect L_detect`` on one batch.

    The teacher runs in eval mode without recording a graph; the student runs
    in whatever mode the caller set.
    """
    prev = teacher.mode
    teacher.set_mode("eval")
    try:
        with T.no_grad():
            t_pred, t_taps = teacher.forward(Tensor(images))
    finally:
        teacher.set_mode(prev)
    s_pred, s_taps = student.forward(Tensor(images))
    zero = Tensor(0.0)
    kd = kd_loss(t_pred, s_pred, cfg.tau, cfg.kd_objectness) if cfg.beta_kl else zero
    feat = feature_loss(t_taps, s_taps, cfg.feature_layers) if cfg.beta_feat else zero
    det = detect_loss(s_pred, labels).total if cfg.beta_detect else zero
    total = kd * cfg.beta_kl + feat * cfg.beta_feat + det * cfg.beta_detect
    return QATLoss(total, kd, feat, det)


@dataclass
class QATResult:
    student: GridDetector
    log: list[dict]
    best_epoch: int
    diverged: bool = False
    message: str = ""
    history: list[float] = field(default_factory=list)  # per-step total loss

    def csv(self) -> str:
        return format_log(self.log)


def format_log(rows: Sequence[dict], columns: Sequence[str] = LOG_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r[c] for c in columns])
    return buf.getvalue()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def prepare_student(teacher: GridDetector, cfg: QATConfig, calib_images: np.ndarray) -> GridDetector:
    """Copy the teacher, attach quantizers and initialize them from the first calibration batch."""
    student = teacher.copy()
    attach_quantizers(student, cfg.b_w, cfg.b_a, cfg.asymmetric_act)
    student.set_mode("eval")
    with T.no_grad():
        student(Tensor(calib_images[:cfg.batch_size]))
    return student


def run_qat(teacher: GridDetector, images: np.ndarray, labels: Sequence[Sequence[BoxLabel]],
            cfg: QATConfig, val_set=None, eval_kw: dict | None = None,
            progress: Callable | None = None) -> QATResult:
    """Train student weights and quantizer parameters jointly with Adam.

    Row 0 of the log is the calibration-only (post-training quantization)
    model. The returned student is the best-mAP epoch, or the last epoch if
    no validation set is given. A non-finite loss stops training and returns
    the last good student with ``diverged`` set.
    """
    if len(images) == 0:
        raise DistillError("calibration set is empty")
    if len(images) != len(labels):
        raise DistillError(f"{len(images)} images but {len(labels)} label lists")
    eval_kw = eval_kw or {}
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    student = prepare_student(teacher, cfg, images)
    params = student.parameters() + student.quantizer_parameters()
    opt = Adam(params, lr=cfg.lr)
    steps_per_epoch = -(-len(images) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    def flat_labels(idx):
        return [lb.with_batch(j) for j, i in enumerate(idx) for lb in labels[i]]

    def measure(epoch: int, sums: np.ndarray | None) -> dict:
        row = {"epoch": epoch}
        if sums is None:  # calibration-only model: losses without updates
            student.set_mode("eval")
            sums = np.zeros(4)
            with T.no_grad():
                for start in range(0, len(images), cfg.batch_size):
                    idx = np.arange(start, min(start + cfg.batch_size, len(images)))
                    sums += qat_total_loss(cfg, teacher, student, images[idx], flat_labels(idx)).values()
            sums /= steps_per_epoch
        row.update(zip(("L_KD", "L_feat", "L_detect", "total"), map(float, sums)))
        if val_set is not None:
            res = evaluate(student, val_set, **eval_kw)
            row.update(mAP=res.map_5095, mAP50=res.map_50)
        else:
            row.update(mAP=None, mAP50=None)
        row["wall_clock_s"] = round(time.perf_counter() - t0, 3)
        return row

    rows = [measure(0, None)]
    best, best_epoch = student.copy(), 0
    last_good, last_epoch = best, 0
    best_score = rows[0]["mAP"] if val_set is not None else -math.inf
    history: list[float] = []
    step = 0
    if progress:
        progress(rows[0])
    for epoch in range(1, cfg.epochs + 1):
        student.set_mode(cfg.student_bn)
        sums = np.zeros(4)
        for idx in _batches(len(images), cfg.batch_size, rng):
            opt.lr = cosine_lr(cfg.lr, step, total_steps)
            opt.zero_grad()
            loss = qat_total_loss(cfg, teacher, student, images[idx], flat_labels(idx))
            values = loss.values()
            if not all(math.isfinite(v) for v in values):
                msg = f"non-finite QAT loss at epoch {epoch}, step {step}: {values}"
                log.error(msg)
                if val_set is None:
                    best, best_epoch = last_good, last_epoch
                return QATResult(best, rows, best_epoch, True, msg, history)
            loss.total.backward()
            opt.step()
            for q in student.named_quantizers().values():
                q.clamp_()
            sums += values
            history.append(values[3])
            step += 1
        rows.append(measure(epoch, sums / steps_per_epoch))
        if progress:
            progress(rows[-1])
        student.set_mode("eval")
        last_good, last_epoch = student.copy(), epoch
        if val_set is None:
            best, best_epoch = last_good, epoch
        elif rows[-1]["mAP"] > best_score:
            best, best_epoch, best_score = last_good, epoch, rows[-1]["mAP"]
    best.set_mode("eval")
    return QATResult(best, rows, best_epoch, False, "", history)
