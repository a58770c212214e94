"""Full-precision teacher training on a labelled dataset."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import tensor as T
from .detector import LOSS_WEIGHTS, BoxLabel, GridDetector, detect_loss
from .metrics import evaluate
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)


def hflip(images: np.ndarray, labels: list[BoxLabel], flip: np.ndarray):
    images = images.copy()
    images[flip] = images[flip][..., ::-1]
    labels = [replace(lb, cx=1.0 - lb.cx) if flip[lb.batch_index] else lb for lb in labels]
    return images, labels


def train_detector(model: GridDetector, train_set, cfg, val_set=None, progress=None) -> list[dict]:
    """Adam + cosine schedule over ``cfg.epochs``; returns a per-epoch history.

    ``cfg`` needs ``epochs``, ``batch_size``, ``lr``, ``weight_decay``, ``seed``
    and optionally ``loss_weights``.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = tuple(getattr(cfg, "loss_weights", LOSS_WEIGHTS))
    steps_per_epoch = -(-len(train_set) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        model.set_mode("train")
        sums = np.zeros(4)
        for images, labels, _ in train_set.batches(cfg.batch_size, rng):
            images, labels = hflip(images, labels, rng.random(len(images)) < 0.5)
            opt.lr = cosine_lr(cfg.lr, step, total, cfg.lr * 0.01)
            opt.zero_grad()
            loss = detect_loss(model(T.Tensor(images)), labels, weights)
            if not np.isfinite(loss.total.item()):
                raise FloatingPointError(f"non-finite detection loss at epoch {epoch}, step {step}")
            loss.total.backward()
            opt.step()
            sums += [x.item() for x in loss]
            step += 1
        row = {"epoch": epoch + 1, **dict(zip(("loss", "category", "box", "conf"),
                                                (sums / steps_per_epoch).tolist()))}
        if val_set is not None and (epoch + 1 == cfg.epochs or getattr(cfg, "eval_every", 0)
                                    and (epoch + 1) % cfg.eval_every == 0):
            res = evaluate(model, val_set)
            row.update(mAP=res.map_5095, mAP50=res.map_50)
        history.append(row)
        log.info("teacher epoch %s", row)
        if progress:
            progress(row)
    model.set_mode("eval")
    return history
