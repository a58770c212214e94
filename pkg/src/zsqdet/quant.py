"""Per-tensor fake quantization with learnable step size (LSQ) and offset (LSQ+).

Forward:  ``s * clip(round((x - beta) / s), q_min, q_max) + beta``
Backward: straight-through inside the clip range; the step gradient follows
LSQ (``round(v) - v`` inside, ``q_min``/``q_max`` outside) scaled by
``1 / sqrt(numel * q_max)``.

Rounding is half away from zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor, make

DISABLED_BITS = 32
STEP_FLOOR = 1e-8


class QuantizerError(ValueError):
    pass


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def qrange(bits: int) -> tuple[int, int]:
    if bits < 2:
        raise QuantizerError(f"bit width must be >= 2, got {bits}")
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantizerParams:
    bits: int
    step: float
    offset: float = 0.0
    kind: str = "weight"
    asymmetric: bool = False

    @property
    def q_min(self) -> int:
        return qrange(self.bits)[0]

    @property
    def q_max(self) -> int:
        return qrange(self.bits)[1]

    def validate(self) -> None:
        qrange(self.bits)
        if not self.step > 0:
            raise QuantizerError(f"step size must be positive, got {self.step}")
        if self.kind not in ("weight", "activation"):
            raise QuantizerError(f"unknown quantizer kind {self.kind!r}")
        if not self.asymmetric and self.offset != 0.0:
            raise QuantizerError("symmetric quantizer must have zero offset")


def quantize_array(x: np.ndarray, step: float, bits: int, offset: float = 0.0) -> np.ndarray:
    """Numpy forward of the fake quantizer (no graph)."""
    if not step > 0:
        raise QuantizerError(f"step size must be positive, got {step}")
    q_min, q_max = qrange(bits)
    return step * np.clip(round_half_away((x - offset) / step), q_min, q_max) + offset


def lsq_grad_scale(numel: int, q_max: int) -> float:
    return 1.0 / math.sqrt(numel * q_max)


def ste_backward(upstream: np.ndarray, x: np.ndarray, q: QuantizerParams,
                 grad_scale: float | None = None):
    """Gradients of the fake quantizer w.r.t. (x, step, offset).

    ``grad_beta`` is ``None`` for the symmetric variant.
    """
    if upstream.shape != x.shape:
        raise QuantizerError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    q_min, q_max = q.q_min, q.q_max
    v = (x - q.offset) / q.step
    below = v < q_min
    above = v > q_max
    inside = ~(below | above)
    grad_x = upstream * inside
    dstep = np.where(inside, round_half_away(v) - v, np.where(below, q_min, q_max))
    g = lsq_grad_scale(x.size, q_max) if grad_scale is None else grad_scale
    grad_s = float((upstream * dstep).sum()) * g
    grad_beta = float((upstream * ~inside).sum()) if q.asymmetric else None
    return grad_x, grad_s, grad_beta


def fake_quantize(x: Tensor, step: Tensor | float, bits: int, offset: Tensor | float | None = None,
                  kind: str = "weight", grad_scale: float | None = None) -> Tensor:
    """Differentiable fake quantization of ``x``.

    ``step`` and ``offset`` may be learnable scalar tensors. Passing an
    ``offset`` selects the asymmetric (LSQ+) variant.
    """
    s_t = step if isinstance(step, Tensor) else Tensor(step)
    b_t = None
    if offset is not None:
        b_t = offset if isinstance(offset, Tensor) else Tensor(offset)
    q = QuantizerParams(bits=bits, step=s_t.item(),
                        offset=b_t.item() if b_t is not None else 0.0,
                        kind=kind, asymmetric=b_t is not None)
    q.validate()
    out = quantize_array(x.data, q.step, bits, q.offset)

    def bw(g):
        gx, gs, gb = ste_backward(g, x.data, q, grad_scale)
        grads = [gx, np.asarray(gs).reshape(s_t.shape)]
        if b_t is not None:
            grads.append(np.asarray(gb).reshape(b_t.shape))
        return tuple(grads)

    parents = (x, s_t) if b_t is None else (x, s_t, b_t)
    return make(out, parents, bw, "fake_quantize")


def init_step_from_calibration(samples: np.ndarray, q: QuantizerParams) -> QuantizerParams:
    """Initial step (and offset) from calibration samples.

    Symmetric: ``s = 2 * mean(|x|) / sqrt(q_max)``.
    Asymmetric: the integer grid is stretched over ``[min, max]``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise QuantizerError("calibration samples are empty")
    if q.asymmetric:
        lo, hi = float(samples.min()), float(samples.max())
        step = (hi - lo) / (q.q_max - q.q_min)
        if step <= STEP_FLOOR:
            warnings.warn("degenerate calibration range; step set to floor", RuntimeWarning,
                          stacklevel=2)
            return replace(q, step=STEP_FLOOR, offset=lo)
        return replace(q, step=step, offset=lo - step * q.q_min)
    step = 2.0 * float(np.abs(samples).mean()) / math.sqrt(q.q_max)
    if step <= STEP_FLOOR:
        warnings.warn("all-zero calibration samples; step set to floor", RuntimeWarning,
                      stacklevel=2)
        step = STEP_FLOOR
    return replace(q, step=step, offset=0.0)


class Quantizer:
    """Learnable per-tensor quantizer attached to a layer input or weight."""

    def __init__(self, bits: int, kind: str = "weight", asymmetric: bool = False):
        if bits != DISABLED_BITS:
            qrange(bits)
        self.bits = bits
        self.kind = kind
        self.asymmetric = asymmetric
        self.step = Tensor(1.0, requires_grad=True)
        self.offset = Tensor(0.0, requires_grad=True) if asymmetric else None
        self.initialized = False

    @property
    def enabled(self) -> bool:
        return self.bits != DISABLED_BITS

    def params(self) -> QuantizerParams:
        return QuantizerParams(self.bits, self.step.item(),
                               self.offset.item() if self.offset is not None else 0.0,
                               self.kind, self.asymmetric)

    def load(self, q: QuantizerParams) -> None:
        self.step.data = np.asarray(q.step, dtype=np.float64)
        if self.offset is not None:
            self.offset.data = np.asarray(q.offset, dtype=np.float64)
        self.initialized = True

    def calibrate(self, samples: np.ndarray) -> None:
        if self.enabled:
            self.load(init_step_from_calibration(samples, self.params()))

    def learnable(self) -> list[Tensor]:
        if not self.enabled:
            return []
        return [self.step] if self.offset is None else [self.step, self.offset]

    def clamp_(self) -> None:
        if self.step.data < STEP_FLOOR:
            self.step.data = np.asarray(STEP_FLOOR)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        if not self.initialized:
            self.calibrate(x.data)
        return fake_quantize(x, self.step, self.bits, self.offset, self.kind)

    def __repr__(self) -> str:
        return f"Quantizer(bits={self.bits}, kind={self.kind}, step={self.step.item():.4g})"


def attach_quantizers(model, b_w: int, b_a: int, asymmetric_act: bool = False):
    """Attach weight and input-activation quantizers to every conv except the first and last.

    Weight quantizers are initialized from the weights immediately;
    activation quantizers initialize lazily from the first batch they see.
    """
    for b in (b_w, b_a):
        if b != DISABLED_BITS:
            qrange(b)
    convs = model.conv_layers()
    for conv in convs[1:-1]:
        conv.weight_quant = Quantizer(b_w, "weight")
        conv.weight_quant.calibrate(conv.weight.data)
        conv.act_quant = Quantizer(b_a, "activation", asymmetric=asymmetric_act)
    return model
