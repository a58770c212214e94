"""Zero-shot quantization for a small grid object detector.

A frozen full-precision detector is inverted into a labelled calibration set,
and a fake-quantized student is trained on it by distillation.
"""

__version__ = "0.1.0"
