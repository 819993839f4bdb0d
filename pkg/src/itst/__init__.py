"""Inverse triple-aspect self-attention transformer for EDFA fault diagnosis.

The package covers the full pipeline: a small float64 autograd core
(:mod:`itst.tensor`), signal preprocessing (:mod:`itst.features`), a
synthetic condition-monitoring data generator (:mod:`itst.synth`), the
triple-path encoder / statistic-token decoder model (:mod:`itst.model`),
training and experiment harnesses (:mod:`itst.training`), binary tensor
and checkpoint I/O (:mod:`itst.tensorfile`), and a command line front end
(:mod:`itst.cli`).
"""

from .errors import LabelError, ShapeError, UsageError
from .rng import named_stream

__all__ = ["LabelError", "ShapeError", "UsageError", "named_stream"]
