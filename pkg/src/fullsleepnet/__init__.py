"""Full-night single-channel EEG segmentation: arousal and sleep-stage masks.

A self-contained research package: numpy autodiff core, the four network
building blocks, multi-task training, a synthetic PSG generator, metrics and
a CLI. See README.md for usage.
"""

from .tensor import Tensor, Tape, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "grad_check", "__version__"]
