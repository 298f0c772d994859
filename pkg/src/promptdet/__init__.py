"""Desk-scale document layout detection with frozen text-prompt conditioning."""

from promptdet.tensor import Tensor, Tape, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "finite_diff_check", "__version__"]
