"""Minimal reverse-mode array engine (float64, CPU)."""

from .array import Array, Tape, as_array, backward, grad_enabled, no_grad, stop_grad
from .eig import DegenerateSpectrumWarning, eigvals_sym, jacobi_eigh
from .kernels import BACKEND
from . import ops

__all__ = [
    "Array", "Tape", "as_array", "backward", "grad_enabled", "no_grad",
    "stop_grad", "eigvals_sym", "jacobi_eigh", "DegenerateSpectrumWarning",
    "BACKEND", "ops",
]
