"""Symmetric eigenvalues with analytic reverse-mode gradients.

Forward: cyclic Jacobi rotations (matrices here stay small, at most batch
size). Backward: d(lambda_i) = v_i^T dG v_i with v_i the computed unit
eigenvectors. When the spectrum has a gap below GAP_TOL the eigenvectors are
not unique; gradients are still emitted from the computed basis (valid
subgradients for any function of the eigenvalues alone) and a
DegenerateSpectrumWarning is raised.
"""

from __future__ import annotations

import warnings

import numpy as np

from ..errors import EngineError, NumericError
from . import kernels
from .array import Array, as_array, make_output

SYM_TOL = 1e-8
GAP_TOL = 1e-8


class DegenerateSpectrumWarning(RuntimeWarning):
    """Raised when eigenvalue gradients are taken at a (near-)repeated spectrum."""


def jacobi_eigh(g: np.ndarray):
    """Eigenvalues (ascending) and matching eigenvector columns of symmetric g."""
    a = np.array(g, dtype=np.float64, order="C")
    n = a.shape[0]
    v = np.eye(n, dtype=np.float64)
    converged = kernels.jacobi_sweeps(a, v)
    if converged != 1.0:
        raise NumericError("eigvals_sym: Jacobi iteration failed to converge")
    evals = np.diag(a).copy()
    order = np.argsort(evals, kind="stable")
    return evals[order], v[:, order]


def eigvals_sym(g) -> Array:
    """Ascending eigenvalues of a symmetric matrix as a differentiable op."""
    g = as_array(g)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise EngineError(f"eigvals_sym: expected a square matrix, got {g.shape}")
    if not np.isfinite(g.data).all():
        raise EngineError("eigvals_sym: non-finite entries")
    if g.shape[0] > 0 and np.abs(g.data - g.data.T).max() > SYM_TOL:
        raise EngineError(f"eigvals_sym: matrix asymmetric beyond tolerance {SYM_TOL}")

    evals, evecs = jacobi_eigh(g.data)

    def vjp(gout):
        if len(evals) > 1 and np.min(np.diff(evals)) < GAP_TOL:
            warnings.warn(
                "eigenvalue gradients taken at a near-degenerate spectrum",
                DegenerateSpectrumWarning,
                stacklevel=2,
            )
        return ((evecs * gout[None, :]) @ evecs.T,)

    return make_output(evals, (g,), vjp, "eigvals_sym")
