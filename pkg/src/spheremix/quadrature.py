"""Small quadrature helpers shared by several modules."""

from __future__ import annotations

import numpy as np

__all__ = ["gauss_legendre_01", "GL64_NODES", "GL64_WEIGHTS"]


def gauss_legendre_01(n: int):
    """Gauss-Legendre nodes and weights transplanted to [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# The default rule used for moment residuals and basis orthonormality checks.
GL64_NODES, GL64_WEIGHTS = gauss_legendre_01(64)
