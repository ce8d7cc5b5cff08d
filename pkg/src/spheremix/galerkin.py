"""Sine-basis truncation of the forced Schrodinger equation on (0, 1).

Basis functions e_j(x) = sqrt(2) sin(j pi x) with Dirichlet conditions; the
free part is exactly diagonal with eigenvalues (j pi)^2, the drive couples
through the multiplication operator by a polynomial potential V, and the
nonlinearity is the projected power |z(x)|^sigma z(x) evaluated by midpoint
collocation on a uniform interior grid.

Matrix elements of V are Gauss-Legendre integrals with a node count scaled to
the integrand degree, so the usual anchor values (e.g. <x^2 e_1, e_1> =
1/3 - 1/(2 pi^2)) are reproduced to near machine precision.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .core import Nonlinearity, SystemSpec, check_condition2, Condition2Report
from .errors import ConfigError
from .quadrature import gauss_legendre_01

__all__ = [
    "PolynomialPotential",
    "build",
    "condition_check",
    "matrix_element",
    "nonlinearity_eval",
    "power_nonlinearity",
    "system_b",
]

DEFAULT_GRID = 512


@dataclass(frozen=True)
class PolynomialPotential:
    """Real polynomial potential, coefficients in ascending degree order."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.ndim != 1 or c.shape[0] < 3:
            raise ConfigError("potential needs coefficients up to degree >= 2")
        if not np.all(np.isfinite(c)):
            raise ConfigError("potential coefficients must be finite")
        object.__setattr__(self, "coefficients", c)

    @property
    def degree(self) -> int:
        return self.coefficients.shape[0] - 1

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, float), self.coefficients)

    @classmethod
    def from_string(cls, text: str) -> "PolynomialPotential":
        """Parse expressions like "x^2", "1 + 0.5*x^3 - x", "2x**2"."""
        cleaned = text.replace(" ", "").replace("**", "^").replace("*", "")
        if not cleaned:
            raise ConfigError("empty potential expression")
        term_re = re.compile(r"([+-]?[^+-]+)")
        coeffs: dict[int, float] = {}
        pos = 0
        for match in term_re.finditer(cleaned):
            term = match.group(1)
            pos = match.end()
            m = re.fullmatch(r"([+-]?\d*\.?\d*(?:[eE][+-]?\d+)?)(x(?:\^(\d+))?)?", term)
            if m is None or (not m.group(1) and not m.group(2)):
                raise ConfigError(f"cannot parse potential term {term!r}")
            coef_text, has_x, power_text = m.group(1), m.group(2), m.group(3)
            if coef_text in ("", "+", "-"):
                coef = 1.0 if coef_text != "-" else -1.0
                if not has_x:
                    raise ConfigError(f"cannot parse potential term {term!r}")
            else:
                coef = float(coef_text)
            power = 0 if not has_x else (1 if power_text is None else int(power_text))
            coeffs[power] = coeffs.get(power, 0.0) + coef
        if pos != len(cleaned):
            raise ConfigError(f"trailing characters in potential: {cleaned[pos:]!r}")
        degree = max(max(coeffs), 2)
        out = np.zeros(degree + 1)
        for p, c in coeffs.items():
            out[p] = c
        return cls(out)

    def shifted(self, constant: float) -> "PolynomialPotential":
        c = self.coefficients.copy()
        c[0] += constant
        return PolynomialPotential(c)


def matrix_element(potential: PolynomialPotential, i: int, j: int,
                   nodes: int | None = None) -> float:
    """<V e_i, e_j> over (0, 1) by Gauss-Legendre quadrature.

    The default node count 4 * (degree + i + j) (with a small floor) is far
    past the polynomial-times-trig accuracy knee for the sizes used here.
    """
    if i < 1 or j < 1:
        raise ConfigError("basis indices are 1-based and positive")
    if nodes is None:
        nodes = max(16, 4 * (potential.degree + i + j))
    x, w = gauss_legendre_01(nodes)
    vals = potential(x) * 2.0 * np.sin(i * np.pi * x) * np.sin(j * np.pi * x)
    return float(np.dot(w, vals))


def power_nonlinearity(n: int, sigma: float = 2.0, grid: int = DEFAULT_GRID) -> Nonlinearity:
    """Collocation data for the projected power nonlinearity on n modes."""
    if grid < 2 * n:
        raise ConfigError("collocation grid too coarse for the mode count")
    x = (np.arange(grid) + 0.5) / grid   # uniform interior midpoints
    synth = np.sqrt(2.0) * np.sin(np.pi * np.outer(x, np.arange(1, n + 1)))
    weights = np.full(grid, 1.0 / grid)
    return Nonlinearity(kind="galerkin_power", sigma=float(sigma), synth=synth,
                        weights=weights)


def nonlinearity_eval(nl: Nonlinearity, z: np.ndarray) -> np.ndarray:
    """Evaluate a nonlinearity on a coefficient vector (convenience wrapper)."""
    return nl.apply(z)


def build(potential: PolynomialPotential, n: int, sigma: float = 2.0,
          epsilon: float = 0.0, grid: int = DEFAULT_GRID) -> SystemSpec:
    """Assemble the n-mode truncated system for a polynomial potential."""
    if n < 2:
        raise ConfigError("need at least two modes")
    lam = np.diag((np.arange(1, n + 1) * np.pi) ** 2).astype(complex)
    b = np.empty((n, n))
    for i in range(1, n + 1):
        for j in range(i, n + 1):
            val = matrix_element(potential, i, j)
            b[i - 1, j - 1] = val
            b[j - 1, i - 1] = val
    return SystemSpec(lam, b.astype(complex), float(epsilon),
                      power_nonlinearity(n, sigma, grid))


def condition_check(potential: PolynomialPotential, n: int,
                    tol_gap: float = 1e-8,
                    tol_coupling: float = 1e-10) -> Condition2Report:
    """Non-degeneracy report for the truncated system of a potential."""
    return check_condition2(build(potential, n), tol_gap, tol_coupling)


def system_b(epsilon: float = 0.0) -> SystemSpec:
    """Three-mode truncation with V = x^2 (the second canonical fixture)."""
    return build(PolynomialPotential([0.0, 0.0, 1.0]), n=3, sigma=2.0, epsilon=epsilon)
