"""Core state and operator types for the forced bilinear system.

The model throughout the package is

    i dz/dt = L z + beta(t) B z + eps * F(z),        z in C^n,

with ``L`` and ``B`` Hermitian and ``F`` a nonlinearity whose inner product
with the state is real, so the flow preserves the Euclidean norm and the unit
sphere is invariant.  States are plain complex numpy vectors; this module
holds the validation helpers, the spectral decomposition with a deterministic
phase convention, the non-degeneracy check on ``(L, B)``, and JSON round
tripping for system descriptions.

Inner product convention: ``inner(x, y) = sum_a x_a * conj(y_a)``, linear in
the first argument.  All couplings and feedback laws in the package are
written against this convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NonHermitianInput, ZeroVector

__all__ = [
    "Condition2Report",
    "Nonlinearity",
    "SpectralData",
    "SystemSpec",
    "assert_on_sphere",
    "check_condition2",
    "dist_to_circle",
    "eigendecompose",
    "fixture",
    "hermitian_defect",
    "inner",
    "require_hermitian",
    "sphere_renormalize",
    "system_a",
    "system_from_json",
    "system_to_json",
]

ON_SPHERE_TOL = 1e-12
HERMITIAN_TOL = 1e-14
RENORM_FLOOR = 1e-300


def inner(x: np.ndarray, y: np.ndarray) -> complex:
    """Complex inner product, linear in the first argument."""
    return complex(np.vdot(y, x))


def hermitian_defect(h: np.ndarray) -> float:
    """Largest entrywise deviation from conjugate symmetry."""
    h = np.asarray(h)
    return float(np.abs(h - h.conj().T).max())


def require_hermitian(h: np.ndarray, tol: float = HERMITIAN_TOL) -> np.ndarray:
    """Validate conjugate symmetry and return the matrix as complex128.

    The tolerance is scaled by the largest entry so that systems with large
    eigenvalues (e.g. sine-basis Laplacians) are not rejected for rounding
    noise.
    """
    h = np.ascontiguousarray(h, dtype=np.complex128)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise NonHermitianInput(f"expected a square matrix, got shape {h.shape}")
    scale = max(1.0, float(np.abs(h).max()))
    defect = hermitian_defect(h)
    if defect > tol * scale:
        raise NonHermitianInput(
            f"conjugate-symmetry defect {defect:.3e} exceeds {tol * scale:.3e}"
        )
    return h


def assert_on_sphere(z: np.ndarray, tol: float = ON_SPHERE_TOL) -> np.ndarray:
    z = np.ascontiguousarray(z, dtype=np.complex128)
    nrm = float(np.linalg.norm(z))
    if abs(nrm - 1.0) > tol:
        raise ValueError(f"state norm {nrm!r} is not within {tol} of 1")
    return z


def sphere_renormalize(z: np.ndarray) -> np.ndarray:
    """Project a vector back onto the unit sphere."""
    z = np.asarray(z, dtype=np.complex128)
    nrm = float(np.linalg.norm(z))
    if nrm <= RENORM_FLOOR:
        raise ZeroVector("cannot renormalize a (near-)zero vector")
    return z / nrm


def dist_to_circle(z: np.ndarray, e1: np.ndarray) -> float:
    """Distance from a unit vector to the circle {exp(i t) * e1}.

    For unit ``z`` and ``e1`` the minimum over the phase is attained in closed
    form: dist^2 = 2 - 2 |<z, e1>|.  The value is phase invariant in both
    arguments.
    """
    ov = abs(inner(z, e1))
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * ov)))


# --------------------------------------------------------------------------
# spectral data


@dataclass(frozen=True)
class SpectralData:
    """Eigendecomposition of a Hermitian matrix with fixed vector phases.

    ``eigenvalues`` ascending; ``eigenvectors[:, k]`` is the unit eigenvector
    of ``eigenvalues[k]`` normalized so that its largest-modulus entry is real
    and positive (ties broken by lowest index).  The convention makes the
    decomposition reproducible across runs, which matters because steering
    targets are phrased relative to the first eigenvector.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    def ground_state(self) -> np.ndarray:
        return self.eigenvectors[:, 0].copy()

    def gaps(self) -> np.ndarray:
        return np.diff(self.eigenvalues)

    def unitary_at(self, t: float) -> np.ndarray:
        """exp(-i t H) assembled from the decomposition."""
        v = self.eigenvectors
        return (v * np.exp(-1j * t * self.eigenvalues)) @ v.conj().T


def eigendecompose(h: np.ndarray, tol: float = HERMITIAN_TOL) -> SpectralData:
    """Hermitian eigendecomposition with the package phase convention."""
    h = require_hermitian(h, tol)
    w, v = np.linalg.eigh(h)
    v = np.ascontiguousarray(v)
    for k in range(v.shape[1]):
        col = v[:, k]
        idx = int(np.argmax(np.abs(col)))  # first maximum wins ties
        pivot = col[idx]
        col *= pivot.conjugate() / abs(pivot)
    return SpectralData(eigenvalues=w, eigenvectors=v)


# --------------------------------------------------------------------------
# nonlinearity and system spec


@dataclass(frozen=True)
class Nonlinearity:
    """Norm-compatible nonlinearity F with Im <F(z), z> = 0.

    kind "none" is F = 0.  kind "galerkin_power" is the sine-basis collocation
    of |z(x)|^sigma z(x): ``synth`` holds basis values on the quadrature grid,
    ``weights`` the quadrature weights.  kind "custom" wraps a user callable
    and is excluded from the compiled propagation kernels.
    """

    kind: str = "none"
    sigma: float = 2.0
    synth: Optional[np.ndarray] = None      # (grid, n) real basis values
    weights: Optional[np.ndarray] = None    # (grid,) quadrature weights
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in ("none", "galerkin_power", "custom"):
            raise ConfigError(f"unknown nonlinearity kind {self.kind!r}")
        if self.kind == "galerkin_power" and (self.synth is None or self.weights is None):
            raise ConfigError("galerkin_power requires synth and weights arrays")
        if self.kind == "custom" and self.fn is None:
            raise ConfigError("custom nonlinearity requires a callable")

    def apply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.complex128)
        if self.kind == "none":
            return np.zeros_like(z)
        if self.kind == "custom":
            return np.asarray(self.fn(z), dtype=np.complex128)
        psi = self.synth @ z
        dens = np.abs(psi) ** self.sigma
        return (self.weights * dens * psi) @ self.synth


@dataclass(frozen=True)
class SystemSpec:
    """Finite-dimensional forced system (L, B, eps, F)."""

    lam: np.ndarray
    b: np.ndarray
    epsilon: float = 0.0
    nonlinearity: Nonlinearity = field(default_factory=Nonlinearity)

    def __post_init__(self):
        object.__setattr__(self, "lam", require_hermitian(self.lam))
        object.__setattr__(self, "b", require_hermitian(self.b))
        if self.lam.shape != self.b.shape:
            raise ConfigError("L and B must have the same shape")
        if self.n < 2:
            raise ConfigError("system dimension must be at least 2")

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    def f(self, z: np.ndarray) -> np.ndarray:
        return self.nonlinearity.apply(z)

    def spectral(self) -> SpectralData:
        return eigendecompose(self.lam)

    def with_epsilon(self, epsilon: float) -> "SystemSpec":
        return SystemSpec(self.lam, self.b, float(epsilon), self.nonlinearity)

    def transposed(self) -> "SystemSpec":
        """Entrywise-transposed system; equals self for real symmetric data.

        Conjugating a trajectory and reversing its drive yields a trajectory
        of the transposed system, which is what makes steering plans exactly
        reversible.  The nonlinearity is kept as-is: the reversal identity is
        used only at eps = 0.
        """
        return SystemSpec(
            self.lam.T.copy(), self.b.T.copy(), self.epsilon, self.nonlinearity
        )


# --------------------------------------------------------------------------
# non-degeneracy check


@dataclass(frozen=True)
class Condition2Report:
    passed: bool
    min_gap: float
    min_coupling: float
    couplings: np.ndarray       # |<B v1, v_j>| for each eigenvector v_j
    tol_gap: float
    tol_coupling: float
    reasons: tuple

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        msg = f"condition check: {status} (min gap {self.min_gap:.6g}, min coupling {self.min_coupling:.6g})"
        for r in self.reasons:
            msg += f"\n  - {r}"
        return msg


def check_condition2(
    spec: SystemSpec,
    tol_gap: float = 1e-8,
    tol_coupling: float = 1e-10,
) -> Condition2Report:
    """Check the spectrum/coupling non-degeneracy needed for steering.

    Passes iff the eigenvalues of L are pairwise distinct (minimum gap at
    least ``tol_gap``) and the first eigenvector couples to every eigenvector
    through B (min_j |<B v1, v_j>| at least ``tol_coupling``).  Both
    quantities are invariant under unitary conjugation of (L, B).
    """
    sd = spec.spectral()
    gaps = sd.gaps()
    min_gap = float(gaps.min()) if gaps.size else np.inf
    bv1 = spec.b @ sd.ground_state()
    couplings = np.abs(sd.eigenvectors.conj().T @ bv1)
    min_coupling = float(couplings.min())
    reasons = []
    if min_gap < tol_gap:
        reasons.append(f"eigenvalue gap {min_gap:.3e} below {tol_gap:.3e}")
    if min_coupling < tol_coupling:
        j = int(np.argmin(couplings))
        reasons.append(
            f"coupling |<B v1, v{j + 1}>| = {couplings[j]:.3e} below {tol_coupling:.3e}"
        )
    return Condition2Report(
        passed=not reasons,
        min_gap=min_gap,
        min_coupling=min_coupling,
        couplings=couplings,
        tol_gap=tol_gap,
        tol_coupling=tol_coupling,
        reasons=tuple(reasons),
    )


# --------------------------------------------------------------------------
# JSON round trip

_SCHEMA_KEYS = {"n", "lambda", "b", "epsilon", "nonlinearity"}


def _mat_to_pairs(h: np.ndarray) -> list:
    return [[float(v.real), float(v.imag)] for v in np.asarray(h).ravel(order="C")]


def _mat_from_pairs(pairs, n: int) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    if arr.shape != (n * n, 2):
        raise ConfigError(f"expected {n * n} [re, im] pairs, got shape {arr.shape}")
    return (arr[:, 0] + 1j * arr[:, 1]).reshape(n, n)


def system_to_json(spec: SystemSpec) -> dict:
    nl = spec.nonlinearity
    if nl.kind == "custom":
        raise ConfigError("custom nonlinearities are not serializable")
    return {
        "n": spec.n,
        "lambda": _mat_to_pairs(spec.lam),
        "b": _mat_to_pairs(spec.b),
        "epsilon": float(spec.epsilon),
        "nonlinearity": {"kind": nl.kind, "sigma": float(nl.sigma)},
    }


def system_from_json(payload) -> SystemSpec:
    if isinstance(payload, str):
        payload = json.loads(payload)
    unknown = set(payload) - _SCHEMA_KEYS
    if unknown:
        raise ConfigError(f"unknown system keys: {sorted(unknown)}")
    missing = _SCHEMA_KEYS - set(payload)
    if missing:
        raise ConfigError(f"missing system keys: {sorted(missing)}")
    n = int(payload["n"])
    lam = _mat_from_pairs(payload["lambda"], n)
    b = _mat_from_pairs(payload["b"], n)
    nl_payload = payload["nonlinearity"]
    unknown = set(nl_payload) - {"kind", "sigma"}
    if unknown:
        raise ConfigError(f"unknown nonlinearity keys: {sorted(unknown)}")
    kind = nl_payload["kind"]
    sigma = float(nl_payload.get("sigma", 2.0))
    if kind == "none":
        nl = Nonlinearity()
    elif kind == "galerkin_power":
        from .galerkin import power_nonlinearity  # deferred: galerkin imports core

        nl = power_nonlinearity(n, sigma)
    else:
        raise ConfigError(f"unknown nonlinearity kind {kind!r}")
    return SystemSpec(lam, b, float(payload["epsilon"]), nl)


# --------------------------------------------------------------------------
# fixtures


def system_a() -> SystemSpec:
    """Two-level demo system: L = diag(1, 2), B all ones, eps = 0."""
    return SystemSpec(np.diag([1.0, 2.0]).astype(complex), np.ones((2, 2), dtype=complex))


def fixture(name: str) -> SystemSpec:
    if name == "SYS-A":
        return system_a()
    if name == "SYS-B":
        from .galerkin import system_b

        return system_b()
    raise ConfigError(f"unknown fixture {name!r} (expected 'SYS-A' or 'SYS-B')")
