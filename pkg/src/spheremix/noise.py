"""Random drive model: i.i.d. unit-interval segments on a trig basis.

The scalar drive acting through B is a piecewise process: on each unit
interval ``[k, k+1)`` it is an independent copy of

    eta(t) = sum_j b_j xi_j g_j(t),      t in [0, 1),

where {g_j} is an orthonormal basis of L2([0, 1]) (here the constant plus
cosine/sine pairs), the b_j are fixed nonnegative amplitudes and the xi_j are
i.i.d. scalar variables with unit second moment and a density that is
continuous and positive at the origin.  Steering results need the first N
amplitudes nonzero; the default spectrum b_j = j**-2 keeps all of them alive
while suppressing high frequencies.

Seed derivation.  Ensemble work derives the coefficients of trajectory ``i``
at step ``k`` from ``(master_seed, k, i)`` only: a child stream is spawned per
step via ``SeedSequence(master_seed, spawn_key=(k,))`` and filled row-major,
so row ``i`` never depends on the ensemble size or on scheduling order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, OutOfDomain, PathExhausted
from .quadrature import GL64_NODES, GL64_WEIGHTS

__all__ = [
    "NoiseModel",
    "NoiseSegment",
    "basis_orthonormality_defect",
    "beta_eval",
    "default_amplitudes",
    "ensemble_xi",
    "evaluate",
    "model_from_json",
    "model_to_json",
    "path_from_csv",
    "path_to_csv",
    "sample_segment",
    "segment_xi",
    "step_rng",
    "trig_basis_values",
]

_DISTRIBUTIONS = ("standard_normal", "uniform_sym")
_UNIFORM_HALF_WIDTH = np.sqrt(3.0)  # unit second moment on [-a, a]


def trig_basis_values(J: int, t) -> np.ndarray:
    """Values of the first J basis functions at times t, shape (J,) + t.shape.

    g_1 = 1, g_{2m} = sqrt(2) cos(2 pi m t), g_{2m+1} = sqrt(2) sin(2 pi m t).
    """
    t = np.asarray(t, dtype=float)
    out = np.empty((J,) + t.shape)
    if J == 0:
        return out
    out[0] = 1.0
    root2 = np.sqrt(2.0)
    for j in range(2, J + 1):
        arg = 2.0 * np.pi * (j // 2) * t
        out[j - 1] = root2 * (np.cos(arg) if j % 2 == 0 else np.sin(arg))
    return out


def basis_orthonormality_defect(J: int) -> float:
    """Max |<g_i, g_j> - delta_ij| under the 64-node Gauss-Legendre rule."""
    g = trig_basis_values(J, GL64_NODES)
    gram = (g * GL64_WEIGHTS) @ g.T
    return float(np.abs(gram - np.eye(J)).max())


def default_amplitudes(J: int) -> np.ndarray:
    return np.arange(1, J + 1, dtype=float) ** -2.0


@dataclass(frozen=True)
class NoiseModel:
    """Amplitudes, coefficient law and basis label for the drive."""

    J: int = 8
    b: np.ndarray = None  # defaults to j**-2
    dist: str = "standard_normal"
    basis: str = "trig"

    def __post_init__(self):
        if self.J < 0:
            raise ConfigError("J must be nonnegative")
        b = default_amplitudes(self.J) if self.b is None else np.asarray(self.b, float)
        if b.shape != (self.J,):
            raise ConfigError(f"expected {self.J} amplitudes, got shape {b.shape}")
        if not np.all(np.isfinite(b)) or np.any(b < 0):
            raise ConfigError("amplitudes must be finite and nonnegative")
        object.__setattr__(self, "b", b)
        if self.dist not in _DISTRIBUTIONS:
            raise ConfigError(f"dist must be one of {_DISTRIBUTIONS}")
        if self.basis != "trig":
            raise ConfigError("only the trig basis is implemented")

    def mean_square_norm(self) -> float:
        """E ||eta||_{L2}^2 = sum_j b_j^2 (unit second moment of xi)."""
        return float(np.sum(self.b**2))

    def supports_span(self, n_span: int) -> bool:
        """True iff the first n_span amplitudes are all nonzero."""
        return self.J >= n_span and bool(np.all(self.b[:n_span] > 0))

    def draw_xi(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.J,) if size is None else (size, self.J)
        if self.dist == "standard_normal":
            return rng.standard_normal(shape)
        return rng.uniform(-_UNIFORM_HALF_WIDTH, _UNIFORM_HALF_WIDTH, shape)


@dataclass(frozen=True)
class NoiseSegment:
    """Coefficients of one unit-interval drive realization."""

    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 1:
            raise ConfigError("xi must be a flat coefficient vector")
        object.__setattr__(self, "xi", xi)


def sample_segment(model: NoiseModel, rng: np.random.Generator) -> NoiseSegment:
    """One fresh segment; deterministic given the generator state."""
    return NoiseSegment(model.draw_xi(rng))


def evaluate(segment: NoiseSegment, model: NoiseModel, t) -> np.ndarray | float:
    """eta(t) for t in [0, 1] (scalar or array)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise OutOfDomain("segment time must lie in [0, 1]")
    if segment.xi.shape != (model.J,):
        raise ConfigError("segment size does not match the model")
    vals = (model.b * segment.xi) @ trig_basis_values(model.J, t_arr)
    return float(vals) if np.isscalar(t) or t_arr.ndim == 0 else vals


def beta_eval(path: Sequence[NoiseSegment], model: NoiseModel, t) -> np.ndarray | float:
    """Piecewise drive over consecutive unit intervals, right-continuous.

    Time t reads segment floor(t) at local time t - floor(t); integer times
    therefore read the start of the next segment.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0.0):
        raise OutOfDomain("path time must be nonnegative")
    k = np.floor(t_arr).astype(int)
    if np.any(k >= len(path)):
        raise PathExhausted(
            f"time {t_arr.max()} beyond the last stored segment ({len(path)} total)"
        )
    out = np.empty_like(t_arr)
    for seg_idx in np.unique(k):
        mask = k == seg_idx
        out[mask] = evaluate(path[seg_idx], model, t_arr[mask] - seg_idx)
    return float(out[0]) if np.isscalar(t) or np.asarray(t).ndim == 0 else out


# --------------------------------------------------------------------------
# seed derivation


def step_rng(master_seed: int, step: int) -> np.random.Generator:
    """Stream for one Markov step of a whole ensemble."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(step,)))


def ensemble_xi(model: NoiseModel, master_seed: int, step: int, count: int) -> np.ndarray:
    """(count, J) coefficients for step ``step``; row i depends only on
    (master_seed, step, i), never on ``count``."""
    return model.draw_xi(step_rng(master_seed, step), size=count)


def segment_xi(model: NoiseModel, master_seed: int, traj: int, step: int) -> NoiseSegment:
    """Segment of trajectory ``traj`` at step ``step`` under the ensemble
    derivation (row ``traj`` of the step stream)."""
    return NoiseSegment(ensemble_xi(model, master_seed, step, traj + 1)[traj])


# --------------------------------------------------------------------------
# serialization

_MODEL_KEYS = {"J", "b", "dist", "basis"}


def model_to_json(model: NoiseModel) -> dict:
    return {
        "J": model.J,
        "b": [float(v) for v in model.b],
        "dist": model.dist,
        "basis": model.basis,
    }


def model_from_json(payload: dict) -> NoiseModel:
    unknown = set(payload) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown noise keys: {sorted(unknown)}")
    return NoiseModel(
        J=int(payload.get("J", 8)),
        b=payload.get("b"),
        dist=payload.get("dist", "standard_normal"),
        basis=payload.get("basis", "trig"),
    )


def path_to_csv(path: Sequence[NoiseSegment], fh) -> None:
    """Rows (k, j, xi) with 1-based coefficient index j."""
    writer = csv.writer(fh)
    writer.writerow(["k", "j", "xi"])
    for k, seg in enumerate(path):
        for j, val in enumerate(seg.xi, start=1):
            writer.writerow([k, j, repr(float(val))])


def path_from_csv(fh) -> list[NoiseSegment]:
    reader = csv.reader(fh)
    header = next(reader)
    if header != ["k", "j", "xi"]:
        raise ConfigError(f"unexpected path CSV header: {header}")
    rows = [(int(k), int(j), float(x)) for k, j, x in reader]
    if not rows:
        return []
    n_seg = max(k for k, _, _ in rows) + 1
    J = max(j for _, j, _ in rows)
    xi = np.full((n_seg, J), np.nan)
    for k, j, x in rows:
        xi[k, j - 1] = x
    if np.any(np.isnan(xi)):
        raise ConfigError("path CSV has missing (k, j) entries")
    return [NoiseSegment(row) for row in xi]
