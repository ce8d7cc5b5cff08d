"""Propagation of the forced system and the one-step Markov chain.

The integrator is a Strang splitting over substeps of length h: half a step
of dz/dt = -i eps F(z) (explicit midpoint projected back to the invariant
norm), the exact unitary exp(-i h (L + u_mid B)) with the drive frozen at the
substep midpoint, and half a nonlinear step again.  The norm is renormalized
after every substep and the largest pre-renormalization drift is recorded;
exceeding the configured tolerance is an error, not a warning.

Freezing the drive at midpoints has a useful side effect: reading a drive
u(T - t) visits exactly the same sample values in reverse order, so the
conjugate-and-reverse replay identity used by the steering module holds at
the discrete level, not only for the continuum flow.

The Markov chain studied by the ergodicity module is the unit-time map under
one fresh noise segment per step; :func:`step_markov` is that kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import _backend
from .core import SystemSpec, inner
from .errors import ConfigError, NormDriftExceeded, TangencyViolated
from .noise import NoiseModel, NoiseSegment, ensemble_xi, sample_segment, trig_basis_values
from .quadrature import gauss_legendre_01

__all__ = [
    "PropagatorConfig",
    "TrajectoryRecord",
    "linearized_flow",
    "propagate",
    "propagate_unit",
    "record_to_csv",
    "step_markov",
    "step_markov_batch",
    "step_markov_ensemble",
]

DriveLike = Union[None, np.ndarray, Callable, "object"]


@dataclass(frozen=True)
class PropagatorConfig:
    substeps_per_unit: int = 256       # drive sampling and splitting resolution
    norm_drift_tolerance: float = 1e-9
    record_stride: int = 0             # substeps between records, 0 = endpoints only
    renormalize: bool = True           # sphere guard; disable for linearity checks

    def __post_init__(self):
        if self.substeps_per_unit < 16:
            raise ConfigError("substeps_per_unit must be at least 16")
        if self.record_stride < 0:
            raise ConfigError("record_stride must be nonnegative")
        if self.norm_drift_tolerance <= 0:
            raise ConfigError("norm_drift_tolerance must be positive")


DEFAULT_CONFIG = PropagatorConfig()


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray          # (R,)
    states: np.ndarray         # (R, n)
    drifts: np.ndarray         # (R,) running max norm drift
    max_norm_drift: float
    drive_label: str = ""

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


def _drive_samples(drive: DriveLike, times: np.ndarray) -> np.ndarray:
    if drive is None:
        return np.zeros(times.shape[0])
    if isinstance(drive, np.ndarray):
        if drive.shape != times.shape:
            raise ConfigError(
                f"drive sample array has shape {drive.shape}, expected {times.shape}"
            )
        return np.asarray(drive, dtype=float)
    if hasattr(drive, "evaluate"):
        return np.asarray(drive.evaluate(times), dtype=float)
    try:
        vals = np.asarray(drive(times), dtype=float)
        if vals.shape == times.shape:
            return vals
    except Exception:
        pass
    return np.array([float(drive(t)) for t in times])


def _substep_grid(t_total: float, config: PropagatorConfig):
    nsub = max(1, int(round(t_total * config.substeps_per_unit)))
    h = t_total / nsub
    mids = (np.arange(nsub) + 0.5) * h
    return nsub, h, mids


def _kernel_args(spec: SystemSpec):
    nl = spec.nonlinearity
    if nl.kind == "galerkin_power":
        return nl.synth, nl.weights, nl.sigma
    return None, None, 2.0


def _propagate_custom(spec, z, drive_vals, h, config):
    """Fallback loop for user-supplied nonlinearities (not kernel friendly)."""
    nl = spec.nonlinearity
    tau = 0.5 * h
    ref = 1.0 if config.renormalize else float(np.linalg.norm(z))
    drift = 0.0

    def half(zv):
        nrm0 = np.linalg.norm(zv)
        k1 = (-1j * spec.epsilon) * nl.apply(zv)
        zm = zv + (0.5 * tau) * k1
        z1 = zv + tau * ((-1j * spec.epsilon) * nl.apply(zm))
        if config.renormalize:
            z1 *= nrm0 / np.linalg.norm(z1)
        return z1

    for m in range(drive_vals.shape[0]):
        if spec.epsilon != 0.0:
            z = half(z)
        z = _backend._np_unitary_step(spec.lam, spec.b, z[None, :], np.array([drive_vals[m]]), h)[0]
        if spec.epsilon != 0.0:
            z = half(z)
        nrm = float(np.linalg.norm(z))
        drift = max(drift, abs(nrm / ref - 1.0))
        if config.renormalize:
            z = z / nrm
    return z, drift


def propagate(
    spec: SystemSpec,
    z0: np.ndarray,
    drive: DriveLike,
    t_total: float,
    config: PropagatorConfig = DEFAULT_CONFIG,
    drive_label: str = "",
) -> TrajectoryRecord:
    """Integrate from t = 0 to t_total under a scalar drive.

    ``drive`` may be None (free flow), a callable of time, an object with a
    vectorized ``evaluate`` method, or a precomputed array of midpoint
    samples.  Raises :class:`NormDriftExceeded` when the guard trips.
    """
    if t_total <= 0:
        raise ConfigError("t_total must be positive")
    z = np.ascontiguousarray(z0, dtype=np.complex128)
    if z.ndim != 1 or z.shape[0] != spec.n:
        raise ConfigError(f"state has shape {z.shape}, expected ({spec.n},)")
    nsub, h, mids = _substep_grid(t_total, config)
    drive_vals = _drive_samples(drive, mids)

    custom = spec.nonlinearity.kind == "custom" and spec.epsilon != 0.0
    synth, weights, sigma = _kernel_args(spec)

    stride = config.record_stride if config.record_stride > 0 else nsub
    breaks = list(range(stride, nsub, stride)) + [nsub]
    rec_times = [0.0]
    rec_states = [z.copy()]
    rec_drifts = [0.0]
    max_drift = 0.0
    start = 0
    for stop in breaks:
        chunk = drive_vals[start:stop]
        if custom:
            z, drift = _propagate_custom(spec, z, chunk, h, config)
        else:
            zb, db = _backend.propagate_batch(
                spec.lam, spec.b, z[None, :], chunk[None, :], h, spec.epsilon,
                synth, weights, sigma, config.renormalize,
            )
            z, drift = zb[0], float(db[0])
        max_drift = max(max_drift, drift)
        rec_times.append(stop * h)
        rec_states.append(z.copy())
        rec_drifts.append(max_drift)
        start = stop
    if max_drift > config.norm_drift_tolerance:
        raise NormDriftExceeded(
            f"norm drift {max_drift:.3e} exceeds {config.norm_drift_tolerance:.3e}"
        )
    return TrajectoryRecord(
        times=np.asarray(rec_times),
        states=np.asarray(rec_states),
        drifts=np.asarray(rec_drifts),
        max_norm_drift=max_drift,
        drive_label=drive_label,
    )


def segment_drive_values(model: NoiseModel, segment: NoiseSegment, mids: np.ndarray) -> np.ndarray:
    return (model.b * segment.xi) @ trig_basis_values(model.J, mids)


def propagate_unit(
    spec: SystemSpec,
    z0: np.ndarray,
    segment: NoiseSegment,
    model: NoiseModel,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Endpoint of one unit interval driven by a noise segment."""
    nsub, h, mids = _substep_grid(1.0, config)
    drive_vals = segment_drive_values(model, segment, mids)
    rec = propagate(spec, z0, drive_vals, 1.0, config, drive_label="noise-segment")
    return rec.endpoint


def step_markov(
    spec: SystemSpec,
    z: np.ndarray,
    model: NoiseModel,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """One step of the unit-time Markov chain: fresh segment, then propagate."""
    return propagate_unit(spec, z, sample_segment(model, rng), model, config)


def _advance_batch(spec, z, drive, h, config):
    """One unit interval for (N, n) states under precomputed drive rows."""
    synth, weights, sigma = _kernel_args(spec)
    if spec.nonlinearity.kind == "custom" and spec.epsilon != 0.0:
        out = np.empty_like(z)
        for i in range(z.shape[0]):
            out[i], drift = _propagate_custom(spec, z[i], drive[i], h, config)
            if drift > config.norm_drift_tolerance:
                raise NormDriftExceeded(f"trajectory {i}: drift {drift:.3e}")
        return out
    z1, drift = _backend.propagate_batch(
        spec.lam, spec.b, z, drive, h, spec.epsilon, synth, weights, sigma,
        config.renormalize,
    )
    worst = float(drift.max())
    if worst > config.norm_drift_tolerance:
        raise NormDriftExceeded(f"worst ensemble drift {worst:.3e}")
    return z1


def step_markov_batch(
    spec: SystemSpec,
    z: np.ndarray,
    model: NoiseModel,
    master_seed: int,
    step: int,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Advance (N, n) states one Markov step with schedule-independent seeds.

    Trajectory i consumes the coefficients derived from (master_seed, step, i);
    see :mod:`spheremix.noise`.
    """
    z = np.ascontiguousarray(z, dtype=np.complex128)
    nsub, h, mids = _substep_grid(1.0, config)
    xi = ensemble_xi(model, master_seed, step, z.shape[0])
    drive = (model.b * xi) @ trig_basis_values(model.J, mids)
    return _advance_batch(spec, z, drive, h, config)


def step_markov_ensemble(
    spec: SystemSpec,
    z: np.ndarray,
    model: NoiseModel,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Advance (N, n) states one Markov step, coefficients drawn from ``rng``.

    Companion to :func:`step_markov_batch` for callers that manage a single
    generator; rows here do depend on the batch size and draw order, so
    reproducibility is per-run rather than per-trajectory.
    """
    z = np.ascontiguousarray(z, dtype=np.complex128)
    nsub, h, mids = _substep_grid(1.0, config)
    xi = model.draw_xi(rng, size=z.shape[0])
    drive = (model.b * xi) @ trig_basis_values(model.J, mids)
    return _advance_batch(spec, z, drive, h, config)


def linearized_flow(
    spec: SystemSpec,
    y0: np.ndarray,
    drive: DriveLike,
    quad_nodes: int = 64,
    tangency_tol: float = 1e-10,
) -> np.ndarray:
    """Unit-time flow of the linearization around the free first eigenstate.

    Propagates a tangent vector at the first eigenvector v1: free rotation of
    y0 plus the Duhamel response of the drive through B acting on the rotating
    v1.  The drive integral is evaluated by Gauss-Legendre quadrature.
    """
    sd = spec.spectral()
    v = sd.eigenvectors
    lam1 = sd.eigenvalues[0]
    e1 = sd.ground_state()
    y0 = np.asarray(y0, dtype=np.complex128)
    if abs(inner(y0, e1).real) > tangency_tol:
        raise TangencyViolated(
            f"Re <y0, v1> = {inner(y0, e1).real:.3e} exceeds {tangency_tol:.3e}"
        )
    nodes, weights = gauss_legendre_01(quad_nodes)
    wvals = _drive_samples(drive, nodes)
    # coefficients of B v1 in the eigenbasis; phases e^{-i lam_j (1-s)}
    a = v.conj().T @ (spec.b @ e1)
    phases = np.exp(-1j * np.outer(1.0 - nodes, sd.eigenvalues))  # (Q, n)
    kernel = np.exp(-1j * lam1 * nodes) * wvals * weights
    integral = (kernel[:, None] * phases).sum(axis=0) * a
    free = np.exp(-1j * sd.eigenvalues) * (v.conj().T @ y0)
    return v @ (free - 1j * integral)


def record_to_csv(rec: TrajectoryRecord, fh) -> None:
    """Dump a trajectory as t, re/im of each component, running norm drift."""
    n = rec.states.shape[1]
    header = ["t"]
    for j in range(1, n + 1):
        header += [f"re_z{j}", f"im_z{j}"]
    header.append("norm_drift")
    fh.write(",".join(header) + "\n")
    for t, state, drift in zip(rec.times, rec.states, rec.drifts):
        row = [repr(float(t))]
        for val in state:
            row += [repr(float(val.real)), repr(float(val.imag))]
        row.append(repr(float(drift)))
        fh.write(",".join(row) + "\n")
