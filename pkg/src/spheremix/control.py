"""Steering constructions for the bilinear sphere system.

Everything here manipulates one ingredient: the scalar drive u(t) that
multiplies the coupling matrix B.  The linearization of the unit-time flow
around the ground-state trajectory turns steering into a trigonometric moment
problem over the resonant frequencies mu_k = lam_{k+1} - lam_1; solving it
gives local exact control, and a Lyapunov feedback plus free phase drift gives
global approach.  Concatenating approach, a one-unit Newton-chord bridge and a
conjugated, time-reversed approach yields exact steering between arbitrary
points of the sphere.

Plans built here are replayable artifacts: every stage stores the control in a
closed form whose evaluation at the integrator's substep midpoints reproduces
the construction bitwise (the default 256 substeps per unit make the grid
dyadic, so per-unit and per-stage grids coincide exactly).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .core import SpectralData, SystemSpec, dist_to_circle, inner, sphere_renormalize
from .dynamics import (
    DEFAULT_CONFIG,
    PropagatorConfig,
    _kernel_args,
    _substep_grid,
    propagate,
)
from .errors import (
    AlignmentExhausted,
    ApproachFailed,
    BridgeFailed,
    ConfigError,
    DegenerateCoupling,
    DegenerateSpectrum,
    IllConditioned,
    NoConvergence,
    OutOfDomain,
    OutsideBasin,
    StallDetected,
    TangencyViolated,
    Timeout,
)
from .noise import NoiseModel, sample_segment, trig_basis_values
from .quadrature import gauss_legendre_01

log = logging.getLogger(__name__)

FIRST_MOMENT_IMAG_TOL = 1e-12
COUPLING_TOL = 1e-10
CONDITION_LIMIT = 1e12
MOMENT_RESIDUAL_TOL = 1e-10
# Alignment ball used for the endpoints a one-unit bridge must join.  Unit-time
# exact steering saturates in the ground-phase direction once the relative
# phase of the pair exceeds roughly 0.014 for unit resonant frequencies, so
# both legs aim an order of magnitude inside that.
BRIDGE_ALIGN_DELTA = 0.004


# ---------------------------------------------------------------------------
# resonant space and moment problem


@dataclass(frozen=True)
class ResonantSpace:
    """Real span of {1, cos(mu_k t), sin(mu_k t)} for the spectral gaps mu_k.

    Members are parametrized by a real vector x of length 2n-1 laid out as
    [d_0, Re d_1, Im d_1, ..., Re d_{n-1}, Im d_{n-1}] for
    w(t) = sum_k d_k exp(i mu_k t) with d_{-k} = conj(d_k); such w is
    automatically real-valued.
    """

    n: int
    mu: np.ndarray  # nonnegative gap frequencies, mu[0] == 0

    @property
    def dim(self) -> int:
        return 2 * self.n - 1

    def evaluate(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ConfigError(f"coefficient vector must have length {self.dim}")
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, x[0])
        for k in range(1, self.n):
            p, q = x[2 * k - 1], x[2 * k]
            out = out + 2.0 * (p * np.cos(self.mu[k] * t) - q * np.sin(self.mu[k] * t))
        return out


def resonant_space(sd: SpectralData, tol_gap: float = 1e-8) -> ResonantSpace:
    """Gap frequencies mu_k = lam_{k+1} - lam_1; requires a simple spectrum."""
    lam = sd.eigenvalues
    if np.min(np.diff(lam)) <= tol_gap:
        raise DegenerateSpectrum(
            f"eigenvalue gap below {tol_gap}; resonant frequencies collide"
        )
    mu = lam - lam[0]
    return ResonantSpace(n=lam.size, mu=mu)


@dataclass(frozen=True)
class MomentProblem:
    """Targets c_k for the integrals int_0^1 exp(i mu_{k-1} s) w(s) ds."""

    targets: np.ndarray
    space: ResonantSpace

    def __post_init__(self):
        c = np.asarray(self.targets, dtype=complex)
        if c.shape != (self.space.n,):
            raise ConfigError("need one moment target per mode")
        if abs(c[0].imag) > FIRST_MOMENT_IMAG_TOL:
            raise ConfigError(
                "first moment target must be real (tangent data guarantees it)"
            )
        object.__setattr__(self, "targets", c)


def _phase_integral(omega: np.ndarray) -> np.ndarray:
    """int_0^1 exp(i omega s) ds, exact at omega = 0."""
    omega = np.asarray(omega, dtype=float)
    return np.exp(0.5j * omega) * np.sinc(omega / (2.0 * np.pi))


def _moment_matrix(space: ResonantSpace) -> np.ndarray:
    """Real (2n-1)x(2n-1) system mapping coefficient vectors to stacked moments."""
    n, mu = space.n, space.mu
    rows = np.empty((n, space.dim), dtype=complex)
    for k in range(n):
        a = mu[k]
        rows[k, 0] = _phase_integral(a)
        for j in range(1, n):
            plus = _phase_integral(a + mu[j])
            minus = _phase_integral(a - mu[j])
            rows[k, 2 * j - 1] = plus + minus
            rows[k, 2 * j] = 1j * (plus - minus)
    real_rows = [rows[0].real]
    for k in range(1, n):
        real_rows.append(rows[k].real)
        real_rows.append(rows[k].imag)
    return np.vstack(real_rows)


def _stack_targets(c: np.ndarray) -> np.ndarray:
    rhs = [c[0].real]
    for k in range(1, c.size):
        rhs.append(c[k].real)
        rhs.append(c[k].imag)
    return np.asarray(rhs)


def moment_residuals(space: ResonantSpace, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """|quadrature moment - target| per mode, on a frequency-adequate GL rule."""
    mu_max = float(space.mu[-1]) if space.n > 1 else 0.0
    nodes, weights = gauss_legendre_01(max(64, int(1.2 * mu_max) + 32))
    w_vals = space.evaluate(x, nodes)
    res = np.empty(space.n)
    for k in range(space.n):
        moment = np.sum(weights * np.exp(1j * space.mu[k] * nodes) * w_vals)
        res[k] = abs(moment - targets[k])
    return res


def moment_solve(
    problem: MomentProblem,
    cond_limit: float = CONDITION_LIMIT,
    residual_tol: float = MOMENT_RESIDUAL_TOL,
) -> np.ndarray:
    """Coefficient vector of the unique member of E_n matching the targets."""
    a = _moment_matrix(problem.space)
    cond = np.linalg.cond(a)
    if cond > cond_limit:
        raise IllConditioned(
            f"moment system condition number {cond:.3g} exceeds {cond_limit:.3g} "
            "(near-resonant frequencies)"
        )
    x = np.linalg.solve(a, _stack_targets(problem.targets))
    res = moment_residuals(problem.space, x, problem.targets)
    worst = float(np.max(res))
    if worst > residual_tol:
        raise IllConditioned(
            f"moment residual {worst:.3g} exceeds {residual_tol:.3g} after solve"
        )
    return x


# ---------------------------------------------------------------------------
# control signals and plans


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise control over [0, duration] in one of three closed forms.

    kind "zero": no drive.  kind "trig": one coefficient row per unit interval
    in the orthonormal basis g_1..g_m of the noise model.  kind "resonant": a
    single resonant-space member, constant layout over the whole duration.
    """

    kind: str
    duration: float
    rows: Optional[np.ndarray] = None       # trig: shape (units, m)
    coeffs: Optional[np.ndarray] = None     # resonant: shape (2n-1,)
    mu: Optional[np.ndarray] = None         # resonant: positive gap frequencies

    def __post_init__(self):
        if self.kind not in ("zero", "trig", "resonant"):
            raise ConfigError(f"unknown control kind {self.kind!r}")
        if self.duration <= 0:
            raise ConfigError("control duration must be positive")
        if self.kind == "trig":
            rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
            if rows.shape[0] != int(round(self.duration)):
                raise ConfigError("trig control needs one coefficient row per unit")
            object.__setattr__(self, "rows", rows)
        if self.kind == "resonant":
            coeffs = np.asarray(self.coeffs, dtype=float)
            mu = np.asarray(self.mu, dtype=float)
            if coeffs.size != 2 * mu.size + 1:
                raise ConfigError("resonant control needs 2*len(mu)+1 coefficients")
            object.__setattr__(self, "coeffs", coeffs)
            object.__setattr__(self, "mu", mu)

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > self.duration):
            raise OutOfDomain("control evaluated outside [0, duration]")
        if self.kind == "zero":
            return np.zeros(t.shape)
        if self.kind == "resonant":
            out = np.full(t.shape, self.coeffs[0])
            for k, m in enumerate(self.mu, start=1):
                p, q = self.coeffs[2 * k - 1], self.coeffs[2 * k]
                out = out + 2.0 * (p * np.cos(m * t) - q * np.sin(m * t))
            return out
        units = self.rows.shape[0]
        j = np.minimum(np.floor(t).astype(int), units - 1)
        local = t - j
        basis = trig_basis_values(self.rows.shape[1], local)
        return np.sum(self.rows[j] * basis.T, axis=-1)

    def l2_norms(self) -> np.ndarray:
        """Per-unit L2 norms of the drive (orthonormal bases make trig exact)."""
        if self.kind == "zero":
            return np.zeros(int(round(self.duration)))
        if self.kind == "trig":
            return np.linalg.norm(self.rows, axis=1)
        nodes, weights = gauss_legendre_01(max(64, int(1.2 * self.mu[-1]) + 32))
        vals = self.evaluate(nodes)
        return np.array([math.sqrt(float(np.sum(weights * vals**2)))])

    def reversed(self) -> "ControlSignal":
        """The drive t -> u(duration - t), in the same closed form."""
        if self.kind == "zero":
            return self
        if self.kind == "trig":
            rows = self.rows[::-1].copy()
            rows[:, 2::2] *= -1.0   # sine columns flip under s -> 1-s
            return ControlSignal("trig", self.duration, rows=rows)
        # d_k -> conj(d_k) exp(-i mu_k T), from exp(i mu_k (T-t))
        coeffs = self.coeffs.copy()
        for k, m in enumerate(self.mu, start=1):
            p, q = coeffs[2 * k - 1], coeffs[2 * k]
            c, s = math.cos(m * self.duration), math.sin(m * self.duration)
            coeffs[2 * k - 1] = p * c - q * s
            coeffs[2 * k] = -(p * s + q * c)
        return ControlSignal("resonant", self.duration, coeffs=coeffs, mu=self.mu)


@dataclass(frozen=True)
class Stage:
    label: str
    signal: ControlSignal
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("stage duration must be positive")
        if abs(self.duration - self.signal.duration) > 1e-12:
            raise ConfigError("stage duration must match its signal")


@dataclass(frozen=True)
class SteeringPlan:
    """A replayable sequence of control stages with predicted endpoints.

    ``endpoints[i]`` is the state after stage i when replayed from ``start``
    with ``substeps_per_unit``; ``total_error`` is the distance from the final
    endpoint to ``target`` (ball center for approach plans, exact state for
    global plans).
    """

    stages: tuple
    start: np.ndarray
    endpoints: tuple
    target: np.ndarray
    total_error: float
    substeps_per_unit: int

    @property
    def endpoint(self) -> np.ndarray:
        return self.endpoints[-1] if self.endpoints else self.start

    @property
    def total_duration(self) -> float:
        return float(sum(st.duration for st in self.stages))

    def chaining_defect(self, spec: SystemSpec) -> float:
        """Worst per-stage replay deviation; construction keeps this at rounding."""
        config = PropagatorConfig(substeps_per_unit=self.substeps_per_unit)
        worst = 0.0
        z = self.start
        for st, end in zip(self.stages, self.endpoints):
            z = _replay_stage(spec, z, st, config)
            worst = max(worst, float(np.linalg.norm(z - end)))
            z = end
        return worst


@dataclass(frozen=True)
class FeedbackConfig:
    """Knobs of the Lyapunov feedback u(z) = gain * Im(<Bz,e1><e1,z>)."""

    gain: float = 0.05
    target_radius: float = 0.025
    max_time: float = 400.0
    stall_threshold: float = 1e-3

    def __post_init__(self):
        if self.gain <= 0:
            raise ConfigError("feedback gain must be positive")
        if not (0 < self.target_radius < math.sqrt(2.0)):
            raise ConfigError("target radius must lie in (0, sqrt(2))")
        if self.max_time < 1:
            raise ConfigError("max_time must allow at least one unit")
        if not (0 < self.stall_threshold < 1):
            raise ConfigError("stall threshold must lie in (0, 1)")


# ---------------------------------------------------------------------------
# linearized control and local steering


def _couplings_to_ground(spec: SystemSpec, sd: SpectralData) -> np.ndarray:
    """B_{1k} = <B e_1, e_k> in the eigenbasis."""
    bv1 = spec.b @ sd.ground_state()
    return np.array([inner(bv1, sd.eigenvectors[:, k]) for k in range(spec.n)])


def _tangent_part(v: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    return v - np.real(inner(v, anchor)) * anchor


def linearized_control(
    y0: np.ndarray,
    y1_target: np.ndarray,
    spec: SystemSpec,
    coupling_tol: float = COUPLING_TOL,
    tangency_tol: float = 1e-10,
) -> ControlSignal:
    """Resonant drive steering the linearized unit-time flow from y0 to y1_target.

    Componentwise in the eigenbasis the Duhamel formula reduces the problem to
    moments c_k = (<y1, e_k e^{-i lam_k}> - <y0, e_k>) / (-i B_{1k}); tangency
    of the data at e_1 and e_1 e^{-i lam_1} makes c_1 real.
    """
    sd = spec.spectral()
    v1 = sd.ground_state()
    anchor1 = v1
    anchor2 = v1 * np.exp(-1j * sd.eigenvalues[0])
    y0 = np.asarray(y0, dtype=complex)
    y1 = np.asarray(y1_target, dtype=complex)
    scale = max(1.0, np.linalg.norm(y0), np.linalg.norm(y1))
    if abs(np.real(inner(y0, anchor1))) > tangency_tol * scale:
        raise TangencyViolated("y0 must be tangent at the ground state")
    if abs(np.real(inner(y1, anchor2))) > tangency_tol * scale:
        raise TangencyViolated("y1_target must be tangent at the drifted ground state")

    b1k = _couplings_to_ground(spec, sd)
    if np.min(np.abs(b1k)) < coupling_tol:
        raise DegenerateCoupling(
            f"|<B e1, e_k>| below {coupling_tol}; moment inversion impossible"
        )
    phases = np.exp(1j * sd.eigenvalues)
    c = np.empty(spec.n, dtype=complex)
    for k in range(spec.n):
        vk = sd.eigenvectors[:, k]
        c[k] = (inner(y1, vk) * phases[k] - inner(y0, vk)) / (-1j * b1k[k])
    space = resonant_space(sd)
    c[0] = c[0].real  # imaginary part is rounding noise once tangency holds
    x = moment_solve(MomentProblem(targets=c, space=space))
    return ControlSignal("resonant", 1.0, coeffs=x, mu=space.mu[1:])


@dataclass(frozen=True)
class LocalSteerResult:
    signal: ControlSignal
    residual: float
    iterations: int
    l2_norm: float
    endpoint: np.ndarray


def local_steer(
    spec: SystemSpec,
    z_i: np.ndarray,
    z_f: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 20,
    delta_loc: float = 0.05,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> LocalSteerResult:
    """Exact steering of the unit-time flow between the anchor neighborhoods.

    Newton-chord first: the derivative is frozen at the anchor pair (e_1, 0),
    where inverting it is exactly the moment problem, so every iteration costs
    a single propagation.  The frozen model degrades when the resonant
    frequencies are slow on the unit window (the moment matrix is then badly
    conditioned and the inverse has a large norm), so once the chord stops
    contracting the loop switches to a damped Gauss-Newton polish with a fresh
    finite-difference Jacobian, charged against the same iteration budget.
    """
    sd = spec.spectral()
    v1 = sd.ground_state()
    anchor2 = v1 * np.exp(-1j * sd.eigenvalues[0])
    z_i = np.asarray(z_i, dtype=complex)
    z_f = np.asarray(z_f, dtype=complex)
    if np.linalg.norm(z_i - v1) > delta_loc:
        raise OutsideBasin(f"start lies outside the {delta_loc} basin of the ground state")
    if np.linalg.norm(z_f - anchor2) > delta_loc:
        raise OutsideBasin(
            f"target lies outside the {delta_loc} basin of the drifted ground state"
        )

    space = resonant_space(sd)
    a = _moment_matrix(space)
    b1k = _couplings_to_ground(spec, sd)
    if np.min(np.abs(b1k)) < COUPLING_TOL:
        raise DegenerateCoupling("ground-state couplings too small for steering")
    phases = np.exp(1j * sd.eigenvalues)
    mids = _substep_grid(1.0, config)[2]

    def shoot(x: np.ndarray) -> tuple[ControlSignal, np.ndarray, float]:
        signal = ControlSignal("resonant", 1.0, coeffs=x, mu=space.mu[1:])
        endpoint = propagate(spec, z_i, signal.evaluate(mids), 1.0, config,
                             drive_label="local-steer").endpoint
        return signal, endpoint, float(np.linalg.norm(z_f - endpoint))

    def done(signal, endpoint, residual, it):
        return LocalSteerResult(
            signal=signal,
            residual=residual,
            iterations=it,
            l2_norm=float(signal.l2_norms()[0]),
            endpoint=endpoint,
        )

    x = np.zeros(space.dim)
    signal, endpoint, residual = shoot(x)
    if residual <= tol:
        return done(signal, endpoint, residual, 0)

    chord = True
    damping = 1e-3
    fd_step = 1e-6
    for it in range(1, max_iter + 1):
        if chord:
            r_t = _tangent_part(z_f - endpoint, anchor2)
            c = np.empty(spec.n, dtype=complex)
            for k in range(spec.n):
                c[k] = (inner(r_t, sd.eigenvectors[:, k]) * phases[k]) / (-1j * b1k[k])
            c[0] = c[0].real
            x_try = x + np.linalg.solve(a, _stack_targets(c))
            sig_try, end_try, res_try = shoot(x_try)
            if res_try <= tol:
                return done(sig_try, end_try, res_try, it)
            if res_try > 0.5 * residual:
                # frozen derivative contracts too slowly or not at all; keep
                # the best iterate and continue with refreshed Jacobians
                chord = False
                continue
            x, signal, endpoint, residual = x_try, sig_try, end_try, res_try
        else:
            r_stack = np.concatenate([(endpoint - z_f).real, (endpoint - z_f).imag])
            jac = np.empty((2 * spec.n, space.dim))
            for j in range(space.dim):
                x_p = x.copy()
                x_p[j] += fd_step
                _, end_p, _ = shoot(x_p)
                diff = (end_p - endpoint) / fd_step
                jac[:, j] = np.concatenate([diff.real, diff.imag])
            lhs = jac.T @ jac + damping * np.eye(space.dim)
            dx = np.linalg.solve(lhs, -jac.T @ r_stack)
            sig_try, end_try, res_try = shoot(x + dx)
            if res_try <= tol:
                return done(sig_try, end_try, res_try, it)
            if res_try < residual:
                x, signal, endpoint, residual = x + dx, sig_try, end_try, res_try
                damping = max(damping * 0.33, 1e-12)
            else:
                damping = min(damping * 4.0, 1e8)
    raise NoConvergence(
        f"local steering stalled at residual {residual:.3g} after {max_iter} iterations"
    )


# ---------------------------------------------------------------------------
# Lyapunov feedback and phase alignment


def feedback_control(spec: SystemSpec, z: np.ndarray, gain: float) -> float:
    """The scalar feedback law gain * Im(<Bz,e1><e1,z>)."""
    v1 = spec.spectral().ground_state()
    return float(gain * np.imag(inner(spec.b @ np.asarray(z, complex), v1) * inner(v1, z)))


def _feedback_unit_raw(spec, sd, z, gain, config):
    synth, weights, sigma = _kernel_args(spec)
    nsub, h, _ = _substep_grid(1.0, config)
    return _backend.feedback_unit(
        spec.lam, spec.b, sd.ground_state(), z, gain, h, nsub,
        eps=spec.epsilon, synth=synth, weights=weights, sigma=sigma,
    )


def feedback_drive(
    spec: SystemSpec,
    z0: np.ndarray,
    fb: FeedbackConfig,
    config: PropagatorConfig = DEFAULT_CONFIG,
):
    """Closed-loop run until the state is within target_radius of the circle.

    Returns a trajectory record sampled at unit-time checkpoints.  The
    Lyapunov function makes the distance non-increasing in continuous time for
    eps = 0; violations beyond integrator error are logged, not assumed away.
    """
    from .dynamics import TrajectoryRecord

    sd = spec.spectral()
    v1 = sd.ground_state()
    z = sphere_renormalize(np.asarray(z0, dtype=complex))
    if abs(inner(z, v1)) < fb.stall_threshold:
        raise StallDetected(
            f"ground-state overlap {abs(inner(z, v1)):.3g} below "
            f"{fb.stall_threshold}; the feedback law cannot move this state"
        )
    states = [z]
    dists = [dist_to_circle(z, v1)]
    drifts = [0.0]
    units = 0
    while dists[-1] > fb.target_radius:
        if units >= fb.max_time:
            raise Timeout(
                f"feedback did not reach radius {fb.target_radius} within "
                f"{fb.max_time} units (distance {dists[-1]:.3g})"
            )
        _, z, drift = _feedback_unit_raw(spec, sd, z, fb.gain, config)
        units += 1
        states.append(z)
        d = dist_to_circle(z, v1)
        if d > dists[-1] + 1e-6:
            log.warning("feedback distance increased at unit %d: %.3g -> %.3g",
                        units, dists[-1], d)
        dists.append(d)
        drifts.append(max(drifts[-1], float(drift)))
    return TrajectoryRecord(
        times=np.arange(units + 1, dtype=float),
        states=np.asarray(states),
        drifts=np.asarray(drifts),
        max_norm_drift=drifts[-1],
        drive_label="lyapunov-feedback",
    )


def phase_align(
    spec: SystemSpec,
    z: np.ndarray,
    s: float,
    delta: float,
    k_max: int = 10_000,
) -> int:
    """Smallest number of free unit steps taking z into B(e_1 e^{is}, delta).

    Free drift only rotates eigenbasis coefficients, so the distance depends
    on k through Re(w_1 e^{-i(lam_1 k + s)}) alone; the search is exact and
    vectorized.  With eps != 0 each diagonal candidate is re-verified by
    nonlinear replay before being accepted.
    """
    sd = spec.spectral()
    v1 = sd.ground_state()
    z = np.asarray(z, dtype=complex)
    if dist_to_circle(z, v1) > 0.5 * delta + 1e-9:
        raise OutOfDomain("phase alignment needs a state within delta/2 of the circle")
    w1 = inner(z, v1)
    ks = np.arange(k_max + 1)
    overlap = np.real(w1 * np.exp(-1j * (sd.eigenvalues[0] * ks + s)))
    good = overlap >= 1.0 - 0.5 * delta**2
    candidates = ks[good]
    if candidates.size == 0:
        raise AlignmentExhausted(
            f"no aligning drift time <= {k_max}; the ground phase may be "
            "numerically resonant with 2*pi (retry with lam perturbed by 1e-3 * B)"
        )
    if spec.epsilon == 0.0:
        return int(candidates[0])
    target = v1 * np.exp(1j * s)
    for k in candidates:
        if k == 0:
            end = z
        else:
            end = propagate(spec, z, None, float(k)).endpoint
        if np.linalg.norm(end - target) <= delta:
            return int(k)
    raise AlignmentExhausted(
        f"nonlinear drift (eps={spec.epsilon}) spoiled every diagonal candidate"
    )


# ---------------------------------------------------------------------------
# approach plans


def _default_span_modes(space: ResonantSpace) -> int:
    """Smallest trig band that resolves the top resonant frequency (min 8)."""
    mu_max = float(space.mu[-1]) if space.n > 1 else 0.0
    return max(8, 2 * math.ceil(mu_max / (2.0 * np.pi)) + 3)


def _propagate_one(spec, z, drive_row, config):
    synth, weights, sigma = _kernel_args(spec)
    _, h, _ = _substep_grid(1.0, config)
    z1, drift = _backend.propagate_batch(
        spec.lam, spec.b, z[None, :], drive_row[None, :], h, spec.epsilon,
        synth=synth, weights=weights, sigma=sigma,
        renormalize=config.renormalize,
    )
    if drift[0] > config.norm_drift_tolerance:
        raise ConfigError("norm drift exceeded while building a plan")
    return z1[0]


def _replay_stage(spec, z, stage: Stage, config: PropagatorConfig) -> np.ndarray:
    duration = stage.duration
    if stage.signal.kind == "zero":
        return propagate(spec, z, None, duration, config).endpoint
    if stage.signal.kind == "trig":
        # one kernel call per unit, exactly as the stage was built, so the
        # replayed floats match the recorded endpoints bit for bit
        nsub, _, mids = _substep_grid(1.0, config)
        basis = trig_basis_values(stage.signal.rows.shape[1], mids)
        for row in stage.signal.rows:
            z = _propagate_one(spec, z, row @ basis, config)
        return z
    mids = _substep_grid(duration, config)[2]
    return propagate(spec, z, stage.signal.evaluate(mids), duration, config,
                     drive_label=stage.label).endpoint


def approach(
    spec: SystemSpec,
    z0: np.ndarray,
    s: float,
    delta: float,
    fb: Optional[FeedbackConfig] = None,
    span_modes: Optional[int] = None,
    max_retries: int = 5,
    config: PropagatorConfig = DEFAULT_CONFIG,
    rng: Optional[np.random.Generator] = None,
    align_delta: Optional[float] = None,
) -> SteeringPlan:
    """Plan driving z0 into B(e_1 e^{is}, delta): feedback, then free drift.

    Each feedback unit is built in-loop: the raw closed-loop drive is
    projected onto span{g_1..g_N} and the projected drive is what actually
    advances the state, so the recorded plan replays exactly.  Stalls and
    misalignments are retried after a random one-unit noise kick, itself
    recorded as a plan stage.

    align_delta tightens the ball actually aimed for without changing the
    advertised delta; callers that need the endpoint deep inside the ball
    (the one-unit bridge of a global plan) set it below delta.
    """
    sd = spec.spectral()
    v1 = sd.ground_state()
    if align_delta is None:
        align_delta = delta
    align_delta = min(align_delta, delta)
    if fb is None:
        fb = FeedbackConfig(target_radius=0.5 * align_delta)
    if span_modes is None:
        span_modes = _default_span_modes(resonant_space(sd))
    if rng is None:
        rng = np.random.default_rng(1905)
    kick_model = NoiseModel(J=min(span_modes, 8))

    nsub, h, mids = _substep_grid(1.0, config)
    basis = trig_basis_values(span_modes, mids)   # (N, nsub)
    z = sphere_renormalize(np.asarray(z0, dtype=complex))
    target = v1 * np.exp(1j * s)

    stages: list[Stage] = []
    endpoints: list[np.ndarray] = []
    rows: list[np.ndarray] = []

    def flush_rows():
        if rows:
            block = np.asarray(rows)
            stages.append(Stage("feedback", ControlSignal("trig", float(len(rows)),
                                                          rows=block), float(len(rows))))
            endpoints.append(z)
            rows.clear()

    for attempt in range(max_retries + 1):
        try:
            if abs(inner(z, v1)) < fb.stall_threshold:
                raise StallDetected("ground-state overlap below stall threshold")
            units = 0
            while dist_to_circle(z, v1) > fb.target_radius:
                if units >= fb.max_time:
                    raise Timeout("feedback budget exhausted during approach")
                samples, _, _ = _feedback_unit_raw(spec, sd, z, fb.gain, config)
                coeffs = (basis @ samples) * h
                z = _propagate_one(spec, z, coeffs @ basis, config)
                rows.append(coeffs)
                units += 1
            flush_rows()
            k = phase_align(spec, z, s, align_delta)
            if k > 0:
                z = propagate(spec, z, None, float(k), config).endpoint
                stages.append(Stage("align", ControlSignal("zero", float(k)), float(k)))
                endpoints.append(z)
            final = float(np.linalg.norm(z - target))
            if final > align_delta + 1e-9:
                raise AlignmentExhausted(
                    f"replayed drift landed {final:.3g} from the target (> {align_delta})"
                )
            return SteeringPlan(
                stages=tuple(stages),
                start=sphere_renormalize(np.asarray(z0, dtype=complex)),
                endpoints=tuple(endpoints),
                target=target,
                total_error=final,
                substeps_per_unit=config.substeps_per_unit,
            )
        except (StallDetected, Timeout, AlignmentExhausted) as exc:
            flush_rows()
            if attempt == max_retries:
                raise ApproachFailed(
                    f"approach failed after {max_retries} kicks: {exc}"
                ) from exc
            log.info("approach retry %d after %s", attempt + 1, type(exc).__name__)
            segment = sample_segment(kick_model, rng)
            kick = np.asarray(kick_model.b * segment.xi, dtype=float)
            z = _propagate_one(spec, z, kick @ trig_basis_values(kick_model.J, mids),
                               config)
            stages.append(Stage("kick", ControlSignal("trig", 1.0, rows=kick[None, :]),
                                1.0))
            endpoints.append(z)
    raise ApproachFailed("unreachable")


# ---------------------------------------------------------------------------
# global steering and robustness


def global_steer(
    spec: SystemSpec,
    z1: np.ndarray,
    z2: np.ndarray,
    delta: float = 0.03,
    tol: float = 1e-6,
    fb: Optional[FeedbackConfig] = None,
    config: PropagatorConfig = DEFAULT_CONFIG,
    rng: Optional[np.random.Generator] = None,
) -> SteeringPlan:
    """Exact steering z1 -> z2: approach, one-unit bridge, reversed approach.

    The return leg is built forward from conj(z2) on the transposed system and
    replayed reversed; conjugating the flow of the transposed matrices is what
    makes the discrete reversal exact, and for real-symmetric systems the
    transposition is invisible.
    """
    sd = spec.spectral()
    lam1 = float(sd.eigenvalues[0])
    z1 = sphere_renormalize(np.asarray(z1, dtype=complex))
    z2 = sphere_renormalize(np.asarray(z2, dtype=complex))

    # The legs aim well inside delta: the one-unit bridge only converges when
    # both endpoints sit deep in the exactly-reachable neighborhood of the
    # anchors, which for slow resonant frequencies is much smaller than the
    # delta callers ask for.
    align = min(delta, BRIDGE_ALIGN_DELTA)
    if fb is None:
        fb = FeedbackConfig(gain=0.2, target_radius=0.5 * align, max_time=2000.0)

    plan_a = approach(spec, z1, 0.0, delta, fb=fb, config=config, rng=rng,
                      align_delta=align)
    a = plan_a.endpoint

    plan_c = approach(spec.transposed(), np.conj(z2), lam1, delta, fb=fb,
                      config=config, rng=rng, align_delta=align)
    y = np.conj(plan_c.endpoint)

    try:
        bridge = local_steer(spec, a, y, tol=min(1e-8, 0.01 * tol), config=config)
    except (NoConvergence, OutsideBasin) as exc:
        raise BridgeFailed(f"one-unit bridge between approach endpoints failed: {exc}") from exc

    stages = list(plan_a.stages)
    stages.append(Stage("bridge", bridge.signal, 1.0))
    for st in reversed(plan_c.stages):
        stages.append(Stage(f"reversed-{st.label}", st.signal.reversed(), st.duration))

    z = z1
    endpoints = []
    for st in stages:
        z = _replay_stage(spec, z, st, config)
        endpoints.append(z)
    total_error = float(np.linalg.norm(z - z2))
    if total_error > tol:
        raise NoConvergence(
            f"global plan replay missed the target by {total_error:.3g} (> {tol})"
        )
    return SteeringPlan(
        stages=tuple(stages),
        start=z1,
        endpoints=tuple(endpoints),
        target=z2,
        total_error=total_error,
        substeps_per_unit=config.substeps_per_unit,
    )


def replay_plan(
    spec: SystemSpec,
    plan: SteeringPlan,
    config: Optional[PropagatorConfig] = None,
    epsilon: Optional[float] = None,
):
    """Endpoint and per-stage endpoints of a plan under a (possibly new) eps."""
    if config is None:
        config = PropagatorConfig(substeps_per_unit=plan.substeps_per_unit)
    if epsilon is not None:
        spec = spec.with_epsilon(epsilon)
    z = plan.start
    endpoints = []
    for st in plan.stages:
        z = _replay_stage(spec, z, st, config)
        endpoints.append(z)
    return z, endpoints


@dataclass(frozen=True)
class RobustnessReport:
    eps_values: tuple
    drifts: tuple            # endpoint distance to the eps=0 endpoint
    delta: float
    within_delta: tuple
    monotone: bool
    ratios: tuple            # successive drift ratios along the shrinking sweep

    def __str__(self):
        lines = ["robustness sweep (drift from the eps=0 endpoint):"]
        for e, d, ok in zip(self.eps_values, self.drifts, self.within_delta):
            lines.append(f"  eps={e:g}: drift {d:.3e} ({'within' if ok else 'OUTSIDE'} "
                         f"delta={self.delta})")
        lines.append(f"  monotone decrease: {self.monotone}")
        return "\n".join(lines)


def robust_check(
    spec: SystemSpec,
    plan: SteeringPlan,
    delta: float,
    eps_values: Sequence[float] = (1e-1, 1e-2, 1e-3),
) -> RobustnessReport:
    """Replay an eps=0 plan under a sweep of nonlinearity strengths.

    The replay drives the same open-loop control, so the unitary part of the
    difference equation cancels and the drift is set by the accumulated
    nonlinear forcing; the drift must shrink with eps.
    """
    if spec.nonlinearity.kind == "none":
        raise ConfigError("robustness sweep needs a spec with a nonlinearity attached")
    nominal = plan.endpoint
    drifts = []
    for eps in eps_values:
        endpoint, _ = replay_plan(spec, plan, epsilon=float(eps))
        drifts.append(float(np.linalg.norm(endpoint - nominal)))
    order = np.argsort(eps_values)[::-1]   # large eps first
    ordered = np.asarray(drifts)[order]
    monotone = bool(np.all(np.diff(ordered) <= 1e-12))
    ratios = tuple(
        float(ordered[i] / ordered[i + 1]) if ordered[i + 1] > 0 else math.inf
        for i in range(len(ordered) - 1)
    )
    return RobustnessReport(
        eps_values=tuple(float(e) for e in eps_values),
        drifts=tuple(drifts),
        delta=float(delta),
        within_delta=tuple(d <= delta for d in drifts),
        monotone=monotone,
        ratios=ratios,
    )


# ---------------------------------------------------------------------------
# plan serialization


def _state_to_json(z: np.ndarray) -> list:
    return [[float(c.real), float(c.imag)] for c in np.asarray(z, complex)]


def _state_from_json(pairs) -> np.ndarray:
    return np.array([complex(re, im) for re, im in pairs])


_PLAN_KEYS = {"version", "start", "target", "total_error", "substeps_per_unit",
              "stages", "endpoints"}
_STAGE_KEYS = {"label", "duration", "basis", "coefficients", "mu"}


def plan_to_json(plan: SteeringPlan) -> dict:
    stages = []
    for st in plan.stages:
        entry = {"label": st.label, "duration": float(st.duration),
                 "basis": st.signal.kind}
        if st.signal.kind == "trig":
            entry["coefficients"] = st.signal.rows.tolist()
        elif st.signal.kind == "resonant":
            entry["coefficients"] = st.signal.coeffs.tolist()
            entry["mu"] = st.signal.mu.tolist()
        stages.append(entry)
    return {
        "version": 1,
        "start": _state_to_json(plan.start),
        "target": _state_to_json(plan.target),
        "total_error": float(plan.total_error),
        "substeps_per_unit": int(plan.substeps_per_unit),
        "stages": stages,
        "endpoints": [_state_to_json(e) for e in plan.endpoints],
    }


def plan_from_json(data: dict) -> SteeringPlan:
    unknown = set(data) - _PLAN_KEYS
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
    if data.get("version") != 1:
        raise ConfigError("unsupported plan version")
    stages = []
    for entry in data["stages"]:
        unknown = set(entry) - _STAGE_KEYS
        if unknown:
            raise ConfigError(f"unknown stage keys: {sorted(unknown)}")
        kind = entry["basis"]
        duration = float(entry["duration"])
        if kind == "zero":
            signal = ControlSignal("zero", duration)
        elif kind == "trig":
            signal = ControlSignal("trig", duration,
                                   rows=np.asarray(entry["coefficients"], float))
        elif kind == "resonant":
            signal = ControlSignal("resonant", duration,
                                   coeffs=np.asarray(entry["coefficients"], float),
                                   mu=np.asarray(entry["mu"], float))
        else:
            raise ConfigError(f"unknown stage basis {kind!r}")
        stages.append(Stage(entry["label"], signal, duration))
    return SteeringPlan(
        stages=tuple(stages),
        start=_state_from_json(data["start"]),
        endpoints=tuple(_state_from_json(e) for e in data["endpoints"]),
        target=_state_from_json(data["target"]),
        total_error=float(data["total_error"]),
        substeps_per_unit=int(data["substeps_per_unit"]),
    )


def plan_dump(plan: SteeringPlan, fp) -> None:
    json.dump(plan_to_json(plan), fp, indent=1)


def plan_load(fp) -> SteeringPlan:
    return plan_from_json(json.load(fp))
