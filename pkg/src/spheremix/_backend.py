"""Compiled propagation kernels with a pure-numpy fallback.

The inner loop of everything in this package is the unit-interval splitting
step: half a nonlinear step, an exact unitary exp(-i h (L + u B)) at the
midpoint drive value, half a nonlinear step, then a renormalization guard.
Two interchangeable implementations live here:

* a numba ``@njit`` per-trajectory loop (default when numba imports), and
* a batched numpy version using stacked ``eigh`` / closed-form 2x2 rotations.

Selection: environment variable ``SPHEREMIX_BACKEND`` set to ``"numba"`` or
``"numpy"`` (default numba when available), or :func:`set_backend` at
runtime.  Both paths implement identical arithmetic per dimension (closed
form for n = 2, eigendecomposition otherwise) and agree to rounding error;
outputs are bitwise reproducible per backend for a fixed seed.

The nonlinear half step is an explicit midpoint step for dz/dt = -i eps F(z)
followed by projection back to the invariant norm of that subflow, so the
logged drift reflects only the unitary step's rounding when the guard is on.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = "SPHEREMIX_BACKEND"

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# --------------------------------------------------------------------------
# pure numpy implementation (batched over trajectories)


def _np_nonlin(z, synth, weights, sigma):
    psi = z @ synth.T
    dens = np.abs(psi) ** sigma
    return (dens * psi * weights) @ synth


def _np_half_nl(z, tau, eps, synth, weights, sigma, project):
    nrm0 = np.linalg.norm(z, axis=1)
    k1 = (-1j * eps) * _np_nonlin(z, synth, weights, sigma)
    zm = z + (0.5 * tau) * k1
    z1 = z + tau * ((-1j * eps) * _np_nonlin(zm, synth, weights, sigma))
    if project:
        z1 *= (nrm0 / np.linalg.norm(z1, axis=1))[:, None]
    return z1


def _np_unitary_step(lam, b, z, u, h):
    """Apply exp(-i h (L + u B)) rowwise; u has one drive value per row."""
    n = lam.shape[0]
    if n == 2:
        a00 = lam[0, 0].real + u * b[0, 0].real
        a11 = lam[1, 1].real + u * b[1, 1].real
        c = lam[0, 1] + u * b[0, 1]
        half_tr = 0.5 * (a00 + a11)
        c3 = 0.5 * (a00 - a11)
        r = np.sqrt(c3 * c3 + c.real**2 + c.imag**2)
        rh = r * h
        s = np.where(r > 0.0, np.sin(rh) / np.where(r > 0.0, r, 1.0), h)
        cosf = np.cos(rh)
        phase = np.exp(-1j * h * half_tr)
        m0 = c3 * z[:, 0] + c * z[:, 1]
        m1 = np.conj(c) * z[:, 0] - c3 * z[:, 1]
        out = np.empty_like(z)
        out[:, 0] = phase * (cosf * z[:, 0] - 1j * s * m0)
        out[:, 1] = phase * (cosf * z[:, 1] - 1j * s * m1)
        return out
    hmat = lam[None, :, :] + u[:, None, None] * b[None, :, :]
    w, v = np.linalg.eigh(hmat)
    amp = np.einsum("kji,kj->ki", v.conj(), z)
    amp *= np.exp(-1j * h * w)
    return np.einsum("kij,kj->ki", v, amp)


def _numpy_propagate_batch(lam, b, z0, drive, h, eps, synth, weights, sigma, renormalize):
    z = np.array(z0, dtype=np.complex128)
    count, _ = z.shape
    nsub = drive.shape[1]
    use_nl = eps != 0.0 and synth.shape[0] > 0
    ref = np.ones(count) if renormalize else np.linalg.norm(z, axis=1)
    drift = np.zeros(count)
    tau = 0.5 * h
    for m in range(nsub):
        if use_nl:
            z = _np_half_nl(z, tau, eps, synth, weights, sigma, renormalize)
        z = _np_unitary_step(lam, b, z, drive[:, m], h)
        if use_nl:
            z = _np_half_nl(z, tau, eps, synth, weights, sigma, renormalize)
        nrm = np.linalg.norm(z, axis=1)
        np.maximum(drift, np.abs(nrm / ref - 1.0), out=drift)
        if renormalize:
            z /= nrm[:, None]
    return z, drift


def _numpy_feedback_unit(lam, b, e1, z0, gain, h, nsub, eps, synth, weights, sigma):
    z = np.array(z0, dtype=np.complex128)[None, :]
    u_samples = np.empty(nsub)
    drift = 0.0
    tau = 0.5 * h
    use_nl = eps != 0.0 and synth.shape[0] > 0
    for m in range(nsub):
        zz = z[0]
        u = gain * ((b @ zz) @ e1.conj() * (e1 @ zz.conj())).imag
        u_samples[m] = u
        if use_nl:
            z = _np_half_nl(z, tau, eps, synth, weights, sigma, True)
        z = _np_unitary_step(lam, b, z, np.array([u]), h)
        if use_nl:
            z = _np_half_nl(z, tau, eps, synth, weights, sigma, True)
        nrm = float(np.linalg.norm(z[0]))
        drift = max(drift, abs(nrm - 1.0))
        z /= nrm
    return u_samples, z[0], drift


# --------------------------------------------------------------------------
# numba implementation (identical math, per-trajectory loops)


@njit(cache=True)
def _nb_nonlin(z, synth, weights, sigma):
    psi = synth @ z
    dens = np.abs(psi) ** sigma
    return (dens * weights * psi) @ synth


@njit(cache=True)
def _nb_norm(z):
    acc = 0.0
    for i in range(z.shape[0]):
        acc += z[i].real * z[i].real + z[i].imag * z[i].imag
    return np.sqrt(acc)


@njit(cache=True)
def _nb_half_nl(z, tau, eps, synth, weights, sigma, project):
    nrm0 = _nb_norm(z)
    k1 = (-1j * eps) * _nb_nonlin(z, synth, weights, sigma)
    zm = z + (0.5 * tau) * k1
    z1 = z + tau * ((-1j * eps) * _nb_nonlin(zm, synth, weights, sigma))
    if project:
        z1 *= nrm0 / _nb_norm(z1)
    return z1


@njit(cache=True)
def _nb_unitary_step(lam, b, z, u, h):
    n = lam.shape[0]
    if n == 2:
        a00 = lam[0, 0].real + u * b[0, 0].real
        a11 = lam[1, 1].real + u * b[1, 1].real
        c = lam[0, 1] + u * b[0, 1]
        half_tr = 0.5 * (a00 + a11)
        c3 = 0.5 * (a00 - a11)
        r = np.sqrt(c3 * c3 + c.real * c.real + c.imag * c.imag)
        rh = r * h
        if r > 0.0:
            s = np.sin(rh) / r
        else:
            s = h
        cosf = np.cos(rh)
        phase = np.exp(-1j * h * half_tr)
        m0 = c3 * z[0] + c * z[1]
        m1 = np.conj(c) * z[0] - c3 * z[1]
        out = np.empty_like(z)
        out[0] = phase * (cosf * z[0] - 1j * s * m0)
        out[1] = phase * (cosf * z[1] - 1j * s * m1)
        return out
    hmat = lam + u * b
    w, v = np.linalg.eigh(hmat)
    amp = v.conj().T @ z
    amp *= np.exp(-1j * h * w)
    return v @ amp


@njit(cache=True)
def _nb_propagate_batch(lam, b, z0, drive, h, eps, synth, weights, sigma, renormalize):
    count, n = z0.shape
    nsub = drive.shape[1]
    use_nl = eps != 0.0 and synth.shape[0] > 0
    out = np.empty_like(z0)
    drift = np.zeros(count)
    tau = 0.5 * h
    for i in range(count):
        z = z0[i].copy()
        ref = 1.0 if renormalize else _nb_norm(z)
        dmax = 0.0
        for m in range(nsub):
            if use_nl:
                z = _nb_half_nl(z, tau, eps, synth, weights, sigma, renormalize)
            z = _nb_unitary_step(lam, b, z, drive[i, m], h)
            if use_nl:
                z = _nb_half_nl(z, tau, eps, synth, weights, sigma, renormalize)
            nrm = _nb_norm(z)
            d = abs(nrm / ref - 1.0)
            if d > dmax:
                dmax = d
            if renormalize:
                z /= nrm
        out[i] = z
        drift[i] = dmax
    return out, drift


@njit(cache=True)
def _nb_feedback_unit(lam, b, e1, z0, gain, h, nsub, eps, synth, weights, sigma):
    z = z0.copy()
    u_samples = np.empty(nsub)
    drift = 0.0
    tau = 0.5 * h
    use_nl = eps != 0.0 and synth.shape[0] > 0
    for m in range(nsub):
        ov_b = 0.0 + 0.0j
        ov_e = 0.0 + 0.0j
        bz = b @ z
        for a in range(z.shape[0]):
            ov_b += bz[a] * np.conj(e1[a])
            ov_e += e1[a] * np.conj(z[a])
        u = gain * (ov_b * ov_e).imag
        u_samples[m] = u
        if use_nl:
            z = _nb_half_nl(z, tau, eps, synth, weights, sigma, True)
        z = _nb_unitary_step(lam, b, z, u, h)
        if use_nl:
            z = _nb_half_nl(z, tau, eps, synth, weights, sigma, True)
        nrm = _nb_norm(z)
        if abs(nrm - 1.0) > drift:
            drift = abs(nrm - 1.0)
        z /= nrm
    return u_samples, z, drift


# --------------------------------------------------------------------------
# dispatch

_EMPTY_SYNTH = np.zeros((0, 1), dtype=np.complex128)
_EMPTY_WEIGHTS = np.zeros(0)

_backend = None


def available_backends():
    return ("numba", "numpy") if HAS_NUMBA else ("numpy",)


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    _backend = name


def backend_name() -> str:
    return _backend


def _init_backend():
    requested = os.environ.get(_ENV_FLAG, "").strip().lower()
    if requested:
        set_backend(requested)
    else:
        set_backend("numba" if HAS_NUMBA else "numpy")


_init_backend()


def _prep_nl(synth, weights):
    if synth is None or weights is None:
        return _EMPTY_SYNTH, _EMPTY_WEIGHTS
    return (
        np.ascontiguousarray(synth, dtype=np.complex128),
        np.ascontiguousarray(weights, dtype=np.float64),
    )


def propagate_batch(lam, b, z0, drive, h, eps, synth=None, weights=None, sigma=2.0,
                    renormalize=True):
    """Advance a batch of states through ``drive.shape[1]`` splitting substeps.

    Returns the final states and the per-trajectory maximum norm drift seen
    before each renormalization.
    """
    lam = np.ascontiguousarray(lam, dtype=np.complex128)
    b = np.ascontiguousarray(b, dtype=np.complex128)
    z0 = np.ascontiguousarray(z0, dtype=np.complex128)
    drive = np.ascontiguousarray(drive, dtype=np.float64)
    synth, weights = _prep_nl(synth, weights)
    args = (lam, b, z0, drive, float(h), float(eps), synth, weights, float(sigma),
            bool(renormalize))
    if _backend == "numba":
        return _nb_propagate_batch(*args)
    return _numpy_propagate_batch(*args)


def feedback_unit(lam, b, e1, z0, gain, h, nsub, eps=0.0, synth=None, weights=None,
                  sigma=2.0):
    """One unit interval of closed-loop drive; returns (samples, state, drift)."""
    lam = np.ascontiguousarray(lam, dtype=np.complex128)
    b = np.ascontiguousarray(b, dtype=np.complex128)
    e1 = np.ascontiguousarray(e1, dtype=np.complex128)
    z0 = np.ascontiguousarray(z0, dtype=np.complex128)
    synth, weights = _prep_nl(synth, weights)
    args = (lam, b, e1, z0, float(gain), float(h), int(nsub), float(eps), synth,
            weights, float(sigma))
    if _backend == "numba":
        return _nb_feedback_unit(*args)
    return _numpy_feedback_unit(*args)
