import io

import numpy as np
import pytest

from spheremix import _backend, core, dynamics, errors, noise
from spheremix.core import SystemSpec, inner


def unit(v):
    v = np.asarray(v, dtype=complex)
    return v / np.linalg.norm(v)


def test_config_validation():
    with pytest.raises(errors.ConfigError):
        dynamics.PropagatorConfig(substeps_per_unit=4)
    with pytest.raises(errors.ConfigError):
        dynamics.PropagatorConfig(norm_drift_tolerance=0.0)


def test_free_flight_matches_exact(sys_a):
    z0 = unit([1.0, 1.0j])
    rec = dynamics.propagate(sys_a, z0, None, t_total=3.0)
    exact = sys_a.spectral().unitary_at(3.0) @ z0
    assert np.linalg.norm(rec.endpoint - exact) <= 1e-12
    assert rec.max_norm_drift <= 1e-13


def test_unitarity_under_noise(sys_a, default_model):
    rng = np.random.default_rng(11)
    z = unit([0.2, 1.0])
    for _ in range(5):
        z = dynamics.step_markov(sys_a, z, default_model, rng)
        assert abs(np.linalg.norm(z) - 1.0) <= 1e-12


def test_linearity_when_unforced(sys_a, default_model):
    # with the nonlinear term off and no renormalization the unit map is linear
    cfg = dynamics.PropagatorConfig(renormalize=False, norm_drift_tolerance=1e-6)
    seg = noise.sample_segment(default_model, np.random.default_rng(3))
    mids = dynamics._substep_grid(1.0, cfg)[2]
    drive = dynamics.segment_drive_values(default_model, seg, mids)

    x = np.array([1.0, 0.0], dtype=complex)
    y = np.array([0.0, 1.0], dtype=complex)
    a, b = 0.3 - 0.1j, 0.7 + 0.2j
    fx = dynamics.propagate(sys_a, x, drive, 1.0, cfg).endpoint
    fy = dynamics.propagate(sys_a, y, drive, 1.0, cfg).endpoint
    fxy = dynamics.propagate(sys_a, a * x + b * y, drive, 1.0, cfg).endpoint
    assert np.linalg.norm(fxy - (a * fx + b * fy)) <= 1e-12


def test_strang_second_order(sys_b):
    spec = sys_b.with_epsilon(0.05)
    z0 = unit([1.0, 0.5j, 0.25])
    drive = lambda t: 0.4 * np.cos(2.0 * np.pi * np.asarray(t))
    ref_cfg = dynamics.PropagatorConfig(substeps_per_unit=4096)
    ref = dynamics.propagate(spec, z0, drive, 1.0, ref_cfg).endpoint
    errs = []
    for nsub in (64, 128, 256):
        cfg = dynamics.PropagatorConfig(substeps_per_unit=nsub)
        end = dynamics.propagate(spec, z0, drive, 1.0, cfg).endpoint
        errs.append(np.linalg.norm(end - ref))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.7), rates


def test_discrete_time_reversal_real_symmetric(sys_b):
    # real symmetric system: replaying the reversed drive on the conjugate
    # endpoint walks the trajectory back exactly (up to rounding)
    spec = sys_b.with_epsilon(0.1)
    cfg = dynamics.PropagatorConfig(substeps_per_unit=128)
    nsub, h, mids = dynamics._substep_grid(4.0, cfg)
    rng = np.random.default_rng(21)
    drive = 0.5 * np.tanh(np.sin(3.0 * mids) + rng.normal(size=nsub) * 0.1)
    z0 = unit([0.6, -0.3 + 0.4j, 0.2j])
    z1 = dynamics.propagate(spec, z0, drive, 4.0, cfg).endpoint
    back = dynamics.propagate(spec, np.conj(z1), drive[::-1], 4.0, cfg).endpoint
    assert np.linalg.norm(np.conj(back) - z0) <= 1e-8


def test_discrete_time_reversal_complex_hermitian(rng):
    n = 3
    lam = np.diag([0.3, 1.1, 2.9])
    b = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    b = 0.5 * (b + b.conj().T)
    spec = SystemSpec(lam=lam, b=b, epsilon=0.0)
    cfg = dynamics.PropagatorConfig(substeps_per_unit=64)
    nsub, h, mids = dynamics._substep_grid(2.0, cfg)
    drive = np.cos(5.0 * mids)
    z0 = unit(rng.normal(size=n) + 1j * rng.normal(size=n))
    z1 = dynamics.propagate(spec, z0, drive, 2.0, cfg).endpoint
    back = dynamics.propagate(spec.transposed(), np.conj(z1), drive[::-1], 2.0, cfg).endpoint
    assert np.linalg.norm(np.conj(back) - z0) <= 1e-10


def test_markov_step_bitwise_deterministic(sys_a, default_model):
    z = unit([1.0, 1.0])
    a = dynamics.step_markov(sys_a, z, default_model, np.random.default_rng(77))
    b = dynamics.step_markov(sys_a, z, default_model, np.random.default_rng(77))
    assert np.array_equal(a, b)


def test_batch_matches_single_steps(sys_a, default_model):
    count = 6
    z0 = np.tile(unit([0.8, 0.6j]), (count, 1))
    batch = dynamics.step_markov_batch(sys_a, z0, default_model, master_seed=5, step=2)
    for i in range(count):
        seg = noise.segment_xi(default_model, 5, traj=i, step=2)
        single = dynamics.propagate_unit(sys_a, z0[i], seg, default_model)
        assert np.linalg.norm(batch[i] - single) <= 1e-12


def test_backends_agree(sys_b, default_model):
    pytest.importorskip("numba")
    spec = sys_b.with_epsilon(0.1)
    z0 = np.array(
        [unit([1.0, 0.3j, 0.1]), unit([0.2, -0.9, 0.4j])], dtype=complex
    )
    prev = _backend.backend_name()
    try:
        _backend.set_backend("numpy")
        a = dynamics.step_markov_batch(spec, z0, default_model, 9, 0)
        _backend.set_backend("numba")
        b = dynamics.step_markov_batch(spec, z0, default_model, 9, 0)
    finally:
        _backend.set_backend(prev)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_norm_drift_guard_raises(sys_b):
    spec = sys_b.with_epsilon(0.5)
    cfg = dynamics.PropagatorConfig(
        substeps_per_unit=16, renormalize=False, norm_drift_tolerance=1e-15
    )
    with pytest.raises(errors.NormDriftExceeded):
        dynamics.propagate(spec, unit([1.0, 1.0, 1.0]), lambda t: 0.0 * t, 5.0, cfg)


def test_linearized_flow_free_case(sys_a):
    y0 = np.array([0.5j, 0.3 + 0.2j])  # Re<y0,e1> = 0
    y1 = dynamics.linearized_flow(sys_a, y0, lambda t: np.zeros_like(t))
    exact = sys_a.spectral().unitary_at(1.0) @ y0
    assert np.linalg.norm(y1 - exact) <= 1e-12


def test_linearized_flow_constant_drive_closed_form(sys_a):
    # lam = diag(1,2), b = ones: <B e1, e2> = 1, gap mu = 1
    y0 = np.zeros(2, dtype=complex)
    y1 = dynamics.linearized_flow(sys_a, y0, lambda t: np.ones_like(t))
    integral = (np.exp(1j) - 1.0) / 1j
    expected = -1j * np.exp(-2j) * integral
    assert abs(inner(y1, sys_a.spectral().eigenvectors[:, 1]) - expected) <= 1e-12


def test_linearized_flow_matches_finite_difference(sys_a, default_model):
    # joint first-order probe: tangent data and drive both scaled by s
    rng = np.random.default_rng(31)
    seg = noise.sample_segment(default_model, rng)
    w = lambda t: np.asarray(
        [noise.evaluate(seg, default_model, float(tt)) for tt in np.atleast_1d(t)]
    )
    sd = sys_a.spectral()
    e1 = sd.ground_state()
    y0 = 1j * 0.4 * e1 + 0.3 * sd.eigenvectors[:, 1]
    s = 1e-5
    cfg = dynamics.PropagatorConfig(substeps_per_unit=1024)

    z0 = core.sphere_renormalize(e1 + s * y0)
    z1 = dynamics.propagate(sys_a, z0, lambda t: s * w(t), 1.0, cfg).endpoint
    base1 = sd.unitary_at(1.0) @ e1
    fd = (z1 - base1) / s
    y1 = dynamics.linearized_flow(sys_a, y0, w)
    assert np.linalg.norm(fd - y1) <= 5e-3


def test_linearized_flow_rejects_radial_component(sys_a):
    with pytest.raises(errors.TangencyViolated):
        dynamics.linearized_flow(sys_a, np.array([1.0, 0.0]), lambda t: np.zeros_like(t))


def test_record_stride_and_csv(sys_a, default_model):
    cfg = dynamics.PropagatorConfig(substeps_per_unit=32, record_stride=8)
    rec = dynamics.propagate(sys_a, unit([1.0, 2.0]), None, 1.0, cfg)
    assert rec.times[0] == 0.0 and rec.times[-1] == pytest.approx(1.0)
    assert rec.states.shape == (len(rec.times), 2)
    assert np.all(np.diff(rec.drifts) >= 0.0)  # running max

    buf = io.StringIO()
    dynamics.record_to_csv(rec, buf)
    buf.seek(0)
    header = buf.readline().strip().split(",")
    assert header[0] == "t" and "re_z1" in header and "im_z2" in header
    rows = buf.read().strip().splitlines()
    assert len(rows) == len(rec.times)
    first = np.array(rows[0].split(","), dtype=float)
    assert first[1] == pytest.approx(rec.states[0, 0].real)
