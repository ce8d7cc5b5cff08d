import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheremix import control, core, dynamics, errors, galerkin
from spheremix.quadrature import gauss_legendre_01

from conftest import random_state


ANCHOR_TOL = 1e-12


def anchors(spec):
    sd = spec.spectral()
    v1 = sd.ground_state()
    return v1, v1 * np.exp(-1j * sd.eigenvalues[0])


def ball_point(anchor, radius, rng):
    g = rng.standard_normal(len(anchor)) + 1j * rng.standard_normal(len(anchor))
    g *= radius * rng.random() ** 0.25 / np.linalg.norm(g)
    return core.sphere_renormalize(anchor + g)


def tangent_at(anchor, rng, scale=1.0):
    y = rng.standard_normal(len(anchor)) + 1j * rng.standard_normal(len(anchor))
    y -= np.real(core.inner(y, anchor)) * anchor
    return scale * y


@pytest.fixture(scope="module")
def gal3():
    return galerkin.build(galerkin.PolynomialPotential.from_string("x^2"), 3)


# ----------------------------------------------------------- resonant space


def test_resonant_space_sys_a(sys_a):
    space = control.resonant_space(sys_a.spectral())
    assert space.n == 2 and space.dim == 3
    np.testing.assert_allclose(space.mu, [0.0, 1.0], atol=1e-12)


def test_resonant_space_galerkin_gaps(gal3):
    space = control.resonant_space(gal3.spectral())
    np.testing.assert_allclose(space.mu, [0.0, 3 * np.pi**2, 8 * np.pi**2],
                               atol=1e-9)


def test_resonant_space_rejects_degenerate_spectrum():
    lam = np.diag([1.0, 1.0]).astype(complex)
    b = np.ones((2, 2), dtype=complex)
    spec = core.SystemSpec(lam, b, 0.0, core.Nonlinearity())
    with pytest.raises(errors.DegenerateSpectrum):
        control.resonant_space(spec.spectral())


def test_space_evaluate_closed_form():
    space = control.ResonantSpace(n=2, mu=np.array([0.0, 1.0]))
    x = np.array([1.0, 0.5, -0.25])
    t = np.linspace(0.0, 1.0, 11)
    expected = 1.0 + 2.0 * (0.5 * np.cos(t) + 0.25 * np.sin(t))
    np.testing.assert_allclose(space.evaluate(x, t), expected, atol=1e-14)


# ----------------------------------------------------------- moment problem


@pytest.mark.parametrize("mu_tail", [(1.0,), (3 * np.pi**2, 8 * np.pi**2),
                                     (1.3, 2.9, 7.7)])
def test_moment_round_trip(mu_tail, rng):
    space = control.ResonantSpace(n=len(mu_tail) + 1,
                                  mu=np.array((0.0,) + mu_tail))
    x_true = rng.standard_normal(space.dim)
    nodes, weights = gauss_legendre_01(max(64, int(1.2 * space.mu[-1]) + 32))
    w = space.evaluate(x_true, nodes)
    targets = np.array([np.sum(weights * np.exp(1j * m * nodes) * w)
                        for m in space.mu])
    x = control.moment_solve(control.MomentProblem(targets=targets, space=space))
    np.testing.assert_allclose(x, x_true, atol=1e-10)


def test_moment_solve_zero_targets(sys_a):
    space = control.resonant_space(sys_a.spectral())
    x = control.moment_solve(control.MomentProblem(
        targets=np.zeros(2, dtype=complex), space=space))
    np.testing.assert_allclose(x, 0.0, atol=1e-14)


def test_moment_solve_sys_a_unit_dc(sys_a):
    space = control.resonant_space(sys_a.spectral())
    targets = np.array([1.0, 0.0], dtype=complex)
    x = control.moment_solve(control.MomentProblem(targets=targets, space=space))
    res = control.moment_residuals(space, x, targets)
    assert np.max(res) <= 1e-10


def test_moment_first_target_must_be_real(sys_a):
    space = control.resonant_space(sys_a.spectral())
    with pytest.raises(errors.ConfigError):
        control.MomentProblem(targets=np.array([1.0 + 1e-6j, 0.0]), space=space)


def test_moment_solve_ill_conditioned():
    space = control.ResonantSpace(n=2, mu=np.array([0.0, 1e-4]))
    with pytest.raises(errors.IllConditioned):
        control.moment_solve(control.MomentProblem(
            targets=np.array([1.0, 0.0], dtype=complex), space=space))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_moment_residuals_random_targets(seed):
    rng = np.random.default_rng(seed)
    space = control.ResonantSpace(n=2, mu=np.array([0.0, 1.0]))
    targets = np.array([rng.standard_normal(),
                        rng.standard_normal() + 1j * rng.standard_normal()])
    x = control.moment_solve(control.MomentProblem(targets=targets, space=space))
    assert np.max(control.moment_residuals(space, x, targets)) <= 1e-10


# ------------------------------------------------------- linearized control


def test_linearized_control_zero_data(sys_a):
    w = control.linearized_control(np.zeros(2, complex), np.zeros(2, complex), sys_a)
    np.testing.assert_allclose(w.coeffs, 0.0, atol=1e-12)


def test_linearized_control_closure(sys_a, rng):
    v1, anchor2 = anchors(sys_a)
    for _ in range(20):
        y0 = tangent_at(v1, rng, scale=1e-3)
        y1 = tangent_at(anchor2, rng, scale=1e-3)
        w = control.linearized_control(y0, y1, sys_a)
        reached = dynamics.linearized_flow(sys_a, y0, w.evaluate)
        assert np.linalg.norm(reached - y1) <= 1e-8


def test_linearized_first_moment_real_for_tangent_data(sys_a, rng):
    sd = sys_a.spectral()
    v1, anchor2 = anchors(sys_a)
    b11 = core.inner(sys_a.b @ v1, v1)
    for _ in range(100):
        y0 = tangent_at(v1, rng)
        y1 = tangent_at(anchor2, rng)
        c1 = (core.inner(y1, v1) * np.exp(1j * sd.eigenvalues[0])
              - core.inner(y0, v1)) / (-1j * b11)
        assert abs(c1.imag) <= 1e-10


def test_linearized_control_tangency_violated(sys_a):
    v1, _ = anchors(sys_a)
    with pytest.raises(errors.TangencyViolated):
        control.linearized_control(v1, np.zeros(2, complex), sys_a)


# --------------------------------------------------------------- local steer


def test_local_steer_trivial_anchor_pair(sys_a):
    v1, anchor2 = anchors(sys_a)
    res = control.local_steer(sys_a, v1, anchor2)
    assert res.iterations == 0
    assert res.residual <= 1e-12
    assert res.l2_norm <= 1e-12


def test_local_steer_sys_a_calibrated_radius(sys_a, rng):
    v1, anchor2 = anchors(sys_a)
    mids = dynamics._substep_grid(1.0, dynamics.DEFAULT_CONFIG)[2]
    for _ in range(10):
        z_i = ball_point(v1, 0.006, rng)
        z_f = ball_point(anchor2, 0.006, rng)
        res = control.local_steer(sys_a, z_i, z_f)
        assert res.residual <= 1e-8
        assert res.iterations <= 20
        # forward consistency: the returned control really is a right inverse
        replay = dynamics.propagate(sys_a, z_i, res.signal.evaluate(mids),
                                    1.0).endpoint
        assert np.linalg.norm(replay - z_f) <= 1e-8


def test_local_steer_galerkin_chord_path(gal3, rng):
    v1, anchor2 = anchors(gal3)
    for _ in range(5):
        z_i = ball_point(v1, 0.02, rng)
        z_f = ball_point(anchor2, 0.02, rng)
        res = control.local_steer(gal3, z_i, z_f)
        assert res.residual <= 1e-8
        assert res.iterations <= 10


def test_local_steer_outside_basin(sys_a, rng):
    v1, anchor2 = anchors(sys_a)
    far = core.sphere_renormalize(v1 + 0.2 * ball_point(anchor2, 1.0, rng))
    if np.linalg.norm(far - v1) > 0.05:
        with pytest.raises(errors.OutsideBasin):
            control.local_steer(sys_a, far, anchor2)


def test_local_steer_unreachable_phase_raises(sys_a):
    # relative ground phase beyond the one-unit reachable window; the
    # iteration must fail loudly instead of silently returning a bad control
    v1, anchor2 = anchors(sys_a)
    z_f = anchor2 * np.exp(0.03j)
    with pytest.raises(errors.NoConvergence):
        control.local_steer(sys_a, v1, z_f)


# ------------------------------------------------------------------ feedback


def test_feedback_law_vanishes_on_circle(sys_a):
    v1, _ = anchors(sys_a)
    for t in np.linspace(0.0, 2 * np.pi, 100):
        assert abs(control.feedback_control(sys_a, v1 * np.exp(1j * t), 0.3)) <= 1e-14


def test_feedback_law_oracle(sys_a):
    sd = sys_a.spectral()
    z = (sd.eigenvectors[:, 0] + 1j * sd.eigenvectors[:, 1]) / np.sqrt(2.0)
    assert control.feedback_control(sys_a, z, 0.3) == pytest.approx(0.15, abs=1e-12)


def test_feedback_drive_stalls_on_orthogonal_start(sys_a):
    e2 = sys_a.spectral().eigenvectors[:, 1]
    with pytest.raises(errors.StallDetected):
        control.feedback_drive(sys_a, e2, control.FeedbackConfig())


def test_feedback_drive_reaches_target(sys_a):
    sd = sys_a.spectral()
    z0 = core.sphere_renormalize(sd.eigenvectors[:, 0] + 0.9 * sd.eigenvectors[:, 1])
    fb = control.FeedbackConfig(gain=0.2, target_radius=0.1)
    rec = control.feedback_drive(sys_a, z0, fb)
    v1 = sd.ground_state()
    dists = [core.dist_to_circle(z, v1) for z in rec.states]
    assert dists[-1] <= fb.target_radius
    assert dists[-1] <= dists[0]
    assert rec.max_norm_drift <= 1e-10


# --------------------------------------------------------------- phase align


def test_phase_align_already_aligned(sys_a):
    v1, _ = anchors(sys_a)
    s = 0.37
    assert control.phase_align(sys_a, v1 * np.exp(1j * s), s, 0.1) == 0


def test_phase_align_single_step(sys_a):
    sd = sys_a.spectral()
    v1 = sd.ground_state()
    s = 0.2
    z = v1 * np.exp(1j * (s + sd.eigenvalues[0]))
    assert control.phase_align(sys_a, z, s, 0.05) == 1


def test_phase_align_random_phases(sys_a, rng):
    v1, _ = anchors(sys_a)
    for _ in range(100):
        z = v1 * np.exp(1j * rng.uniform(0.0, 2 * np.pi))
        k = control.phase_align(sys_a, z, 0.0, 0.2, k_max=5000)
        assert 0 <= k <= 5000
        drifted = z * np.exp(-1j * sys_a.spectral().eigenvalues[0] * k)
        # moduli are invariant under the diagonal drift
        assert abs(abs(core.inner(drifted, v1)) - abs(core.inner(z, v1))) <= 1e-12


def test_phase_align_needs_near_circle_state(sys_a):
    e2 = sys_a.spectral().eigenvectors[:, 1]
    with pytest.raises(errors.OutOfDomain):
        control.phase_align(sys_a, e2, 0.0, 0.1)


# ------------------------------------------------------------------ approach


def test_approach_trivial_plan(sys_a):
    v1, _ = anchors(sys_a)
    plan = control.approach(sys_a, v1, 0.0, 0.05)
    assert len(plan.stages) == 0
    assert plan.total_duration == 0.0
    assert plan.total_error <= 1e-12


def test_approach_random_starts(sys_a, rng):
    v1, _ = anchors(sys_a)
    for _ in range(6):
        z0 = random_state(rng, 2)
        plan = control.approach(sys_a, z0, 0.0, 0.05, rng=rng)
        assert plan.total_error <= 0.05 + 1e-9
        # independent replay hits the recorded endpoint exactly: the plan
        # stores what the propagator did, not an idealization of it
        z_end, _ = control.replay_plan(sys_a, plan)
        assert np.array_equal(z_end, plan.endpoint)
        assert np.linalg.norm(z_end - v1) <= 0.05 + 1e-9


def test_approach_tight_alignment(sys_a, rng):
    v1, _ = anchors(sys_a)
    z0 = random_state(rng, 2)
    plan = control.approach(sys_a, z0, 0.0, 0.05, rng=rng, align_delta=0.004)
    assert np.linalg.norm(plan.endpoint - v1) <= 0.004 + 1e-9


def test_approach_exhausts_retries(sys_a):
    e2 = sys_a.spectral().eigenvectors[:, 1]
    with pytest.raises(errors.ApproachFailed):
        control.approach(sys_a, e2, 0.0, 0.05, max_retries=0)


def test_approach_recovers_from_stall_with_kick(sys_a):
    e2 = sys_a.spectral().eigenvectors[:, 1]
    plan = control.approach(sys_a, e2, 0.0, 0.05,
                            rng=np.random.default_rng(7))
    assert plan.stages[0].label == "kick"
    assert plan.total_error <= 0.05 + 1e-9


# ------------------------------------------------- global plans and reversal


def test_global_steer_fixed_point(sys_a):
    v1, _ = anchors(sys_a)
    plan = control.global_steer(sys_a, v1, v1, delta=0.03, tol=1e-6)
    assert plan.total_error <= 1e-6


def test_global_steer_random_pairs(sys_a, rng):
    for _ in range(3):
        z1 = random_state(rng, 2)
        z2 = random_state(rng, 2)
        plan = control.global_steer(sys_a, z1, z2, delta=0.03, tol=1e-6, rng=rng)
        assert plan.total_error <= 1e-6
        assert plan.chaining_defect(sys_a) <= 1e-8
        end_a, _ = control.replay_plan(sys_a, plan)
        end_b, _ = control.replay_plan(sys_a, plan)
        assert np.array_equal(end_a, end_b)
        assert np.linalg.norm(end_a - z2) <= 1e-6


def test_reversed_signal_matches_time_mirror(rng):
    t = np.linspace(0.0, 1.0, 257)
    resonant = control.ControlSignal("resonant", 1.0,
                                     coeffs=rng.standard_normal(5),
                                     mu=np.array([1.0, 2.3]))
    rev = resonant.reversed()
    np.testing.assert_allclose(rev.evaluate(t), resonant.evaluate(1.0 - t),
                               atol=1e-12)
    np.testing.assert_allclose(rev.reversed().coeffs, resonant.coeffs, atol=1e-12)

    trig = control.ControlSignal("trig", 2.0, rows=rng.standard_normal((2, 8)))
    # midpoints only: evaluate is right-continuous, so the mirror identity
    # can only be asked for away from the segment boundaries
    t2 = (np.arange(200) + 0.5) / 100.0
    rev2 = trig.reversed()
    np.testing.assert_allclose(rev2.evaluate(t2), trig.evaluate(2.0 - t2),
                               atol=1e-12)


def test_plan_level_reversal_identity(sys_a, rng):
    # drive the transposed system forward, then replay the reversed drive
    # from the conjugated endpoint: it must return to the conjugated start
    rows = 0.4 * rng.standard_normal((2, 8))
    sig = control.ControlSignal("trig", 2.0, rows=rows)
    mids = dynamics._substep_grid(2.0, dynamics.DEFAULT_CONFIG)[2]
    w0 = random_state(rng, 2)
    w_end = dynamics.propagate(sys_a.transposed(), w0, sig.evaluate(mids),
                               2.0).endpoint
    back = dynamics.propagate(sys_a, np.conj(w_end),
                              sig.reversed().evaluate(mids), 2.0).endpoint
    assert np.linalg.norm(back - np.conj(w0)) <= 1e-8


# ------------------------------------------------------------------ robust


@pytest.fixture(scope="module")
def sys_a_cubic():
    return dataclasses.replace(core.system_a(),
                               nonlinearity=galerkin.power_nonlinearity(2))


def unit_plan(spec, z_i, z_f, res):
    return control.SteeringPlan(
        stages=(control.Stage("bridge", res.signal, 1.0),),
        start=z_i, endpoints=(res.endpoint,), target=z_f,
        total_error=res.residual, substeps_per_unit=256)


def test_robust_check_zero_eps_is_exact(sys_a_cubic, rng):
    v1, anchor2 = anchors(sys_a_cubic)
    z_i = ball_point(v1, 0.005, rng)
    z_f = ball_point(anchor2, 0.005, rng)
    res = control.local_steer(sys_a_cubic.with_epsilon(0.0), z_i, z_f)
    rep = control.robust_check(sys_a_cubic, unit_plan(sys_a_cubic, z_i, z_f, res),
                               delta=0.05, eps_values=(0.0,))
    assert rep.drifts[0] <= 1e-12


def test_robust_check_monotone_first_order(sys_a_cubic, rng):
    v1, anchor2 = anchors(sys_a_cubic)
    z_i = ball_point(v1, 0.005, rng)
    z_f = ball_point(anchor2, 0.005, rng)
    res = control.local_steer(sys_a_cubic.with_epsilon(0.0), z_i, z_f)
    rep = control.robust_check(sys_a_cubic, unit_plan(sys_a_cubic, z_i, z_f, res),
                               delta=0.05)
    assert rep.monotone
    assert rep.within_delta[-1]
    for ratio in rep.ratios:
        assert 10.0 / 3.0 <= ratio <= 30.0


def test_robust_check_requires_nonlinearity(sys_a, rng):
    v1, anchor2 = anchors(sys_a)
    res = control.local_steer(sys_a, v1, anchor2)
    with pytest.raises(errors.ConfigError):
        control.robust_check(sys_a, unit_plan(sys_a, v1, anchor2, res), delta=0.05)


# ------------------------------------------------------------- serialization


def test_plan_json_round_trip(sys_a, rng):
    z1 = random_state(rng, 2)
    z2 = random_state(rng, 2)
    plan = control.global_steer(sys_a, z1, z2, delta=0.03, tol=1e-6, rng=rng)
    data = control.plan_to_json(plan)
    back = control.plan_from_json(data)
    assert len(back.stages) == len(plan.stages)
    assert back.substeps_per_unit == plan.substeps_per_unit
    np.testing.assert_array_equal(back.start, plan.start)
    np.testing.assert_array_equal(back.target, plan.target)
    end_orig, _ = control.replay_plan(sys_a, plan)
    end_back, _ = control.replay_plan(sys_a, back)
    assert np.array_equal(end_orig, end_back)


def test_plan_json_rejects_unknown_keys(sys_a):
    v1, _ = anchors(sys_a)
    plan = control.approach(sys_a, v1, 0.0, 0.05)
    data = control.plan_to_json(plan)
    data["surprise"] = 1
    with pytest.raises(errors.ConfigError):
        control.plan_from_json(data)


def test_stage_duration_must_match_signal():
    sig = control.ControlSignal("zero", 2.0)
    with pytest.raises(errors.ConfigError):
        control.Stage("align", sig, 3.0)
