import numpy as np
import pytest

from spheremix import core, errors, galerkin
from spheremix.core import inner


def test_matrix_element_constant_potential_is_identity():
    one = galerkin.PolynomialPotential((1.0, 0.0, 0.0))
    for i in range(1, 5):
        for j in range(1, 5):
            val = galerkin.matrix_element(one, i, j)
            assert val == pytest.approx(1.0 if i == j else 0.0, abs=1e-12)


def test_matrix_element_quadratic_anchors():
    x2 = galerkin.PolynomialPotential((0.0, 0.0, 1.0))
    assert galerkin.matrix_element(x2, 1, 1) == pytest.approx(
        1.0 / 3.0 - 0.5 / np.pi**2, abs=1e-12
    )
    assert galerkin.matrix_element(x2, 1, 2) == pytest.approx(
        -16.0 / (9.0 * np.pi**2), abs=1e-12
    )
    assert galerkin.matrix_element(x2, 1, 3) == pytest.approx(
        3.0 / (8.0 * np.pi**2), abs=1e-12
    )


def test_matrix_element_node_doubling_stable():
    v = galerkin.PolynomialPotential((0.2, -1.0, 0.5, 0.0, 2.0))
    a = galerkin.matrix_element(v, 3, 5, nodes=200)
    b = galerkin.matrix_element(v, 3, 5, nodes=400)
    assert abs(a - b) <= 1e-12


def test_build_exact_free_spectrum_and_symmetry():
    spec = galerkin.build(galerkin.PolynomialPotential((0.0, 0.0, 1.0)), n=5)
    assert np.array_equal(np.diag(spec.lam), (np.arange(1, 6) * np.pi) ** 2)
    assert np.max(np.abs(spec.lam - np.diag(np.diag(spec.lam)))) == 0.0
    assert np.max(np.abs(spec.b - spec.b.T)) == 0.0
    assert np.max(np.abs(spec.b.imag)) == 0.0


def test_cubic_nonlinearity_harmonics():
    # projecting sin^3 onto the sine modes: first and third harmonics only
    nl = galerkin.power_nonlinearity(4, sigma=2.0)
    e1 = np.zeros(4, dtype=complex)
    e1[0] = 1.0
    f = nl.apply(e1)
    assert f[0] == pytest.approx(1.5, abs=1e-12)
    assert f[1] == pytest.approx(0.0, abs=1e-12)
    assert f[2] == pytest.approx(-0.5, abs=1e-12)
    assert f[3] == pytest.approx(0.0, abs=1e-12)


def test_quintic_nonlinearity_leading_mode():
    nl = galerkin.power_nonlinearity(4, sigma=4.0)
    e1 = np.zeros(4, dtype=complex)
    e1[0] = 1.0
    assert nl.apply(e1)[0] == pytest.approx(2.5, abs=1e-12)  # 8 * int sin^6 = 5/2


def test_nonlinearity_zero_and_realness():
    nl = galerkin.power_nonlinearity(3)
    assert np.all(nl.apply(np.zeros(3, dtype=complex)) == 0.0)
    z = np.array([0.3, -0.8, 0.5], dtype=complex)
    assert np.max(np.abs(nl.apply(z).imag)) <= 1e-14


def test_nonlinearity_phase_homogeneity(rng):
    nl = galerkin.power_nonlinearity(3)
    z = rng.normal(size=3) + 1j * rng.normal(size=3)
    ph = np.exp(0.7j)
    assert np.linalg.norm(nl.apply(ph * z) - ph * nl.apply(z)) <= 1e-12


def test_nonlinearity_tangency(rng):
    nl = galerkin.power_nonlinearity(5, sigma=2.0)
    for _ in range(20):
        z = rng.normal(size=5) + 1j * rng.normal(size=5)
        assert abs(inner(nl.apply(z), z).imag) <= 1e-12 * np.linalg.norm(z) ** 4


def test_condition_check_quadratic_passes():
    rep = galerkin.condition_check(galerkin.PolynomialPotential((0.0, 0.0, 1.0)), n=5)
    assert rep.passed
    assert rep.min_gap > 0.0 and rep.min_coupling > 0.0


def test_condition_check_zero_potential_fails():
    rep = galerkin.condition_check(galerkin.PolynomialPotential((0.0, 0.0, 0.0)), n=3)
    assert not rep.passed


def test_condition_check_shifted_potential_kills_first_coupling():
    # subtracting <x^2 e1, e1> zeroes the diagonal coupling to the ground mode
    c_star = 1.0 / 3.0 - 0.5 / np.pi**2
    shifted = galerkin.PolynomialPotential((0.0, 0.0, 1.0)).shifted(-c_star)
    rep = galerkin.condition_check(shifted, n=3)
    assert not rep.passed
    joined = " ".join(rep.reasons).lower()
    assert "coupling" in joined and "v1" in joined


def test_potential_parser_forms():
    p = galerkin.PolynomialPotential.from_string("x^2")
    assert np.array_equal(p.coefficients, [0.0, 0.0, 1.0])
    p = galerkin.PolynomialPotential.from_string("1 + 0.5*x^3 - x")
    assert np.array_equal(p.coefficients, [1.0, -1.0, 0.0, 0.5])
    p = galerkin.PolynomialPotential.from_string("2x + x**2")
    assert np.array_equal(p.coefficients, [0.0, 2.0, 1.0])
    with pytest.raises(errors.ConfigError):
        galerkin.PolynomialPotential.from_string("sin(x)")
    with pytest.raises(errors.ConfigError):
        galerkin.PolynomialPotential.from_string("")


def test_potential_callable_and_shift():
    p = galerkin.PolynomialPotential.from_string("1 + 2x + x^2")
    assert p(2.0) == pytest.approx(9.0)
    assert p.shifted(-1.0)(2.0) == pytest.approx(8.0)


def test_system_b_matches_fixture():
    via_fixture = core.fixture("SYS-B")
    direct = galerkin.system_b()
    assert np.array_equal(via_fixture.lam, direct.lam)
    assert np.array_equal(via_fixture.b, direct.b)
    assert via_fixture.epsilon == direct.epsilon == 0.0
    assert via_fixture.n == 3


def test_galerkin_system_json_roundtrip():
    spec = galerkin.build(
        galerkin.PolynomialPotential((0.0, 1.0, 0.5)), n=4, sigma=2.0, epsilon=0.05
    )
    back = core.system_from_json(core.system_to_json(spec))
    assert np.allclose(back.lam, spec.lam)
    assert np.allclose(back.b, spec.b)
    z = np.array([0.5, 0.1j, -0.3, 0.2], dtype=complex)
    assert np.linalg.norm(back.f(z) - spec.f(z)) <= 1e-12


def test_grid_too_coarse_rejected():
    with pytest.raises(errors.ConfigError):
        galerkin.power_nonlinearity(10, grid=12)
