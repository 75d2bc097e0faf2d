from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from contraction_lab.errors import (
    BracketFailure,
    DimensionMismatch,
    EmptyInput,
    NonFinite,
    SizeMismatch,
    TooLarge,
)
from contraction_lab.ot import (
    CouplingPlan,
    EmpiricalMeasure,
    YoungFunction,
    brute_force_w,
    distance_matrix,
    gauge_norm,
    probe_young,
    wasserstein_inf,
    wasserstein_p,
    wasserstein_phi,
)

EXP = YoungFunction.from_expression("exp(r) - 1")


def _pair(rng, n, d):
    return EmpiricalMeasure(rng.normal(size=(n, d))), EmpiricalMeasure(rng.normal(size=(n, d)) + 0.5)


def test_measure_validation():
    with pytest.raises(EmptyInput):
        EmpiricalMeasure(np.zeros((0, 2)))
    with pytest.raises(NonFinite):
        EmpiricalMeasure([[0.0], [math.inf]])
    m = EmpiricalMeasure([1.0, 2.0])
    assert m.d == 1 and m.n == 2
    np.testing.assert_array_equal(m.weights, [0.5, 0.5])


def test_measure_csv_roundtrip(tmp_path):
    m = EmpiricalMeasure(np.random.default_rng(0).normal(size=(5, 3)))
    m.to_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(EmpiricalMeasure.from_csv(tmp_path / "m.csv").points, m.points)
    (tmp_path / "h.csv").write_text("x,y\n1,2\n3,4\n")
    np.testing.assert_array_equal(EmpiricalMeasure.from_csv(tmp_path / "h.csv").points, [[1, 2], [3, 4]])


def test_gauge_examples():
    assert gauge_norm([2.5, 2.5, 2.5], YoungFunction.power(3)) == pytest.approx(2.5, rel=1e-10)
    assert gauge_norm([2.5, 2.5], EXP) == pytest.approx(2.5 / math.log(2), rel=1e-10)
    assert gauge_norm([0.0, 1.0], YoungFunction.power(2)) == pytest.approx(math.sqrt(0.5), rel=1e-10)
    assert gauge_norm([0.0, 0.0], EXP) == 0.0
    assert gauge_norm([1.0, 4.0], YoungFunction.infinity()) == 4.0


def test_gauge_exponential_against_independent_root():
    oracle = brentq(lambda r: np.mean(np.exp(np.array([1.0, 2.0, 3.0]) / r) - 1) - 1, 1.0, 10.0, xtol=1e-14)
    value = gauge_norm([1.0, 2.0, 3.0], EXP)
    assert value == pytest.approx(oracle, rel=1e-10)
    assert value == pytest.approx(3.0420709367857133, rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=20), st.floats(0.01, 100.0), st.floats(1.0, 6.0))
def test_gauge_homogeneity(values, c, p):
    if max(values) == 0:
        return
    for phi in (YoungFunction.power(p), EXP):
        base = gauge_norm(values, phi)
        assert gauge_norm(np.array(values) * c, phi) == pytest.approx(c * base, rel=1e-9)


def test_gauge_errors():
    with pytest.raises(NonFinite):
        gauge_norm([1.0, math.nan], EXP)
    with pytest.raises(EmptyInput):
        gauge_norm([], EXP)
    with pytest.raises(SizeMismatch):
        gauge_norm([1.0, 2.0], EXP, weights=[1.0])
    bounded = YoungFunction.custom(lambda r: np.minimum(r, 0.5), name="bounded")
    with pytest.raises(BracketFailure):
        gauge_norm([1.0], bounded)


def test_young_probe():
    assert probe_young(EXP).ok and probe_young(EXP).superlinear
    assert probe_young(YoungFunction.power(1.0)).ok
    flat = probe_young(YoungFunction.custom(lambda r: np.minimum(r, 1.0)))
    assert not flat.increasing
    assert YoungFunction.power(2.5)(2.0) == 2.0**2.5
    with pytest.raises(ValueError):
        YoungFunction.power(0.5)


def test_wasserstein_examples():
    mu, nu = EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([2.0, 3.0])
    assert wasserstein_p(mu, nu, 1)[0] == 2.0
    assert wasserstein_inf(mu, nu)[0] == 2.0
    assert brute_force_w(mu, nu, 1) == 2.0
    same, plan = wasserstein_p(mu, mu, 2)
    assert same == 0.0 and list(plan.permutation) == [0, 1]
    assert wasserstein_inf(mu, mu)[0] == 0.0
    assert wasserstein_phi(mu, mu, EXP).value == 0.0


def test_square_corners_brute_force():
    mu = EmpiricalMeasure([[0.0, 0.0], [1.0, 1.0]])
    nu = EmpiricalMeasure([[1.0, 0.0], [0.0, 1.0]])
    assert brute_force_w(mu, nu, 2) == pytest.approx(1.0, rel=1e-15)
    assert brute_force_w(EmpiricalMeasure([[0.0]]), EmpiricalMeasure([[3.0]]), 2) == 3.0


@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
def test_translation_invariance(p):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(30, 3))
    v = np.array([0.3, -0.2, 0.1])
    value, _ = wasserstein_p(EmpiricalMeasure(pts), EmpiricalMeasure(pts + v), p)
    assert value == pytest.approx(np.linalg.norm(v), rel=1e-12)


def test_against_brute_force_many_instances():
    rng = np.random.default_rng(2)
    for _ in range(60):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        mu, nu = _pair(rng, n, d)
        for p in (1.0, 2.0, 3.0, math.inf):
            value, plan = wasserstein_p(mu, nu, p)
            assert value == pytest.approx(brute_force_w(mu, nu, p), abs=1e-9)
            assert plan.is_feasible()


def test_phi_power_matches_wp_and_custom_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(2, 17))
        mu, nu = _pair(rng, n, 2)
        assert wasserstein_phi(mu, nu, YoungFunction.power(2)).value == pytest.approx(
            wasserstein_p(mu, nu, 2)[0], rel=1e-6)
    for _ in range(5):
        mu, nu = _pair(rng, 5, 2)
        res = wasserstein_phi(mu, nu, EXP)
        # r is feasible iff the best plan's mean Phi(D / r) is at most 1
        assert brute_force_w(mu, nu, lambda D: np.expm1(D / res.value)) <= 1 + 1e-9
        assert brute_force_w(mu, nu, lambda D: np.expm1(D / (res.value * (1 - 1e-6)))) > 1


def test_phi_single_atoms_and_normalisations():
    res = wasserstein_phi(EmpiricalMeasure([[0.0, 0.0]]), EmpiricalMeasure([[3.0, 4.0]]), EXP)
    assert res.value == pytest.approx(5.0 / math.log(2), rel=1e-9)
    assert res.phi_inv_one == pytest.approx(math.log(2), rel=1e-12)
    assert res.multiplied == pytest.approx(5.0, rel=1e-9)
    assert res.divided == pytest.approx(5.0 / math.log(2) ** 2, rel=1e-9)
    value, plan = res
    assert plan.is_feasible()


def test_metric_properties_and_p_monotonicity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        a, b, c = (EmpiricalMeasure(rng.normal(size=(n, 2)) + s) for s in (0.0, 0.4, -0.3))
        for p in (1.0, 2.0, 4.0):
            ab, ba = wasserstein_p(a, b, p)[0], wasserstein_p(b, a, p)[0]
            assert ab == ba
            assert ab <= wasserstein_p(a, c, p)[0] + wasserstein_p(c, b, p)[0] + 1e-9
        vals = [wasserstein_p(a, b, p)[0] for p in (1, 1.5, 2, 3, 8)]
        assert all(x <= y + 1e-12 for x, y in zip(vals, vals[1:]))
        bottleneck = wasserstein_inf(a, b)[0]
        assert vals[-1] <= bottleneck + 1e-12
        w64 = wasserstein_p(a, b, 64)[0]
        assert n ** (-1 / 64) * bottleneck - 1e-12 <= w64 <= bottleneck + 1e-12
        if n <= 3:
            assert w64 == pytest.approx(bottleneck, rel=0.02)


def test_plan_objective_and_json():
    rng = np.random.default_rng(5)
    mu, nu = _pair(rng, 8, 3)
    value, plan = wasserstein_p(mu, nu, 2)
    D = distance_matrix(mu, nu)
    assert np.sqrt(np.mean(D[np.arange(8), plan.permutation] ** 2)) == pytest.approx(value, abs=1e-12)
    np.testing.assert_allclose(plan.matrix().sum(axis=0), 1 / 8, atol=1e-12)
    back = CouplingPlan.from_json(plan.to_json())
    np.testing.assert_array_equal(back.permutation, plan.permutation)
    assert back.value == plan.value
    assert not CouplingPlan(np.array([0, 0]), 0.0).is_feasible()


def test_size_and_dimension_errors():
    with pytest.raises(SizeMismatch):
        wasserstein_p(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([0.0]))
    with pytest.raises(DimensionMismatch):
        wasserstein_inf(EmpiricalMeasure([[0.0, 1.0]]), EmpiricalMeasure([[0.0]]))
    with pytest.raises(TooLarge):
        brute_force_w(EmpiricalMeasure(np.arange(8.0)), EmpiricalMeasure(np.arange(8.0)))
