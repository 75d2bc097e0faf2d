from __future__ import annotations

import math

import numpy as np
import pytest

from contraction_lab.coupling import CouplingKind
from contraction_lab.errors import InsufficientDecay, StencilError
from contraction_lab.harness import (
    COUPLING,
    EMPIRICAL_OT,
    ContractionCurve,
    ExperimentConfig,
    contraction_experiment,
    coupling_time_experiment,
    distance_label,
    equilibrium_experiment,
    fit_rate,
    kuwada_check,
    lyapunov_curve,
    survival_from_times,
)
from contraction_lab.model import builtin
from contraction_lab.ot import YoungFunction
from contraction_lab.theory import lyapunov_constants

R0 = 2 * math.sqrt(2)


def _curve(t, w, se=None):
    return ContractionCurve(t, w, np.zeros_like(w) if se is None else se, COUPLING, "p2", 100)


def test_fit_exact_exponential():
    t = np.linspace(0, 3, 31)
    rep = fit_rate(_curve(t, 2 * np.exp(-3 * t)))
    assert rep.c_hat == pytest.approx(2.0, abs=1e-10)
    assert rep.lam_hat == pytest.approx(3.0, abs=1e-10)
    assert rep.window[0] > 0 and rep.n_points >= 4


def test_fit_rejects_flat_and_noisy_curves():
    t = np.linspace(0, 3, 31)
    with pytest.raises(InsufficientDecay):
        fit_rate(_curve(t, np.ones_like(t)))
    w = np.exp(-t)
    with pytest.raises(InsufficientDecay):
        fit_rate(_curve(t, w, se=w))


def test_fit_counts_envelope_violations():
    t = np.linspace(0, 2, 21)
    rate = lyapunov_constants(0.0, 1.0, 1.0)
    rep = fit_rate(_curve(t, 5 * np.exp(-t)), theory=rate, rho0=1.0)
    assert rep.theory_c == rate.c and rep.n_checked == 21
    assert rep.envelope_violations == int(np.sum(5 * np.exp(-t) > rate.c * np.exp(-rate.lam * t)))


def test_distance_labels():
    assert distance_label(2.0) == "p2"
    assert distance_label(math.inf) == "inf"
    assert distance_label(YoungFunction.power(3)) == "phi[power{p=3}]"


def test_ou_synchronous_rate_and_invariants():
    cfg = ExperimentConfig(builtin("ou", K=1.0), CouplingKind.synchronous(), [1.0], [0.0], 5.0, 1e-3,
                           n_paths=64, grid_dt=0.1, distances=(1.0, 2.0, math.inf), n_ot=64)
    res = contraction_experiment(cfg)
    for label in ("p1", "p2", "inf"):
        up, ot = res.get(label, COUPLING), res.get(label, EMPIRICAL_OT)
        assert up.values[0] == cfg.rho0 and ot.values[0] == cfg.rho0
        assert np.all(up.values >= 0) and np.all(ot.values >= 0)
        assert res.ordering_violations[label] == 0
    up = res.get("p2", COUPLING)
    k = int(round(1.0 / 0.1))
    assert up.values[k] == pytest.approx(math.exp(-1.0), rel=5e-3)
    assert fit_rate(up, n_boot=20).lam_hat == pytest.approx(1.0, rel=0.02)


def test_young_distance_in_experiment():
    cfg = ExperimentConfig(builtin("ou", K=1.0), CouplingKind.synchronous(), [1.0], [0.0], 1.0, 1e-2,
                           n_paths=16, grid_dt=0.5, distances=(YoungFunction.power(2),), n_ot=16)
    res = contraction_experiment(cfg)
    np.testing.assert_allclose(res.curves[0].values, [1.0, 0.99**50, 0.99**100], rtol=1e-9)


def test_double_well_hybrid_is_deterministic_and_below_cap():
    kind = CouplingKind.hybrid(0.95 * math.sqrt(2), R0)
    base = dict(model=builtin("double_well"), coupling=kind, x=[0.0], y=[1.0], horizon=2.0, dt=1e-3,
                n_paths=200, grid_dt=0.1, distances=(1.0,), seed=9, n_ot=100)
    a = contraction_experiment(ExperimentConfig(**base))
    b = contraction_experiment(ExperimentConfig(**base, workers=3))
    for ca, cb in zip(a.curves, b.curves):
        np.testing.assert_array_equal(ca.values, cb.values)
        np.testing.assert_array_equal(ca.stderr, cb.stderr)
    up = a.get("p1", COUPLING)
    assert np.all(up.values <= R0 + 1)
    assert a.ordering_violations["p1"] == 0
    rate = lyapunov_constants(2.0, 1.0, R0, lambda0=0.95 * math.sqrt(2))
    t, mean, se = lyapunov_curve(a.ensemble, rate)
    assert np.all(mean <= rate.rho_bar(1.0) * np.exp(-rate.c1 * t) + 3 * se + 1e-12)


def test_survival_identities():
    T = np.array([0.5, np.nan, 1.5, 0.0])
    S, se = survival_from_times(T, np.array([0.0, 1.0, 2.0]))
    np.testing.assert_allclose(S, [0.75, 0.5, 0.25])
    cfg = ExperimentConfig(builtin("brownian"), CouplingKind.reflection(1.0), [0.0], [0.0], 1.0, 1e-2, n_paths=8)
    assert np.all(coupling_time_experiment(cfg).survival == 0)
    with pytest.raises(ValueError):
        coupling_time_experiment(ExperimentConfig(builtin("brownian"), CouplingKind.synchronous(), [0.0], [1.0],
                                                  1.0, 1e-2, n_paths=8))


def test_survival_matches_reflection_principle():
    cfg = ExperimentConfig(builtin("brownian"), CouplingKind.reflection(1.0), [0.0], [1.0], 1.0, 1e-3,
                           n_paths=4000, grid_dt=0.25, seed=4)
    curve = coupling_time_experiment(cfg, thresholds=(1e-3,))
    for k, t in enumerate(curve.times[1:], start=1):
        assert abs(curve.survival[k] - math.erf(1 / (4 * math.sqrt(t)))) <= 3 * curve.stderr[k] + 5e-3
    assert "0.001" in curve.threshold_sensitivity


def test_kuwada_linear_and_constant():
    ou = builtin("ou", K=1.0)
    lin = kuwada_check(ou, "2*x1 + 1", 2.0, 0.5, [[0.0], [1.0]], dt=1e-2, n_paths=2000, K_p=1.0)
    np.testing.assert_allclose(lin.ratio, 1.0, rtol=1e-2)
    const = kuwada_check(ou, "3", 2.0, 0.5, [[0.5]], dt=1e-2, n_paths=100, K_p=1.0)
    assert const.ratio[0] == 0 and const.passed
    with pytest.raises(StencilError):
        kuwada_check(ou, "sin(x1)", 2.0, 0.5, [[0.1]], dt=1e-2, n_paths=10, K_p=1.0, max_eta=0.01)


def test_kuwada_sine_small():
    rep = kuwada_check(builtin("ou", K=1.0), "sin(x1)", 2.0, 0.5, [[-1.0], [0.3], [2.0]], dt=1e-2,
                       n_paths=2000, K_p=1.0)
    assert rep.passed and rep.K_p == 1.0


def test_equilibrium_small():
    ou = builtin("ou", K=1.0)
    n = 1024
    curve = equilibrium_experiment(ou, [2.0], [0.5, 2.0], 1e-2, n=n, seed=1, spacing=2.0)
    for t, v, se in zip(curve.times, curve.values, curve.stderr):
        m, s = 2 * math.exp(-t), math.sqrt(1 - math.exp(-2 * t))
        exact = math.hypot(m, s - 1)
        assert abs(v - exact) <= 3 * (se + n**-0.5)
