from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contraction_lab.coupling import (
    CoupledState,
    CouplingKind,
    CutoffProfile,
    PairPath,
    cutoff_eval,
    distance_moments,
    noise_width,
    simulate_pair,
    simulate_pairs,
    step_pair,
)
from contraction_lab.errors import EigenvalueViolation, EmptyInput
from contraction_lab.model import builtin, model_from_config

R0 = 2 * math.sqrt(2)
LAM_DW = 0.95 * math.sqrt(2)


def test_cutoff_examples():
    prof = CutoffProfile(2.0)
    assert cutoff_eval(prof, 1.0) == (1.0, 0.0)
    assert cutoff_eval(prof, 3.0) == (0.0, 1.0)
    h, g = cutoff_eval(prof, 2.5)
    assert h == pytest.approx(math.sqrt(2) / 2, abs=1e-15) and g == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.1, 10), st.floats(0, 20))
def test_cutoff_partition_of_unity_and_monotone(r0, r):
    prof = CutoffProfile(r0)
    h, g = cutoff_eval(prof, r)
    assert 0 <= h <= 1 and 0 <= g <= 1
    assert h * h + g * g == pytest.approx(1.0, abs=1e-15)
    assert cutoff_eval(prof, r + 0.01)[0] <= h


@pytest.mark.parametrize("glue", [0.0, 1.0])
def test_cutoff_is_c1_at_glue_points(glue):
    prof = CutoffProfile(1.5)
    r = prof.r0 + glue
    for idx in (0, 1):
        f = lambda x: cutoff_eval(prof, x)[idx]
        left = [(f(r) - f(r - e)) / e for e in (1e-4, 5e-5)]
        right = [(f(r + e) - f(r)) / e for e in (1e-4, 5e-5)]
        # Richardson: one-sided derivatives extrapolated to zero step
        dl, dr = 2 * left[1] - left[0], 2 * right[1] - right[0]
        assert abs(dl - dr) <= 1e-6


def test_synchronous_step_contracts_exactly():
    K, dt = 1.7, 0.01
    model = builtin("ou", K=K, d=2)
    rng = np.random.default_rng(0)
    state = CoupledState(0.0, np.array([1.0, -2.0]), np.array([0.3, 0.5]))
    nxt = step_pair(model, CouplingKind.synchronous(), state, dt, rng.normal(size=noise_width(model)))
    np.testing.assert_allclose(nxt.X - nxt.Y, (1 - K * dt) * (state.X - state.Y), rtol=1e-14)


def test_reflection_step_one_dimensional_increment():
    dt = 1e-3
    model = builtin("brownian", d=1)
    block = np.array([0.3, -0.7, 1.1])
    state = CoupledState(0.0, np.array([1.0]), np.array([0.0]))
    nxt = step_pair(model, CouplingKind.reflection(1.0), state, dt, block)
    assert nxt.rho == pytest.approx(1.0 + 2 * math.sqrt(2) * math.sqrt(dt) * block[1], abs=1e-15)


@pytest.mark.parametrize("kind", [CouplingKind.synchronous(), CouplingKind.reflection(1.0), CouplingKind.hybrid(1.0, 1.0)])
def test_coupled_state_stays_glued(kind):
    model = builtin("brownian", d=2)
    state = CoupledState(0.5, np.array([1.0, 1.0]), np.array([1.0, 1.0]), True, 0.5)
    nxt = step_pair(model, kind, state, 0.01, np.random.default_rng(1).normal(size=noise_width(model)))
    np.testing.assert_array_equal(nxt.X, nxt.Y)
    assert nxt.coupled and nxt.T == 0.5


def test_hybrid_degenerates_to_reflection_and_synchronous():
    model = builtin("double_well", d=2)
    lam = 1.2
    rng = np.random.default_rng(4)
    for _ in range(50):
        block = rng.normal(size=noise_width(model))
        x, y = rng.normal(size=2), rng.normal(size=2)
        state = CoupledState(0.0, x, y)
        far = step_pair(model, CouplingKind.hybrid(lam, 1e9), state, 1e-3, block)
        refl = step_pair(model, CouplingKind.reflection(lam), state, 1e-3, block)
        np.testing.assert_array_equal(far.X, refl.X)
        np.testing.assert_array_equal(far.Y, refl.Y)
        # beyond r0 + 1 the reflected channel is off and both sides share the noise
        y_far = x + 1.5 * (y - x) / np.linalg.norm(y - x)
        off = step_pair(model, CouplingKind.hybrid(lam, 0.0), CoupledState(0.0, x, y_far), 1e-3, block)
        drift = (model.b(x[None])[0] - model.b(y_far[None])[0]) * 1e-3
        np.testing.assert_allclose(off.X - off.Y, x - y_far + drift, atol=1e-14)


def test_simulate_pair_ou_deterministic():
    path = simulate_pair(builtin("ou", K=1.0), CouplingKind.synchronous(), [1.0], [0.0], 1.0, 1e-3, seed=3)
    assert path.rho[-1] == pytest.approx((1 - 1e-3) ** 1000, rel=1e-12)
    assert path.T is None


def test_identical_start_is_coupled():
    path = simulate_pair(builtin("brownian"), CouplingKind.reflection(1.0), [0.4], [0.4], 1.0, 1e-2, seed=0)
    assert path.T == 0.0 and np.all(path.rho == 0)


@pytest.mark.parametrize("compiled", [False, True])
def test_exchange_symmetry_and_determinism(compiled):
    model = builtin("double_well")
    kind = CouplingKind.hybrid(LAM_DW, R0)
    a = simulate_pairs(model, kind, [-0.4], [1.1], 2.0, 1e-3, seed=8, n_paths=64, grid_dt=0.1, compiled=compiled)
    b = simulate_pairs(model, kind, [1.1], [-0.4], 2.0, 1e-3, seed=8, n_paths=64, grid_dt=0.1, compiled=compiled)
    c = simulate_pairs(model, kind, [-0.4], [1.1], 2.0, 1e-3, seed=8, n_paths=64, grid_dt=0.1, compiled=compiled,
                       workers=3)
    np.testing.assert_array_equal(a.rho, b.rho)
    np.testing.assert_array_equal(a.rho, c.rho)
    np.testing.assert_array_equal(a.T, c.T)


@pytest.mark.parametrize("name,kind,x,y", [
    ("brownian", CouplingKind.reflection(1.0), [0.0], [1.0]),
    ("double_well", CouplingKind.hybrid(LAM_DW, R0), [-1.0], [2.5]),
    ("ou", CouplingKind.synchronous(), [0.0], [1.0]),
    ("example22", CouplingKind.reflection(0.9), [0.5, -1.0], [-0.5, 2.0]),
])
def test_compiled_route_matches_numpy_route(name, kind, x, y):
    params = {"d": 2} if name == "example22" else {}
    model = builtin(name, **params)
    kw = dict(seed=11, n_paths=200, grid_dt=0.05)
    a = simulate_pairs(model, kind, x, y, 1.0, 1e-3, compiled=False, **kw)
    b = simulate_pairs(model, kind, x, y, 1.0, 1e-3, compiled=True, **kw)
    np.testing.assert_allclose(b.rho, a.rho, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(np.isnan(a.T), np.isnan(b.T))
    np.testing.assert_allclose(b.T, a.T, rtol=0, atol=1e-12)


def test_state_dependent_diffusion_runs_and_checks_lambda():
    model = model_from_config({"d": 1, "m": 1, "drift": ["-x1"], "diffusion": [["sqrt(2 + sin(x1))"]]})
    ens = simulate_pairs(model, CouplingKind.reflection(0.9), [0.0], [1.0], 1.0, 1e-2, seed=2, n_paths=20)
    assert np.all(ens.rho[~np.isnan(ens.rho)] >= 0)
    with pytest.raises(EigenvalueViolation):
        simulate_pairs(model, CouplingKind.reflection(1.1), [0.0], [1.0], 1.0, 1e-2, seed=2, n_paths=2)


def test_rho_is_zero_after_coupling():
    ens = simulate_pairs(builtin("brownian"), CouplingKind.reflection(1.0), [0.0], [0.5], 1.0, 1e-3, seed=1,
                         n_paths=100, grid_dt=0.01)
    for path in ens:
        assert np.all(path.rho >= 0)
        if path.T is not None:
            assert np.all(path.rho[path.coupled] == 0)


def test_a_priori_bound_for_hybrid_double_well():
    dt = 1e-4
    ens = simulate_pairs(builtin("double_well"), CouplingKind.hybrid(LAM_DW, R0), [-2.0], [2.0], 1.0, dt,
                         seed=5, n_paths=100, grid_dt=dt)
    bound = max(R0 + 1, 4.0) + 3 * math.sqrt(8) * math.sqrt(dt)
    assert int(np.sum(ens.rho > bound)) == 0


def test_quadratic_variation_of_reflected_distance():
    dt = 1e-5
    ens = simulate_pairs(builtin("brownian"), CouplingKind.reflection(1.0), [0.0], [1.5], 0.2, dt, seed=3,
                         n_paths=20, grid_dt=dt)
    checked = 0
    for path in ens:
        stop = len(path.t) - 1 if path.T is None else int(round(path.T / dt)) - 1
        if stop * dt < 0.1:
            continue
        qv = np.sum(np.diff(path.rho[: stop + 1]) ** 2) / (stop * dt)
        assert qv == pytest.approx(8.0, rel=0.05)
        checked += 1
    assert checked >= 10


def test_hybrid_quadratic_variation_below_r0():
    dt = 1e-4
    ens = simulate_pairs(builtin("double_well"), CouplingKind.hybrid(LAM_DW, R0), [-1.0], [1.0], 0.5, dt,
                         seed=6, n_paths=50, grid_dt=dt)
    incs = []
    for path in ens:
        stop = len(path.t) - 1 if path.T is None else int(round(path.T / dt)) - 1
        r = path.rho[: stop + 1]
        inside = r[:-1] <= R0
        incs.append(np.diff(r)[inside] ** 2)
    rate = np.concatenate(incs).mean() / dt
    assert rate == pytest.approx(8 * LAM_DW**2, rel=0.05)


def test_survival_quick_check():
    ens = simulate_pairs(builtin("brownian"), CouplingKind.reflection(1.0), [0.0], [1.0], 1.0, 1e-4, seed=0,
                         n_paths=4000)
    p = np.mean(np.isnan(ens.T))
    assert abs(p - math.erf(0.25)) <= 3 * math.sqrt(p * (1 - p) / 4000)


def test_path_roundtrips(tmp_path):
    path = simulate_pair(builtin("brownian"), CouplingKind.reflection(1.0), [0.0], [0.3], 0.5, 1e-3, seed=2,
                         grid_dt=0.01)
    back = PairPath.from_bytes(path.to_bytes())
    np.testing.assert_array_equal(back.t, path.t)
    np.testing.assert_array_equal(back.rho, path.rho)
    assert back.T == path.T
    path.to_csv(tmp_path / "p.csv")
    again = PairPath.from_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(again.rho, path.rho)
    # the CSV carries the grid flag only, so T comes back at grid resolution
    np.testing.assert_array_equal(again.coupled, path.coupled)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "t,rho,coupled"


def test_distance_moments_constant_and_empty():
    t = np.linspace(0, 1, 5)
    paths = [PairPath(t, np.full(5, 0.7), None, 0, i) for i in range(4)]
    curve = distance_moments(paths, 3.0)
    np.testing.assert_array_equal(curve.values, np.full(5, 0.7))
    np.testing.assert_array_equal(curve.stderr, np.zeros(5))
    with pytest.raises(EmptyInput):
        distance_moments([], 2.0)


def test_synchronous_ensemble_moments_equal_single_path():
    model = builtin("ou", K=0.5)
    ens = simulate_pairs(model, CouplingKind.synchronous(), [0.0], [2.0], 1.0, 1e-2, seed=0, n_paths=30)
    single = simulate_pair(model, CouplingKind.synchronous(), [0.0], [2.0], 1.0, 1e-2, seed=0)
    np.testing.assert_allclose(distance_moments(ens, 2.0).values, single.rho, rtol=1e-12)


def test_double_well_moments_below_cap():
    ens = simulate_pairs(builtin("double_well"), CouplingKind.hybrid(LAM_DW, R0), [0.0], [1.0], 3.0, 1e-3,
                         seed=1, n_paths=300, grid_dt=0.1)
    assert np.all(distance_moments(ens, 1.0).values <= max(R0 + 1, 1.0))
