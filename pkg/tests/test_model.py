from __future__ import annotations

import math

import numpy as np
import pytest

from contraction_lab.errors import ArityMismatch, ConfigError
from contraction_lab.model import (
    BUILTINS,
    builtin,
    check_linear_growth,
    expression_twin,
    model_from_config,
    probe_local_lipschitz,
)


@pytest.mark.parametrize("name,params", [
    ("ou", {"K": 1.7, "d": 2}),
    ("brownian", {"d": 3}),
    ("double_well", {}),
    ("example22", {"c0": 1.3, "theta": 1.0, "delta": 0.5, "d": 2}),
    ("example22", {"c0": 1.0, "theta": 0.5, "delta": 0.0, "d": 3}),
])
def test_builtin_matches_expression_twin(name, params):
    model = builtin(name, **params)
    twin = expression_twin(model)
    X = np.random.default_rng(1).uniform(-4, 4, (1000, model.d))
    b, bt = model.b(X), twin.b(X)
    np.testing.assert_allclose(bt, b, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(twin.sigma(X), model.sigma(X), rtol=1e-12, atol=0)


def test_registry_is_complete():
    assert set(BUILTINS) == {"ou", "brownian", "double_well", "example22", "constant_sigma"}


def test_linear_growth_ou():
    assert check_linear_growth(builtin("ou", K=1.0), 20.0, 2000, seed=3).C_hat <= 1.0


def test_linear_growth_double_well():
    rep = check_linear_growth(builtin("double_well"), 10.0, 5000, seed=0)
    assert 1.0 <= rep.C_hat <= 2.0 + 1e-12
    assert rep.C_hat == pytest.approx(2.0, abs=1e-12)  # the origin is always probed


def test_linear_growth_example22_bounded_by_diffusion():
    model = builtin("example22", c0=1.0, theta=1.0, d=2)
    assert check_linear_growth(model, 5.0, 5000, seed=0).C_hat <= 2.0 + 1e-12


def test_grid_growth_monotone_in_box():
    model = builtin("double_well")
    values = [check_linear_growth(model, r, 1, grid_spacing=0.05).C_hat for r in (0.5, 1, 2, 4, 8)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_lipschitz_probe_finite():
    probe = probe_local_lipschitz(builtin("double_well"), 2.0, 10_000)
    assert math.isfinite(probe.drift_max) and probe.drift_max <= 1 + 3 * 4.0
    assert probe.diffusion_max == 0.0


def test_expression_model_from_config():
    model = model_from_config({"d": 1, "m": 1, "drift": ["-x1"], "diffusion": [["1 + 0.5*sin(x1)"]]})
    assert model.sigma(np.array([[0.0]]))[0, 0, 0] == 1.0
    assert model.constant_sigma is None


def test_config_arity_checked():
    with pytest.raises(ArityMismatch):
        model_from_config({"d": 2, "m": 1, "drift": ["-x1"], "diffusion": [["1"], ["1"]]})


def test_unknown_builtin_points_at_field():
    with pytest.raises(ConfigError) as info:
        builtin("nope")
    assert info.value.pointer == "/model/builtin"


def test_constant_sigma_builtin():
    m = builtin("constant_sigma", matrix=[[2.0, 0.0], [1.0, 1.0]], K=0.5)
    X = np.array([[1.0, -2.0]])
    np.testing.assert_allclose(m.b(X), [[-0.5, 1.0]])
    np.testing.assert_allclose(m.a(X)[0], [[4.0, 2.0], [2.0, 2.0]])
