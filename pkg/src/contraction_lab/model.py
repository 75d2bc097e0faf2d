"""SDE models ``dX = b(X) dt + sqrt(2) sigma(X) dB`` on R^d with m-dimensional noise.

Fields are evaluated in batches: ``drift(X)`` maps ``(n, d) -> (n, d)`` and
``diffusion(X)`` maps ``(n, d) -> (n, d, m)``. A field is either a builtin
(closed-form numpy code) or a list of parsed expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import dsl
from .errors import ArityMismatch, ConfigError, EvaluationError


def _as_batch(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {X.shape[1]}")
    return X


class VectorField:
    d: int
    name: str = "field"

    def __call__(self, X) -> np.ndarray:
        X = _as_batch(X, self.d)
        return self.evaluate(X)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_expressions(self) -> list[str]:
        """Equivalent expression-language encoding, one string per component."""
        raise NotImplementedError

    def kernel_spec(self) -> tuple[int, tuple[float, ...]] | None:
        """(code, params) for the compiled pair stepper, or None if it has no compiled form."""
        return None


class MatrixField:
    d: int
    m: int
    name: str = "field"

    def __call__(self, X) -> np.ndarray:
        X = _as_batch(X, self.d)
        return self.evaluate(X)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def constant_value(self) -> np.ndarray | None:
        """The matrix if the field does not depend on x, else None."""
        return None

    def to_expressions(self) -> list[list[str]]:
        raise NotImplementedError


class ExprVectorField(VectorField):
    def __init__(self, nodes: Sequence[dsl.Node], d: int):
        self.nodes = tuple(nodes)
        self.d = d
        self.name = "expr"

    def evaluate(self, X):
        return np.stack([dsl.evaluate(node, X) for node in self.nodes], axis=1)

    def to_expressions(self):
        return [dsl.to_source(node) for node in self.nodes]


class ExprMatrixField(MatrixField):
    def __init__(self, rows: Sequence[Sequence[dsl.Node]], d: int, m: int):
        self.rows = tuple(tuple(r) for r in rows)
        self.d, self.m = d, m
        self.name = "expr"
        self._const = None
        if all(dsl.is_constant(node) for row in self.rows for node in row):
            probe = np.zeros((1, d))
            self._const = np.array(
                [[dsl.evaluate(node, probe)[0] for node in row] for row in self.rows]
            )

    def evaluate(self, X):
        if self._const is not None:
            return np.broadcast_to(self._const, (X.shape[0], self.d, self.m)).copy()
        out = np.empty((X.shape[0], self.d, self.m))
        for i, row in enumerate(self.rows):
            for j, node in enumerate(row):
                out[:, i, j] = dsl.evaluate(node, X)
        return out

    def constant_value(self):
        return None if self._const is None else self._const.copy()

    def to_expressions(self):
        return [[dsl.to_source(node) for node in row] for row in self.rows]


class LinearDrift(VectorField):
    """b(x) = -K x."""

    def __init__(self, K: float, d: int):
        self.K, self.d = float(K), d
        self.name = f"ou{{K={K}}}"

    def evaluate(self, X):
        return -self.K * X

    def kernel_spec(self):
        return 1, (self.K,)

    def to_expressions(self):
        return [f"{dsl.literal(-self.K)} * x{i + 1}" for i in range(self.d)]


class DoubleWellDrift(VectorField):
    """b(x)_i = x_i - x_i^3."""

    def __init__(self, d: int):
        self.d = d
        self.name = "double_well"

    def evaluate(self, X):
        return X - X**3

    def kernel_spec(self):
        return 2, ()

    def to_expressions(self):
        return [f"x{i + 1} - x{i + 1}^3" for i in range(self.d)]


class PowerConfiningDrift(VectorField):
    """b(x) = -c0 (delta^2 + |x|^2)^(theta/2) x, a globally C^1 version of -c0 |x|^theta x."""

    def __init__(self, c0: float, theta: float, delta: float, d: int):
        self.c0, self.theta, self.delta, self.d = float(c0), float(theta), float(delta), d
        self.name = f"example22{{c0={c0},theta={theta},delta={delta}}}"

    def evaluate(self, X):
        r2 = self.delta**2 + np.sum(X * X, axis=1)
        return -self.c0 * (r2 ** (self.theta / 2))[:, None] * X

    def kernel_spec(self):
        return 3, (self.c0, self.theta, self.delta)

    def to_expressions(self):
        radial = (
            f"(norm(x)^2)^{dsl.literal(self.theta / 2)}"
            if self.delta == 0
            else f"({dsl.literal(self.delta**2)} + norm(x)^2)^{dsl.literal(self.theta / 2)}"
        )
        return [f"{dsl.literal(-self.c0)} * {radial} * x{i + 1}" for i in range(self.d)]


class ZeroDrift(VectorField):
    def __init__(self, d: int):
        self.d = d
        self.name = "zero"

    def evaluate(self, X):
        return np.zeros_like(X)

    def kernel_spec(self):
        return 0, ()

    def to_expressions(self):
        return ["0.0"] * self.d


class ConstantMatrix(MatrixField):
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.d, self.m = self.matrix.shape
        self.name = "constant_sigma"

    def evaluate(self, X):
        return np.broadcast_to(self.matrix, (X.shape[0], self.d, self.m)).copy()

    def constant_value(self):
        return self.matrix.copy()

    def to_expressions(self):
        return [[dsl.literal(v) for v in row] for row in self.matrix]


@dataclass(frozen=True)
class ModelSpec:
    d: int
    m: int
    drift: VectorField
    diffusion: MatrixField
    name: str = "model"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("d and m must be positive")
        if self.drift.d != self.d or self.diffusion.d != self.d or self.diffusion.m != self.m:
            raise ValueError("field dimensions disagree with the model")

    def b(self, X) -> np.ndarray:
        return self.drift(X)

    def sigma(self, X) -> np.ndarray:
        return self.diffusion(X)

    def a(self, X) -> np.ndarray:
        """sigma sigma^T, shape (n, d, d)."""
        s = self.diffusion(X)
        return np.einsum("nij,nkj->nik", s, s)

    @property
    def constant_sigma(self) -> np.ndarray | None:
        return self.diffusion.constant_value()

    def validate(self, box: float = 5.0, n_probe: int = 64, seed: int = 0) -> None:
        """Check finiteness and shapes on a probe set of the box [-box, box]^d."""
        rng = np.random.default_rng(seed)
        X = rng.uniform(-box, box, size=(n_probe, self.d))
        X[0] = 0.0
        b = self.drift(X)
        s = self.diffusion(X)
        if b.shape != (n_probe, self.d):
            raise ArityMismatch(f"drift returned shape {b.shape[1:]}, expected ({self.d},)")
        if s.shape != (n_probe, self.d, self.m):
            raise ArityMismatch(f"diffusion returned shape {s.shape[1:]}, expected ({self.d}, {self.m})")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
            raise EvaluationError("model is not finite on the probe box")


def parse_field(source, d: int) -> ExprVectorField:
    """Parse ``d`` comma-separated (or listed) component expressions over x1..xd."""
    parts = dsl.split_components(source)
    if len(parts) != d:
        raise ArityMismatch(f"expected {d} drift components, got {len(parts)}")
    names = dsl.state_variables(d)
    return ExprVectorField([dsl.parse_expression(p, names) for p in parts], d)


def parse_matrix_field(rows, d: int, m: int) -> ExprMatrixField:
    if isinstance(rows, str):
        rows = [r for r in rows.split(";")]
    rows = [dsl.split_components(r) for r in rows]
    if len(rows) != d or any(len(r) != m for r in rows):
        raise ArityMismatch(f"diffusion must have {d} rows of {m} expressions")
    names = dsl.state_variables(d)
    return ExprMatrixField([[dsl.parse_expression(e, names) for e in r] for r in rows], d, m)


def _sigma_matrix(sigma, d: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        return float(s) * np.eye(d)
    return np.atleast_2d(s)


def _ou(K=1.0, d=1, sigma=1.0):
    return ModelSpec(d, _sigma_matrix(sigma, d).shape[1], LinearDrift(K, d),
                     ConstantMatrix(_sigma_matrix(sigma, d)), "ou", {"K": K, "d": d, "sigma": sigma})


def _brownian(d=1, sigma=1.0):
    S = _sigma_matrix(sigma, d)
    return ModelSpec(d, S.shape[1], ZeroDrift(d), ConstantMatrix(S), "brownian", {"d": d, "sigma": sigma})


def _double_well(d=1, sigma=math.sqrt(2.0)):
    S = _sigma_matrix(sigma, d)
    return ModelSpec(d, S.shape[1], DoubleWellDrift(d), ConstantMatrix(S), "double_well",
                     {"d": d, "sigma": sigma})


def _example22(c0=1.0, theta=1.0, delta=0.0, d=2, sigma=1.0):
    S = _sigma_matrix(sigma, d)
    return ModelSpec(d, S.shape[1], PowerConfiningDrift(c0, theta, delta, d), ConstantMatrix(S),
                     "example22", {"c0": c0, "theta": theta, "delta": delta, "d": d, "sigma": sigma})


def _constant_sigma(matrix, K=0.0):
    S = np.atleast_2d(np.asarray(matrix, dtype=float))
    d = S.shape[0]
    drift = LinearDrift(K, d) if K else ZeroDrift(d)
    return ModelSpec(d, S.shape[1], drift, ConstantMatrix(S), "constant_sigma", {"matrix": S.tolist(), "K": K})


BUILTINS: dict[str, Callable[..., ModelSpec]] = {
    "ou": _ou,
    "brownian": _brownian,
    "double_well": _double_well,
    "example22": _example22,
    "constant_sigma": _constant_sigma,
}


def builtin(name: str, **params) -> ModelSpec:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ConfigError(f"unknown builtin model {name!r}", "/model/builtin") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigError(str(exc), "/model/params") from None


def model_from_config(cfg: Mapping[str, Any]) -> ModelSpec:
    """Build a model from the ``"model"`` object of a scenario file."""
    if "builtin" in cfg:
        return builtin(cfg["builtin"], **dict(cfg.get("params", {})))
    d, m = int(cfg["d"]), int(cfg["m"])
    drift = parse_field(cfg["drift"], d)
    diffusion = parse_matrix_field(cfg["diffusion"], d, m)
    model = ModelSpec(d, m, drift, diffusion, cfg.get("name", "custom"))
    model.validate()
    return model


def expression_twin(model: ModelSpec) -> ModelSpec:
    """The same model re-encoded through the expression language."""
    drift = parse_field(model.drift.to_expressions(), model.d)
    diffusion = parse_matrix_field(model.diffusion.to_expressions(), model.d, model.m)
    return ModelSpec(model.d, model.m, drift, diffusion, model.name + "/expr")


@dataclass(frozen=True)
class GrowthReport:
    C_hat: float
    worst_point: np.ndarray
    n_points: int


def growth_ratio(model: ModelSpec, X: np.ndarray) -> np.ndarray:
    """(|sigma|_HS^2 + <b(x), x>) / (1 + |x|^2) at each row of X."""
    s = model.sigma(X)
    hs = np.sum(s * s, axis=(1, 2))
    return (hs + np.sum(model.b(X) * X, axis=1)) / (1.0 + np.sum(X * X, axis=1))


def check_linear_growth(
    model: ModelSpec,
    box_radius: float,
    n_samples: int,
    seed: int = 0,
    grid_spacing: float | None = None,
) -> GrowthReport:
    """Estimate the smallest C with |sigma|_HS^2 + <b(x),x> <= C (1 + |x|^2) on a box.

    With ``grid_spacing`` the probe set is the lattice ``grid_spacing * Z^d``
    intersected with the box, so enlarging the box can only raise ``C_hat``.
    Otherwise ``n_samples`` uniform points (plus the origin) are used.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if grid_spacing is not None:
        k = int(math.floor(box_radius / grid_spacing + 1e-12))
        axis = grid_spacing * np.arange(-k, k + 1)
        X = np.stack(np.meshgrid(*([axis] * model.d), indexing="ij"), axis=-1).reshape(-1, model.d)
    else:
        rng = np.random.default_rng(seed)
        X = np.vstack([np.zeros((1, model.d)), rng.uniform(-box_radius, box_radius, (n_samples, model.d))])
    ratio = growth_ratio(model, X)
    k = int(np.argmax(ratio))
    return GrowthReport(float(ratio[k]), X[k].copy(), len(X))


@dataclass(frozen=True)
class LipschitzProbe:
    drift_max: float
    diffusion_max: float
    n_pairs: int


def probe_local_lipschitz(model: ModelSpec, box: float, n_pairs: int = 10_000, seed: int = 0) -> LipschitzProbe:
    """Largest sampled difference quotients of b and sigma on [-box, box]^d.

    A sanity probe only: finite values on random pairs say nothing about a
    proof of local Lipschitz continuity.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-box, box, (n_pairs, model.d))
    Y = rng.uniform(-box, box, (n_pairs, model.d))
    dist = np.linalg.norm(X - Y, axis=1)
    keep = dist > 0
    X, Y, dist = X[keep], Y[keep], dist[keep]
    db = np.linalg.norm(model.b(X) - model.b(Y), axis=1) / dist
    ds = np.sqrt(np.sum((model.sigma(X) - model.sigma(Y)) ** 2, axis=(1, 2))) / dist
    return LipschitzProbe(float(db.max()), float(ds.max()), int(keep.sum()))
