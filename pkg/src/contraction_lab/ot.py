"""Exact optimal transport between equal-size uniform empirical measures.

Every coupling of two uniform n-point measures is a mixture of permutation
plans, so W_p, the bottleneck distance W_inf and the Orlicz distance W_Phi
are all attained by a permutation. The assignment problems are solved with
scipy (``linear_sum_assignment`` and ``maximum_bipartite_matching``); the
exhaustive search in ``brute_force_w`` is the independent check.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from . import dsl
from .errors import (
    BracketFailure,
    DimensionMismatch,
    EmptyInput,
    NonFinite,
    SizeMismatch,
    TooLarge,
)

BRUTE_FORCE_MAX = 7


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform measure (1/n) sum_i delta_{x_i} on R^d."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise EmptyInput("an empirical measure needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise NonFinite("empirical measure has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        try:
            data = [[float(v) for v in r] for r in rows]
        except ValueError:
            data = [[float(v) for v in r] for r in rows[1:]]  # header row
        return cls(np.array(data, dtype=float))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.points:
                writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class CouplingPlan:
    """Permutation plan: point i of the first measure is sent to point ``permutation[i]``."""

    permutation: np.ndarray
    value: float

    @property
    def n(self) -> int:
        return len(self.permutation)

    def matrix(self) -> np.ndarray:
        n = self.n
        P = np.zeros((n, n))
        P[np.arange(n), self.permutation] = 1.0 / n
        return P

    def is_feasible(self, tol: float = 1e-12) -> bool:
        n = self.n
        if sorted(self.permutation.tolist()) != list(range(n)):
            return False
        P = self.matrix()
        return bool(np.all(np.abs(P.sum(0) - 1.0 / n) <= tol) and np.all(np.abs(P.sum(1) - 1.0 / n) <= tol))

    def to_json(self) -> str:
        return json.dumps({"value": self.value, "permutation": [int(j) for j in self.permutation]})

    @classmethod
    def from_json(cls, text: str) -> "CouplingPlan":
        obj = json.loads(text)
        return cls(np.asarray(obj["permutation"], dtype=np.int64), float(obj["value"]))


class YoungFunction:
    """Phi with Phi(0) = 0, increasing, superlinear at infinity.

    Kinds: ``power`` (Phi(r) = r^p), ``custom`` (a vectorised callable or an
    expression in ``r``) and ``infinity`` (the limiting convention: the gauge
    norm is the essential supremum and Phi^{-1}(1) = 1).
    """

    def __init__(self, kind: str, p: float | None = None, func: Callable | None = None,
                 inverse: Callable | None = None, name: str | None = None):
        if kind not in ("power", "custom", "infinity"):
            raise ValueError(f"unknown Young function kind {kind!r}")
        if kind == "power" and not (p is not None and 1 <= p < math.inf):
            raise ValueError("power Young functions need 1 <= p < inf")
        if kind == "custom" and func is None:
            raise ValueError("custom Young functions need an evaluator")
        self.kind, self.p, self._func, self._inverse = kind, None if p is None else float(p), func, inverse
        self.name = name or (f"power{{p={self.p:g}}}" if kind == "power" else kind)

    @classmethod
    def power(cls, p: float) -> "YoungFunction":
        return cls("power", p=p)

    @classmethod
    def infinity(cls) -> "YoungFunction":
        return cls("infinity")

    @classmethod
    def custom(cls, func: Callable, inverse: Callable | None = None, name: str = "custom") -> "YoungFunction":
        return cls("custom", func=func, inverse=inverse, name=name)

    @classmethod
    def from_expression(cls, source: str) -> "YoungFunction":
        """Phi from an expression in the variable ``r``, e.g. ``"exp(r) - 1"``."""
        node = dsl.parse_expression(source, ("r",), allow_norm=False)

        def func(r):
            r = np.asarray(r, dtype=float)
            flat = r.reshape(-1, 1)
            with np.errstate(over="ignore"):
                try:
                    out = dsl.evaluate(node, flat)
                except dsl.EvaluationError:
                    # overflow for huge arguments only counts as "very large"
                    out = np.array([_eval_or_inf(node, v) for v in flat[:, 0]])
            return out.reshape(r.shape) if r.ndim else float(out[0])

        return cls("custom", func=func, name=source)

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "power":
            out = np.power(r, self.p)
        elif self.kind == "infinity":
            out = np.where(r <= 1.0, 0.0, np.inf)
        else:
            out = np.asarray(self._func(r), dtype=float)
        return float(out) if out.ndim == 0 else out

    def inverse(self, y: float) -> float:
        """Phi^{-1}(y) = inf{s >= 0: Phi(s) >= y}."""
        y = float(y)
        if y < 0:
            raise ValueError("Phi^{-1} needs y >= 0")
        if self.kind == "power":
            return y ** (1.0 / self.p)
        if self.kind == "infinity":
            return 1.0
        if self._inverse is not None:
            return float(self._inverse(y))
        if y == 0:
            return 0.0
        hi = 1.0
        for _ in range(2100):
            if self(hi) >= y:
                break
            hi *= 2.0
        else:
            raise BracketFailure(f"Phi never reaches {y:g}; not a Young function of class N")
        lo = 0.0
        while hi > 1e-300 and self(hi / 2.0) >= y:
            hi /= 2.0
        lo = hi / 2.0 if self(hi / 2.0) < y else 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if self(mid) >= y:
                hi = mid
            else:
                lo = mid
        return hi

    def __repr__(self) -> str:
        return f"YoungFunction({self.name})"


def _eval_or_inf(node, v: float) -> float:
    try:
        return float(dsl.evaluate(node, np.array([[v]]))[0])
    except dsl.EvaluationError as exc:
        if "overflow" not in str(exc):
            raise
        return math.inf


@dataclass(frozen=True)
class YoungProbe:
    zero_ok: bool
    increasing: bool
    superlinear: bool

    @property
    def ok(self) -> bool:
        return self.zero_ok and self.increasing


def probe_young(phi: YoungFunction, lo: float = 1e-6, hi: float = 1e6, n: int = 241) -> YoungProbe:
    """Check Phi(0) = 0, strict increase and increase of Phi(r)/r on a log grid."""
    if phi.kind == "infinity":
        return YoungProbe(True, True, True)
    r = np.logspace(math.log10(lo), math.log10(hi), n)
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.asarray(phi(r), dtype=float)
    finite = np.isfinite(vals)
    v = vals[finite]
    zero_ok = float(phi(0.0)) == 0.0
    increasing = bool(np.all(v > 0) and np.all(np.diff(v) > 0))
    ratio = v / r[finite]
    superlinear = bool(np.all(np.diff(ratio) >= -1e-12 * np.abs(ratio[1:])))
    return YoungProbe(zero_ok, increasing, superlinear)


def _phi_mean(phi: YoungFunction, values: np.ndarray, weights: np.ndarray, r: float) -> float:
    with np.errstate(over="ignore"):
        vals = phi(values / r)
    vals = np.asarray(vals, dtype=float)
    if np.any(np.isnan(vals)):
        raise NonFinite("Phi returned NaN")
    return float(np.sum(weights * vals))


def gauge_norm(values, phi: YoungFunction, weights=None, level: float = 1.0, rtol: float = 1e-10) -> float:
    """inf{r > 0: sum_i w_i Phi(v_i / r) <= level}; weights default to 1/n.

    Bisection between two monotone bounds: the term of the largest value
    alone forces ``r >= v_max / Phi^{-1}(level / w)``, and putting the total
    weight W on the largest value gives ``r <= v_max / Phi^{-1}(level / W)``.
    """
    v = np.abs(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise EmptyInput("no values")
    w = np.full(v.size, 1.0 / v.size) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != v.shape:
        raise SizeMismatch("values and weights differ in length")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
        raise NonFinite("values and weights must be finite")
    if np.any(w < 0) or level <= 0:
        raise ValueError("weights must be nonnegative and level positive")
    keep = (w > 0) & (v > 0)
    v, w = v[keep], w[keep]
    if v.size == 0:
        return 0.0
    if phi.kind == "infinity":
        return float(v.max())
    W = float(w.sum())
    vmax = float(v.max())
    inv_total = phi.inverse(level / W)
    if not inv_total > 0:
        raise BracketFailure("Phi^{-1}(level / total weight) is not positive")
    hi = vmax / inv_total
    lo = vmax / phi.inverse(level / float(w[v == vmax].max()))
    lo = min(lo, hi)
    if _phi_mean(phi, v, w, hi) > level * (1 + 1e-12):
        raise BracketFailure("upper bracket is infeasible; Phi is not increasing")
    for _ in range(400):
        if hi - lo <= rtol * 1e-3 * hi:
            break
        mid = 0.5 * (lo + hi)
        if _phi_mean(phi, v, w, mid) <= level:
            hi = mid
        else:
            lo = mid
    return float(hi)


def _pair_check(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.n != nu.n:
        raise SizeMismatch(f"measures have {mu.n} and {nu.n} points; only equal sizes are supported")
    if mu.d != nu.d:
        raise DimensionMismatch(f"measures live in dimensions {mu.d} and {nu.d}")


def distance_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def _plan_cost(D: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return D[np.arange(len(perm)), perm]


def wasserstein_p(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> tuple[float, CouplingPlan]:
    """Exact W_p; the optimal plan is a permutation.

    In one dimension the monotone (sorted) matching is optimal for every
    p >= 1 and replaces the assignment solve.
    """
    _pair_check(mu, nu)
    if math.isinf(p):
        return wasserstein_inf(mu, nu)
    if p < 1:
        raise ValueError("p must be >= 1")
    if mu.d == 1:
        ia = np.argsort(mu.points[:, 0], kind="stable")
        ib = np.argsort(nu.points[:, 0], kind="stable")
        perm = np.empty(mu.n, dtype=np.int64)
        perm[ia] = ib
        dist = np.abs(mu.points[:, 0] - nu.points[perm, 0])
    else:
        D = distance_matrix(mu, nu)
        _, perm = linear_sum_assignment(D**p)
        perm = perm.astype(np.int64)
        dist = _plan_cost(D, perm)
    # sorted reduction: swapping the measures permutes the matched costs, so this is exactly symmetric
    value = float(np.mean(np.sort(dist**p)) ** (1.0 / p))
    return value, CouplingPlan(perm, value)


def wasserstein_inf(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> tuple[float, CouplingPlan]:
    """Bottleneck assignment by binary search over the sorted distinct costs."""
    _pair_check(mu, nu)
    D = distance_matrix(mu, nu)
    levels = np.unique(D)
    lo, hi = 0, len(levels) - 1
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        match = _perfect_matching(D <= levels[mid])
        if match is not None:
            best, hi = match, mid - 1
        else:
            lo = mid + 1
    value = float(np.max(_plan_cost(D, best)))
    return value, CouplingPlan(best, value)


def _perfect_matching(adj: np.ndarray) -> np.ndarray | None:
    match = maximum_bipartite_matching(csr_matrix(adj), perm_type="column")
    if np.any(match < 0):
        return None
    return match.astype(np.int64)


@dataclass(frozen=True)
class PhiDistance:
    """W_Phi together with both normalisations by Phi^{-1}(1)."""

    value: float
    plan: CouplingPlan
    phi_inv_one: float

    @property
    def divided(self) -> float:
        return self.value / self.phi_inv_one

    @property
    def multiplied(self) -> float:
        return self.value * self.phi_inv_one

    def __iter__(self):
        return iter((self.value, self.plan))


def wasserstein_phi(mu: EmpiricalMeasure, nu: EmpiricalMeasure, phi: YoungFunction,
                    tol: float = 1e-10) -> PhiDistance:
    """inf over plans of the Phi-gauge norm of the transport distance.

    ``r`` is feasible when some plan has mean Phi(distance / r) <= 1; that is
    monotone in r. With B the bottleneck value, the bottleneck plan makes
    ``B / Phi^{-1}(1)`` feasible and no plan can make ``r < B / Phi^{-1}(n)``
    feasible, which brackets the bisection.
    """
    _pair_check(mu, nu)
    inv1 = phi.inverse(1.0)
    B, bplan = wasserstein_inf(mu, nu)
    if phi.kind == "infinity":
        return PhiDistance(B, bplan, 1.0)
    if B == 0.0:
        return PhiDistance(0.0, CouplingPlan(bplan.permutation, 0.0), inv1)
    D = distance_matrix(mu, nu)
    n = mu.n

    def solve(r):
        with np.errstate(over="ignore"):
            C = np.asarray(phi(D / r), dtype=float)
        if np.any(np.isnan(C)):
            raise NonFinite("Phi returned NaN")
        finite_max = np.max(C[np.isfinite(C)], initial=0.0)
        C = np.where(np.isinf(C), 1e3 * (finite_max + 1.0) * n, C)
        _, perm = linear_sum_assignment(C)
        return float(np.mean(C[np.arange(n), perm])), perm.astype(np.int64)

    hi = B / inv1
    lo = B / phi.inverse(float(n))
    mean_hi, perm_hi = solve(hi)
    if mean_hi > 1.0 + 1e-12:
        raise BracketFailure("upper bracket infeasible; Phi is not a valid Young function")
    for _ in range(400):
        if hi - lo <= tol * hi:
            break
        mid = 0.5 * (lo + hi)
        mean_mid, perm_mid = solve(mid)
        if mean_mid <= 1.0:
            hi, perm_hi = mid, perm_mid
        else:
            lo = mid
    value = float(hi)
    return PhiDistance(value, CouplingPlan(perm_hi, value), inv1)


def brute_force_w(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cost: float | Callable = 2.0) -> float:
    """Exhaustive optimum over all n! permutations (n <= 7).

    ``cost`` is p in [1, inf] for W_p (p = inf gives the bottleneck value),
    or a function of the distance, in which case the minimal mean cost is
    returned.
    """
    _pair_check(mu, nu)
    n = mu.n
    if n > BRUTE_FORCE_MAX:
        raise TooLarge(f"brute force is limited to n <= {BRUTE_FORCE_MAX}")
    D = distance_matrix(mu, nu)
    rows = np.arange(n)
    perms = np.array(list(itertools.permutations(range(n))))
    dist = D[rows[None, :], perms]
    if callable(cost):
        return float(np.min(np.mean(cost(dist), axis=1)))
    p = float(cost)
    if math.isinf(p):
        return float(np.min(np.max(dist, axis=1)))
    return float(np.min(np.mean(dist**p, axis=1)) ** (1.0 / p))
