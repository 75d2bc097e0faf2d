"""Coefficient conditions, explicit contraction constants and scalar rate functions.

Condition ratios are evaluated on batches of pairs and divided by |x - y|^2,
so each condition reads ``ratio <= bound``. Constants are suprema over
probed pairs: low-discrepancy pairs in the box, all grid pairs in one and
two dimensions, and a coordinatewise golden-section refinement from the
best pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.optimize import minimize_scalar
from scipy.stats import qmc

from .errors import (
    BracketFailure,
    CoincidentPoints,
    DivergentTail,
    EigenvalueViolation,
    EmptyInput,
    NonPositiveRate,
    NoValidR0,
)
from .linalg import CLAMP_TOL, NEG_TOL, psd_sqrt, sigma0_from_a
from .model import ModelSpec
from .ot import EmpiricalMeasure, YoungFunction, distance_matrix, gauge_norm

CONDITIONS = ("DSS", "DSS2", "DSS2'", "DSS3", "EB")

DRIFT_FACTOR_NOTE = (
    "K_p uses the drift term <b(x)-b(y), x-y>; an Ito computation for |X - Y|^2 "
    "carries 2<b(x)-b(y), x-y>, and K_alt_drift2 reports the constant with the "
    "doubled drift term"
)


def _pair_terms(model: ModelSpec, X: np.ndarray, Y: np.ndarray):
    Z = X - Y
    r2 = np.sum(Z * Z, axis=1)
    drift = np.sum((model.b(X) - model.b(Y)) * Z, axis=1)
    dS = model.sigma(X) - model.sigma(Y)
    hs = np.sum(dS * dS, axis=(1, 2))
    proj = np.einsum("nij,ni->nj", dS, Z)
    proj2 = np.sum(proj * proj, axis=1)
    return Z, r2, drift, hs, proj2


def condition_ratio(model: ModelSpec, X, Y, condition: str = "DSS", p: float = 2.0,
                    lambda0: float | None = None, drift_factor: float = 1.0) -> np.ndarray:
    """Left side of the named condition divided by |x - y|^2, for each pair row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Z, r2, drift, hs, proj2 = _pair_terms(model, X, Y)
    if np.any(r2 == 0):
        raise CoincidentPoints("condition ratios need x != y")
    drift = drift_factor * drift
    if condition == "DSS":
        lhs = (p - 2.0) * proj2 / r2 + hs + drift
    elif condition == "DSS2":
        if lambda0 is None:
            raise ValueError("DSS2 needs lambda0")
        d0 = sigma0_from_a(model.a(X), lambda0) - sigma0_from_a(model.a(Y), lambda0)
        lhs = np.sum(d0 * d0, axis=(1, 2)) - proj2 / r2 + drift
    elif condition == "DSS2'":
        lhs = hs + drift
    elif condition == "DSS3":
        if lambda0 is None:
            raise ValueError("DSS3 needs lambda0")
        da = model.a(X) - model.a(Y)
        lhs = (model.d - 1) / (4.0 * lambda0) * np.sum(da * da, axis=(1, 2)) + drift
    elif condition == "EB":
        lhs = drift
    else:
        raise ValueError(f"unknown condition {condition!r}")
    return lhs / r2


def dss_lhs(model: ModelSpec, x, y, p: float) -> float:
    """Left side of (DSS) at one pair, divided by |x - y|^2."""
    if p < 1:
        raise ValueError("p must be >= 1")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    if np.array_equal(x, y):
        raise CoincidentPoints("dss_lhs needs x != y")
    return float(condition_ratio(model, x, y, "DSS", p)[0])


def probe_pairs(d: int, box: float, n_pairs: int, seed: int = 0, grid_points: int | None = None):
    """Scrambled Sobol pairs in [-box, box]^d, plus all ordered grid pairs when d <= 2."""
    m = max(0, math.ceil(math.log2(max(n_pairs, 1))))
    sob = qmc.Sobol(2 * d, scramble=True, seed=seed).random_base2(m)[:n_pairs]
    P = (2.0 * sob - 1.0) * box
    X, Y = [P[:, :d]], [P[:, d:]]
    if d <= 2:
        g = grid_points or (101 if d == 1 else 15)
        axis = np.linspace(-box, box, g)
        G = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
        i, j = np.meshgrid(np.arange(len(G)), np.arange(len(G)), indexing="ij")
        keep = i != j
        X.append(G[i[keep]])
        Y.append(G[j[keep]])
    X, Y = np.vstack(X), np.vstack(Y)
    ok = np.any(X != Y, axis=1)
    return X[ok], Y[ok]


_PENALTY = -1e30


def _refine(objective: Callable[[np.ndarray], float], start: np.ndarray, box: float, sweeps: int) -> tuple[np.ndarray, float]:
    """Coordinatewise golden-section ascent of ``objective`` over a pair (x, y).

    Moves are made in midpoint/difference coordinates m = (x + y)/2,
    z = x - y, so midpoint moves keep |x - y| fixed and can slide along a
    distance constraint. Points leaving the box score ``_PENALTY``.
    """
    d = len(start) // 2
    to_xy = lambda w: np.concatenate([w[:d] + 0.5 * w[d:], w[:d] - 0.5 * w[d:]])

    def score(w):
        xy = to_xy(w)
        if np.any(np.abs(xy) > box):
            return _PENALTY
        v = objective(xy)
        return v if np.isfinite(v) else _PENALTY

    w = np.concatenate([0.5 * (start[:d] + start[d:]), start[:d] - start[d:]])
    best = score(w)
    for _ in range(sweeps):
        improved = False
        for k in range(2 * d):
            half = box if k < d else 2.0 * box

            def f(t, k=k):
                trial = w.copy()
                trial[k] = t
                return -score(trial)

            res = minimize_scalar(f, bounds=(-half, half), method="bounded",
                                  options={"xatol": 1e-12 * max(1.0, box)})
            if -res.fun > best:
                w[k] = res.x
                best = -res.fun
                improved = True
        if not improved:
            break
    return to_xy(w), best


@dataclass
class ConditionReport:
    condition: str
    constants: dict
    witness_x: list
    witness_y: list
    margin: float
    n_pairs: int
    box: float
    seed: int
    p: float | None = None
    lambda0: float | None = None
    region_margins: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _sup_ratio(model, condition, box, n_pairs, refine_steps, seed, mask=None, top=16, **kw):
    X, Y = probe_pairs(model.d, box, n_pairs, seed)
    if mask is not None:
        keep = mask(X, Y)
        X, Y = X[keep], Y[keep]
    if len(X) == 0:
        raise EmptyInput("no probe pairs satisfy the constraint")
    vals = condition_ratio(model, X, Y, condition, **kw)
    d = model.d

    def objective(zz):
        x, y = zz[:d][None, :], zz[d:][None, :]
        if np.array_equal(x, y) or (mask is not None and not mask(x, y)[0]):
            return _PENALTY
        try:
            return float(condition_ratio(model, x, y, condition, **kw)[0])
        except (EigenvalueViolation, ArithmeticError):
            return _PENALTY

    # lowest pair index wins ties, so order is deterministic
    order = np.argsort(-vals, kind="stable")[:top]
    best_val, best_z = -np.inf, None
    for i in order:
        z0 = np.concatenate([X[i], Y[i]])
        z, v = _refine(objective, z0, box, refine_steps) if refine_steps > 0 else (z0, float(vals[i]))
        if v > best_val:
            best_val, best_z = v, z
    return best_val, best_z[:d], best_z[d:], X, Y, vals


def _region_margins(X, Y, vals, edges=(0.0, 1.0, 2.0, 4.0, math.inf)) -> dict:
    near = np.minimum(np.linalg.norm(X, axis=1), np.linalg.norm(Y, axis=1))
    out = {}
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (near >= lo) & (near < hi)
        if sel.any():
            out[f"min|x|,|y| in [{lo:g},{hi:g})"] = float(vals[sel].max())
    return out


def estimate_Kp(model: ModelSpec, p: float, box: float, n_pairs: int = 4096, refine_steps: int = 20,
                seed: int = 0) -> ConditionReport:
    """K_p = -sup over probed pairs of the (DSS) ratio."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not 1 <= p < math.inf:
        raise ValueError("p must be in [1, inf)")
    sup, x, y, X, Y, vals = _sup_ratio(model, "DSS", box, n_pairs, refine_steps, seed, p=p)
    sup2, *_ = _sup_ratio(model, "DSS", box, n_pairs, refine_steps, seed, p=p, drift_factor=2.0)
    return ConditionReport(
        "DSS", {"K_p": -float(sup), "K_alt_drift2": -float(sup2)}, x.tolist(), y.tolist(), float(sup), len(X),
        box, seed, p=p,
        region_margins=_region_margins(X, Y, vals), notes=[DRIFT_FACTOR_NOTE],
    )


def estimate_condition_sup(model: ModelSpec, condition: str, box: float, n_pairs: int = 4096,
                           refine_steps: int = 20, seed: int = 0, lambda0: float | None = None,
                           p: float = 2.0) -> ConditionReport:
    """Sup of any condition ratio; for (DSS2') this is the constant K."""
    kw = {"p": p} if condition == "DSS" else {}
    if condition in ("DSS2", "DSS3"):
        kw["lambda0"] = lambda0
    sup, x, y, X, Y, vals = _sup_ratio(model, condition, box, n_pairs, refine_steps, seed, **kw)
    return ConditionReport(condition, {"sup_ratio": float(sup)}, x.tolist(), y.tolist(), float(sup), len(X), box, seed,
                           p=p if condition == "DSS" else None, lambda0=lambda0,
                           region_margins=_region_margins(X, Y, vals))


def sigma0_at(model: ModelSpec, x, lambda0: float) -> np.ndarray:
    """sqrt(sigma sigma^T(x) - lambda0^2 I)."""
    a = model.a(np.asarray(x, dtype=float).reshape(1, -1))[0]
    return sigma0_from_a(a, lambda0)


def select_lambda0(model: ModelSpec, box: float, n_grid: int = 21, factor: float = 0.95) -> float:
    """factor * sqrt(min eigenvalue of sigma sigma^T over a grid of the box)."""
    axis = np.linspace(-box, box, n_grid)
    G = np.stack(np.meshgrid(*([axis] * model.d), indexing="ij"), -1).reshape(-1, model.d)
    if len(G) > 20000:
        G = (2.0 * qmc.Sobol(model.d, scramble=False).random_base2(14) - 1.0) * box
    w_min = float(np.linalg.eigvalsh(model.a(G)).min())
    if w_min <= 0:
        raise EigenvalueViolation("sigma sigma^T is degenerate on the probe grid")
    return factor * math.sqrt(w_min)


@dataclass
class EPReport:
    max_ratio: float
    n_pairs: int
    n_checked: int
    n_violations: int
    n_flagged: int
    worst_pair: tuple
    lambda0: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["worst_pair"] = [np.asarray(v).tolist() for v in self.worst_pair]
        return d


def check_ep_inequality(a_field, pairs, lambda0: float, tol: float = 1e-10) -> EPReport:
    """Pairwise check of ||sigma0(x) - sigma0(y)||_op^2 <= ||a(x) - a(y)||_HS^2 / (4 lambda0).

    ``a_field`` maps points (n, d) to matrices (n, d, d), or is a ModelSpec.
    The bound is only guaranteed when a - lambda0^2 I >= lambda0 I at both
    points; pairs without that slack are flagged and excluded from the
    violation count (their ratio still enters ``max_ratio``).
    """
    field_fn = a_field.a if isinstance(a_field, ModelSpec) else a_field
    X, Y = (np.atleast_2d(np.asarray(v, dtype=float)) for v in pairs)
    aX, aY = field_fn(X), field_fn(Y)
    s0x, s0y = sigma0_from_a(aX, lambda0), sigma0_from_a(aY, lambda0)
    lhs = np.linalg.norm(s0x - s0y, ord=2, axis=(1, 2)) ** 2
    da = aX - aY
    rhs = np.sum(da * da, axis=(1, 2)) / (4.0 * lambda0)
    eye = np.eye(aX.shape[-1])
    slack = np.minimum(np.linalg.eigvalsh(aX - lambda0**2 * eye).min(axis=1),
                       np.linalg.eigvalsh(aY - lambda0**2 * eye).min(axis=1))
    flagged = slack < lambda0 * (1.0 - 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > tol, np.inf, 0.0))
    bad = (lhs > rhs + tol * np.maximum(1.0, rhs)) & ~flagged
    k = int(np.argmax(ratio))
    return EPReport(float(ratio[k]), len(X), int((~flagged).sum()), int(bad.sum()), int(flagged.sum()),
                    (X[k], Y[k]), float(lambda0))


# Lyapunov distance and explicit constants

@dataclass
class RateReport:
    K1: float
    K2: float
    r0: float
    N: float
    eps: float
    c1: float
    c: float
    lam: float
    r_star: float
    lambda0: float = 1.0
    key_margin: float | None = None
    fitted_c: float | None = None
    fitted_lam: float | None = None

    def rho_bar(self, r):
        r = np.asarray(r, dtype=float)
        return self.eps * r + 1.0 - np.exp(-self.N * r)

    def drift_bound(self, r):
        return _A(np.asarray(r, dtype=float), self.K1, self.K2, self.r0, self.N, self.eps, self.lambda0)

    def key_inequality(self, r):
        """4 N^2 lambda0^2 / (r (eps e^{N r} + N)) - (K1 + K2); nonnegative on (0, r0]."""
        r = np.asarray(r, dtype=float)
        return 4.0 * self.N**2 * self.lambda0**2 / (r * (self.eps * np.exp(self.N * r) + self.N)) - (self.K1 + self.K2)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _A(r, K1, K2, r0, N, eps, lambda0=1.0):
    inside = r <= r0
    with np.errstate(over="ignore", divide="ignore"):
        ito = 4.0 * N**2 * lambda0**2 / (r * (eps * np.exp(N * r) + N))
    bracket = np.where(inside, K1 + K2 - ito, 0.0) - K2
    return -(eps + N * np.exp(-N * r)) * bracket * r


def lyapunov_constants(K1: float, K2: float, r0: float, lambda0: float = 1.0,
                       n_grid: int = 20001) -> RateReport:
    """N, eps, c1, c for rho_bar = eps r + 1 - e^{-N r}.

    c1 = inf_{r > 0} A(r) / rho_bar(r), minimised on a log grid of
    (0, 10 (r0 + 1)] with a bounded refinement around the grid minimum; the
    tail limit K2 of the ratio is appended. ``lambda0`` scales the Ito term
    for a reflected channel with variance 8 lambda0^2 (the proof uses 1).
    """
    if K1 < 0 or K2 <= 0 or r0 <= 0:
        raise ValueError("need K1 >= 0, K2 > 0, r0 > 0")
    N = 0.5 * r0 * (K1 + K2)
    eps = N * math.exp(-N * r0)
    R_max = 10.0 * (r0 + 1.0)

    def ratio(r):
        r = np.asarray(r, dtype=float)
        rb = eps * r + 1.0 - np.exp(-N * r)
        return _A(r, K1, K2, r0, N, eps, lambda0) / rb

    grid = np.unique(np.concatenate([np.geomspace(1e-9 * R_max, R_max, n_grid), [r0, r0 + 1.0, R_max]]))
    vals = ratio(grid)
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    best_r, best = float(grid[k]), float(vals[k])
    if hi > lo:
        # the ratio jumps at r0, so refine on each side separately
        for a, b in ((lo, min(hi, r0)), (max(lo, r0), hi)):
            if b > a:
                res = minimize_scalar(lambda r: float(ratio(r)), bounds=(a, b), method="bounded",
                                      options={"xatol": 1e-14 * max(1.0, b)})
                if res.fun < best:
                    best, best_r = float(res.fun), float(res.x)
    c1 = min(best, K2)
    if not c1 > 0:
        raise NonPositiveRate(f"c1 = {c1:.3e} is not positive")
    with np.errstate(over="ignore"):
        key = 4.0 * N**2 * lambda0**2 / (grid * (eps * np.exp(N * grid) + N)) - (K1 + K2)
    key_margin = float(key[grid <= r0].min())
    c = (N + eps) / eps
    return RateReport(K1, K2, r0, N, eps, c1, c, c1, best_r if best <= K2 else math.inf, lambda0, key_margin)


def estimate_eb_constants(model: ModelSpec, lambda0: float, box: float, seed: int = 0, r0: float | None = None,
                          n_pairs: int = 4096, refine_steps: int = 20, condition: str = "DSS2",
                          n_scan: int = 24) -> ConditionReport:
    """(K1, K2, r0) for the two-regime bound of the (DSS2)-type ratio phi.

    For a given r0: K2 = -sup{phi: |x - y| >= r0} (must be positive) and
    K1 = sup{phi: |x - y| < r0} + K2. Without r0, a scan over distance
    levels keeps the admissible r0 with the largest certified rate c1.
    """
    kw = {"lambda0": lambda0} if condition in ("DSS2", "DSS3") else {}
    X, Y = probe_pairs(model.d, box, n_pairs, seed)
    dist = np.linalg.norm(X - Y, axis=1)

    def constants(r):
        far, far_x, far_y, *_ = _sup_ratio(model, condition, box, n_pairs, refine_steps, seed,
                                          mask=lambda A, B: np.linalg.norm(A - B, axis=1) >= r, **kw)
        K2 = -far
        if not K2 > 0:
            return None
        try:
            near, near_x, near_y, *_ = _sup_ratio(model, condition, box, n_pairs, refine_steps, seed,
                                                  mask=lambda A, B: np.linalg.norm(A - B, axis=1) < r, **kw)
        except EmptyInput:
            near, near_x, near_y = -K2, far_x, far_y
        K1 = max(near + K2, 0.0)
        return K1, K2, far_x, far_y, near

    if r0 is not None:
        got = constants(r0)
        if got is None:
            raise NoValidR0(f"sup of the ratio over |x - y| >= {r0:g} is not negative")
        chosen = (r0, got)
    else:
        levels = np.quantile(dist, np.linspace(0.05, 0.9, n_scan))
        best_rate, chosen = -math.inf, None
        for r in levels:
            got = constants(float(r))
            if got is None:
                continue
            try:
                rate = lyapunov_constants(got[0], got[1], float(r)).c1
            except NonPositiveRate:
                continue
            if rate > best_rate:
                best_rate, chosen = rate, (float(r), got)
        if chosen is None:
            raise NoValidR0("no r0 in the scan gives a negative far-field sup")
    r, (K1, K2, wx, wy, near) = chosen
    return ConditionReport(
        condition, {"K1": float(K1), "K2": float(K2), "r0": float(r), "sup_near": float(near)},
        np.asarray(wx).tolist(), np.asarray(wy).tolist(), -float(K2), len(X), box, seed, lambda0=lambda0,
        notes=["margin is the far-field sup of the ratio, attained at the witness"],
    )


# Scalar rate functions

class ScalarProfile:
    """Increasing positive Psi1 on (0, inf): a power c1 r^eps or a tabulated function.

    A tabulated profile interpolates linearly in log-log coordinates and
    extends beyond its last node by the power law of the last segment.
    """

    def __init__(self, kind: str, c1: float | None = None, eps: float | None = None,
                 r=None, values=None, quad_limit: int = 200):
        self.kind = kind
        self.quad_limit = quad_limit
        if kind == "power":
            if not (c1 and c1 > 0 and eps is not None and eps >= 0):
                raise ValueError("power profile needs c1 > 0 and eps >= 0")
            self.c1, self.eps = float(c1), float(eps)
        elif kind == "tabulated":
            r = np.asarray(r, dtype=float)
            v = np.asarray(values, dtype=float)
            if r.ndim != 1 or r.shape != v.shape or len(r) < 2 or np.any(r <= 0) or np.any(v <= 0):
                raise ValueError("tabulated profile needs >= 2 positive nodes")
            if np.any(np.diff(r) <= 0) or np.any(np.diff(v) < 0):
                raise ValueError("tabulated profile must be increasing")
            self.r, self.v = r, v
            self._lr, self._lv = np.log(r), np.log(v)
            self.tail_slope = (self._lv[-1] - self._lv[-2]) / (self._lr[-1] - self._lr[-2])
            self.head_slope = (self._lv[1] - self._lv[0]) / (self._lr[1] - self._lr[0])
            self._cum = None
        else:
            raise ValueError(f"unknown profile kind {kind!r}")

    @classmethod
    def power(cls, c1: float, eps: float) -> "ScalarProfile":
        return cls("power", c1=c1, eps=eps)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "power":
            return self.c1 * u**self.eps
        with np.errstate(divide="ignore"):
            lu = np.log(u)
        out = np.interp(lu, self._lr, self._lv)
        out = np.where(lu > self._lr[-1], self._lv[-1] + self.tail_slope * (lu - self._lr[-1]), out)
        out = np.where(lu < self._lr[0], self._lv[0] + self.head_slope * (lu - self._lr[0]), out)
        return np.exp(out)

    def integral(self, v: float) -> float:
        """int_0^v Psi1 in closed form; each log-log segment is a power law."""
        if v <= 0:
            return 0.0
        if self.kind == "power":
            return self.c1 * v ** (self.eps + 1.0) / (self.eps + 1.0)
        r, val = self.r, self.v
        if self._cum is None:
            self._slopes = np.diff(self._lv) / np.diff(self._lr)
            s = self._slopes
            seg = val[:-1] * r[:-1] / (s + 1.0) * ((r[1:] / r[:-1]) ** (s + 1.0) - 1.0)
            head = val[0] * r[0] / (self.head_slope + 1.0)
            self._cum = head + np.concatenate([[0.0], np.cumsum(seg)])
        if v <= r[0]:
            return float(val[0] * r[0] / (self.head_slope + 1.0) * (v / r[0]) ** (self.head_slope + 1.0))
        k = min(int(np.searchsorted(r, v)) - 1, len(r) - 1)
        s = self.tail_slope if k == len(r) - 1 else self._slopes[k]
        return float(self._cum[k] + val[k] * r[k] / (s + 1.0) * ((v / r[k]) ** (s + 1.0) - 1.0))

    def tail_exponent(self) -> float:
        return self.eps if self.kind == "power" else float(self.tail_slope)


class LambdaCalculus:
    """Lambda1, Lambda2, their inverses and H(theta) for a profile Psi1.

    Lambda1(r) = F(sqrt r) / sqrt r and, with s = v^2,
    Lambda2(r) = int_{sqrt r}^inf 2 dv / F(v), where F(v) = int_0^v Psi1.
    """

    def __init__(self, profile: ScalarProfile, rtol: float = 1e-12, quadrature_F: bool = False):
        self.profile = profile
        self.quadrature_F = quadrature_F
        self.rtol = rtol
        self.V_tail = 1e3
        self._check_tail()

    def F(self, v: float) -> float:
        if v <= 0:
            return 0.0
        if not self.quadrature_F:
            return self.profile.integral(v)
        val, _ = integrate.quad(self.profile, 0.0, v, epsabs=0.0, epsrel=self.rtol, limit=self.profile.quad_limit)
        return val

    def _tail(self, V: float) -> float:
        """int_V^inf 2 dv / F(v) with F continued as a power law beyond V."""
        eps = self.profile.tail_exponent()
        if eps <= 0:
            raise DivergentTail("Psi1 does not grow: the Lambda2 tail integral diverges")
        if self.profile.kind == "power":
            return 2.0 * (1.0 + eps) / (self.profile.c1 * eps * V**eps)
        # F(v) ~ F(V) (v / V)^(1 + eps) for v >= V
        return 2.0 * V / (eps * self.F(V))

    def _check_tail(self) -> None:
        """Tail integral on doubling intervals must shrink geometrically."""
        V = 1.0
        pieces = []
        for _ in range(12):
            val, _ = integrate.quad(lambda v: 2.0 / self.F(v), V, 2 * V, epsrel=1e-8)
            pieces.append(val)
            V *= 2
        ratios = np.array(pieces[1:]) / np.array(pieces[:-1])
        if not np.all(ratios[-4:] < 0.97):
            raise DivergentTail("Lambda2 tail integral does not converge on doubling intervals")
        self.profile.tail_exponent()

    def L1(self, r: float) -> float:
        r = float(r)
        if r <= 0:
            return 0.0
        s = math.sqrt(r)
        return self.F(s) / s

    def L2(self, r: float) -> float:
        r = float(r)
        if r <= 0:
            return math.inf
        a = math.sqrt(r)
        V = max(self.V_tail, 2.0 * a)
        if self.profile.kind == "tabulated":
            V = max(V, 2.0 * float(self.profile.r[-1]))
        # decade pieces keep each quadrature on a well-scaled interval
        edges = np.geomspace(a, V, max(2, int(math.ceil(math.log10(V / a))) + 1))
        body = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(lambda v: 2.0 / self.F(v), lo, hi, epsabs=0.0, epsrel=self.rtol, limit=400)
            body += val
        return body + self._tail(V)

    def L1_inv(self, y: float) -> float:
        """inf{s >= 0: Lambda1(s) >= y} by monotone bisection."""
        if y <= 0:
            return 0.0
        return _bisect_increasing(self.L1, y)

    def L2_inv(self, y: float) -> float:
        """The s with Lambda2(s) = y (Lambda2 decreases from inf to 0)."""
        if y <= 0:
            raise ValueError("Lambda2^{-1} needs y > 0")
        return _bisect_increasing(lambda s: -self.L2(s), -y)

    def H(self, theta: float, h: Callable[[float], float] | None = None, kappa: float = 0.25,
          n_table: int = 193) -> float:
        """int_0^1 (theta/h) {1 + Lambda1^{-1}(theta/h) + Lambda2^{-1}(h/theta)} dr.

        ``h`` defaults to r^kappa. The inverses are tabulated on log grids and
        interpolated in log-log coordinates; the integral is checked for
        convergence at the origin.
        """
        if h is None:
            h = lambda r: r**kappa
        inv1, inv2 = self._inverse_tables(n_table)

        def integrand(r):
            hr = h(r)
            q = theta / hr
            return q * (1.0 + inv1(q) + inv2(1.0 / q))

        pieces = []
        lo = 1.0
        for _ in range(40):
            nxt = lo / 2.0
            val, _ = integrate.quad(integrand, nxt, lo, epsrel=1e-10, limit=200)
            pieces.append(val)
            lo = nxt
        tail = np.array(pieces[-8:])
        ratios = tail[1:] / tail[:-1]
        if not np.all(ratios < 0.999):
            raise DivergentTail("H(theta) diverges at r = 0 for this h-profile")
        q = float(np.mean(ratios))
        return float(sum(pieces) + pieces[-1] * q / (1.0 - q))

    def _inverse_tables(self, n: int):
        if getattr(self, "_tables", None) is not None and self._tables[0] == n:
            return self._tables[1]
        s = np.geomspace(1e-12, 1e12, n)
        l1 = np.array([self.L1(v) for v in s])
        l2 = np.array([self.L2(v) for v in s])
        ls, ll1, ll2 = np.log(s), np.log(l1), -np.log(l2)

        def inv1(y):
            return float(np.exp(_loglog(math.log(y), ll1, ls)))

        def inv2(y):
            return float(np.exp(_loglog(-math.log(y), ll2, ls)))

        self._tables = (n, (inv1, inv2))
        return inv1, inv2


def _loglog(x: float, xs: np.ndarray, ys: np.ndarray) -> float:
    """Linear interpolation, extended linearly past both ends."""
    if x < xs[0]:
        return ys[0] + (ys[1] - ys[0]) / (xs[1] - xs[0]) * (x - xs[0])
    if x > xs[-1]:
        return ys[-1] + (ys[-1] - ys[-2]) / (xs[-1] - xs[-2]) * (x - xs[-1])
    return float(np.interp(x, xs, ys))


def _bisect_increasing(f: Callable[[float], float], y: float) -> float:
    """Smallest s >= 0 with f(s) >= y for increasing f (to relative 1e-14)."""
    hi = 1.0
    for _ in range(2000):
        if f(hi) >= y:
            break
        hi *= 2.0
    else:
        raise BracketFailure("value not reached")
    lo = 0.0
    while hi > 1e-300 and f(hi / 2.0) >= y:
        hi /= 2.0
    lo = hi / 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi or hi - lo <= 1e-15 * hi:
            break
        if f(mid) >= y:
            hi = mid
        else:
            lo = mid
    return hi


def lambda_calculus(profile: ScalarProfile) -> LambdaCalculus:
    return LambdaCalculus(profile)


# Envelope from heat-kernel norm bounds

def ppn_norm_bound(c: float, delta: float) -> Callable[[float], float]:
    """t -> exp[c + c t^{-delta/(delta-1)}]."""
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    return lambda t: math.exp(c + c * t ** (-delta / (delta - 1.0)))


def g_phi(t: float, phi: YoungFunction, mu_hat: EmpiricalMeasure,
          norm_bound: Callable[[float], float]) -> float:
    """inf{r > 0: mean over ordered pairs of Phi(|x_i - x_j| / r) <= norm_bound(t)^{-2}}."""
    bound = float(norm_bound(t))
    if not bound >= 1:
        raise ValueError("norm_bound(t) must be >= 1")
    D = distance_matrix(mu_hat, mu_hat).ravel()
    return gauge_norm(D, phi, level=bound**-2.0)
