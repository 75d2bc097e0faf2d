"""Experiments: distance decay curves, rate fits, coupling times, gradient and equilibrium checks."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dsl
from .coupling import CouplingKind, PairEnsemble, moment_curve, simulate_endpoints, simulate_pairs
from .errors import EmptyInput, InsufficientDecay, NonFinite, StencilError
from .model import ModelSpec
from .ot import EmpiricalMeasure, YoungFunction, gauge_norm, wasserstein_inf, wasserstein_p, wasserstein_phi
from .rng import derive_seed
from .theory import RateReport, estimate_Kp, select_lambda0

COUPLING = "coupling-upper-bound"
EMPIRICAL_OT = "empirical-OT"
_BLOCKS = 8


@dataclass
class ExperimentConfig:
    model: ModelSpec
    coupling: CouplingKind
    x: Sequence[float]
    y: Sequence[float]
    horizon: float
    dt: float
    n_paths: int = 1000
    grid_dt: float | None = None
    distances: Sequence = (2.0,)
    seed: int = 0
    n_ot: int | None = None
    couple_threshold: float = 0.0
    workers: int = 1

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.n_paths < 2:
            raise ValueError("n_paths must be >= 2 for standard errors")
        if not self.distances:
            raise ValueError("request at least one distance")

    @property
    def rho0(self) -> float:
        return float(np.linalg.norm(self.x - self.y))


def distance_label(dist) -> str:
    if isinstance(dist, YoungFunction):
        return f"phi[{dist.name}]"
    return "inf" if math.isinf(dist) else f"p{float(dist):g}"


@dataclass
class ContractionCurve:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    estimator: str
    distance: str
    n: int
    samples: np.ndarray | None = field(default=None, repr=False)
    p: float | None = None

    def columns(self) -> dict:
        return {"t": self.times, "value": self.values, "stderr": self.stderr}


@dataclass
class ContractionResult:
    curves: list
    ordering_violations: dict
    ensemble: PairEnsemble | None = field(default=None, repr=False)

    def get(self, distance: str, estimator: str) -> ContractionCurve:
        for c in self.curves:
            if c.distance == distance and c.estimator == estimator:
                return c
        raise KeyError((distance, estimator))


def _block_stderr(stat: Callable[[np.ndarray, np.ndarray], float], A: np.ndarray, B: np.ndarray) -> float:
    """Standard error of a cloud statistic from its spread over disjoint blocks."""
    n = min(len(A), len(B))
    k = min(_BLOCKS, n // 2)
    if k < 2:
        return 0.0
    vals = [stat(a, b) for a, b in zip(np.array_split(A[:n], k), np.array_split(B[:n], k))]
    return float(np.std(vals, ddof=1) / math.sqrt(k))


def _ot_value(dist, A: np.ndarray, B: np.ndarray) -> float:
    mu, nu = EmpiricalMeasure(A), EmpiricalMeasure(B)
    if isinstance(dist, YoungFunction):
        return wasserstein_phi(mu, nu, dist).value
    if math.isinf(dist):
        return wasserstein_inf(mu, nu)[0]
    return wasserstein_p(mu, nu, dist)[0]


def _coupling_curve(dist, times, R) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dist, YoungFunction):
        vals = np.array([gauge_norm(R[:, k], dist) for k in range(R.shape[1])])
        k = min(_BLOCKS, R.shape[0] // 2)
        se = np.zeros_like(vals)
        if k >= 2:
            for j in range(R.shape[1]):
                sub = [gauge_norm(b, dist) for b in np.array_split(R[:, j], k)]
                se[j] = np.std(sub, ddof=1) / math.sqrt(k)
        return vals, se
    if math.isinf(dist):
        return R.max(axis=0), np.zeros(R.shape[1])
    return moment_curve(R, dist)


def contraction_experiment(cfg: ExperimentConfig) -> ContractionResult:
    """Both estimators of W(delta_x P_t, delta_y P_t) for every requested distance.

    Coupling-upper-bound: the coupled pair's distance, averaged over paths.
    Empirical-OT: exact transport between independent X- and Y-clouds.
    """
    model = cfg.model
    ens = simulate_pairs(model, cfg.coupling, cfg.x, cfg.y, cfg.horizon, cfg.dt, cfg.seed, cfg.n_paths,
                         cfg.grid_dt, couple_threshold=cfg.couple_threshold, workers=cfg.workers)
    if ens.diverged.any():
        raise NonFinite(f"{int(ens.diverged.sum())} coupled paths diverged; experiment aborted")
    order = np.argsort(ens.path_indices, kind="stable")
    R = ens.rho[order]
    times = ens.times
    n_ot = min(cfg.n_ot or cfg.n_paths, cfg.n_paths)
    _, XA = simulate_endpoints(model, cfg.x, cfg.horizon, cfg.dt, derive_seed(cfg.seed, 1), n_ot, cfg.grid_dt)
    _, XB = simulate_endpoints(model, cfg.y, cfg.horizon, cfg.dt, derive_seed(cfg.seed, 2), n_ot, cfg.grid_dt)

    curves, violations = [], {}
    for dist in cfg.distances:
        label = distance_label(dist)
        vals, se = _coupling_curve(dist, times, R)
        p = None if isinstance(dist, YoungFunction) else float(dist)
        up = ContractionCurve(times, vals, se, COUPLING, label, R.shape[0], R, p)

        def one(k, dist=dist):
            A, B = XA[:, k], XB[:, k]
            return _ot_value(dist, A, B), _block_stderr(lambda a, b: _ot_value(dist, a, b), A, B)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                res = list(pool.map(one, range(len(times))))
        else:
            res = [one(k) for k in range(len(times))]
        ot_vals = np.array([r[0] for r in res])
        ot_se = np.array([r[1] for r in res])
        ot = ContractionCurve(times, ot_vals, ot_se, EMPIRICAL_OT, label, n_ot, None, p)
        # any coupling dominates the transport infimum; allow for finite-sample OT bias
        pp = 1.0 if p is None else p
        allowance = n_ot ** (-1.0 / (max(model.d, 2) * pp))
        slack = 3.0 * (np.hypot(se, ot_se) + allowance)
        violations[label] = int(np.sum(ot_vals > vals + slack))
        curves += [up, ot]
    return ContractionResult(curves, violations, ens)


@dataclass
class FitReport:
    c_hat: float
    lam_hat: float
    c_ci: tuple
    lam_ci: tuple
    window: tuple
    n_points: int
    theory_c: float | None = None
    theory_lam: float | None = None
    envelope_violations: int | None = None
    n_checked: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _lsq(t: np.ndarray, w: np.ndarray) -> tuple[float, float, float]:
    """Least squares log w = log c - lam t; returns (c, lam, stderr of lam)."""
    A = np.column_stack([np.ones_like(t), -t])
    coef, *_ = np.linalg.lstsq(A, np.log(w), rcond=None)
    resid = np.log(w) - A @ coef
    dof = len(t) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(math.exp(coef[0])), float(coef[1]), float(math.sqrt(max(cov[1, 1], 0.0)))


def fit_rate(curve: ContractionCurve, theory: RateReport | None = None, rho0: float | None = None,
             n_boot: int = 200, seed: int = 0, level: float = 0.95) -> FitReport:
    """Exponential fit on the usable window after burn-in.

    Burn-in ends at the first time with W < W(0)/2; usable points also need
    W > 3 stderr. Confidence intervals come from a path-level bootstrap when
    the curve carries its path samples (resample seeds derive from ``seed``),
    otherwise from the least-squares standard error.
    """
    t, w, se = (np.asarray(v, dtype=float) for v in (curve.times, curve.values, curve.stderr))
    if w.size == 0 or not w[0] > 0:
        raise InsufficientDecay("curve does not start positive")
    below = np.nonzero(w < 0.5 * w[0])[0]
    if below.size == 0:
        raise InsufficientDecay("curve never falls below half its initial value")
    start = below[0]
    usable = np.zeros_like(w, dtype=bool)
    usable[start:] = True
    usable &= (w > 3.0 * se) & (w > 0)
    # the window ends at the first unusable time after burn-in
    idx = np.arange(start, len(w))
    stop = idx[~usable[start:]]
    end = stop[0] if stop.size else len(w)
    window = np.arange(start, end)
    if window.size < 4:
        raise InsufficientDecay(f"only {window.size} usable points after burn-in")
    c_hat, lam_hat, lam_se = _lsq(t[window], w[window])
    z = 1.959963984540054 if level == 0.95 else _normal_quantile(0.5 + level / 2)

    if curve.samples is not None and curve.p is not None and math.isfinite(curve.p) and n_boot > 0:
        rng = np.random.default_rng(seed)
        S = curve.samples[:, window]
        n = S.shape[0]
        cs, ls = [], []
        for _ in range(n_boot):
            pick = rng.integers(0, n, n)
            v, _ = moment_curve(S[pick], curve.p)
            if np.all(v > 0):
                c_b, l_b, _ = _lsq(t[window], v)
                cs.append(c_b)
                ls.append(l_b)
        alpha = 100 * (1 - level) / 2
        if ls:
            lam_ci = tuple(np.percentile(ls, [alpha, 100 - alpha]).tolist())
            c_ci = tuple(np.percentile(cs, [alpha, 100 - alpha]).tolist())
        else:
            lam_ci, c_ci = (lam_hat, lam_hat), (c_hat, c_hat)
    else:
        lam_ci = (lam_hat - z * lam_se, lam_hat + z * lam_se)
        c_ci = (c_hat, c_hat)

    report = FitReport(c_hat, lam_hat, c_ci, lam_ci, (float(t[window[0]]), float(t[window[-1]])), int(window.size))
    if theory is not None:
        r0 = float(w[0]) if rho0 is None else float(rho0)
        envelope = theory.c * np.exp(-theory.lam * t) * r0 + 3.0 * se
        report.theory_c, report.theory_lam = theory.c, theory.lam
        report.envelope_violations = int(np.sum(w > envelope))
        report.n_checked = int(t.size)
    return report


def _normal_quantile(q: float) -> float:
    from scipy.stats import norm

    return float(norm.ppf(q))


def lyapunov_curve(ensemble: PairEnsemble, rate: RateReport) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and stderr of rho_bar(rho_t) over paths, on the ensemble's grid."""
    R = ensemble.rho
    if np.any(np.isnan(R)):
        raise NonFinite("ensemble contains diverged paths")
    V = rate.rho_bar(R)
    return ensemble.times, V.mean(axis=0), V.std(axis=0, ddof=1) / math.sqrt(R.shape[0])


@dataclass
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    n: int
    censored: float
    threshold_sensitivity: dict = field(default_factory=dict)

    def columns(self) -> dict:
        return {"t": self.times, "survival": self.survival, "stderr": self.stderr}


def survival_from_times(T: np.ndarray, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direct empirical P(T > t); uncoupled paths (NaN) survive the whole horizon."""
    n = T.shape[0]
    alive = np.where(np.isnan(T)[:, None], True, T[:, None] > times[None, :])
    S = alive.mean(axis=0)
    return S, np.sqrt(S * (1.0 - S) / n)


def coupling_time_experiment(cfg: ExperimentConfig, thresholds: Sequence[float] = ()) -> SurvivalCurve:
    """Survival curve of the coupling time; ``thresholds`` reruns with other detection thresholds."""
    if not cfg.coupling.reflects:
        raise ValueError("coupling times need a reflection or hybrid coupling")
    ens = simulate_pairs(cfg.model, cfg.coupling, cfg.x, cfg.y, cfg.horizon, cfg.dt, cfg.seed, cfg.n_paths,
                         cfg.grid_dt, couple_threshold=cfg.couple_threshold, workers=cfg.workers)
    S, se = survival_from_times(ens.T, ens.times)
    sens = {}
    for thr in thresholds:
        alt = simulate_pairs(cfg.model, cfg.coupling, cfg.x, cfg.y, cfg.horizon, cfg.dt, cfg.seed, cfg.n_paths,
                             cfg.grid_dt, couple_threshold=float(thr), workers=cfg.workers)
        sens[f"{float(thr):g}"] = survival_from_times(alt.T, alt.times)[0].tolist()
    return SurvivalCurve(ens.times, S, se, cfg.n_paths, float(np.mean(np.isnan(ens.T))), sens)


def scalar_function(f, d: int) -> Callable[[np.ndarray], np.ndarray]:
    """An expression over x1..xd (or a callable on (n, d) arrays) as a vectorised function."""
    if callable(f):
        return f
    node = dsl.parse_expression(str(f), dsl.state_variables(d))
    return lambda X: dsl.evaluate(node, np.atleast_2d(X))


def _grad(fn, X: np.ndarray) -> np.ndarray:
    h = 1e-6 * np.maximum(1.0, np.abs(X))
    G = np.empty_like(X)
    for i in range(X.shape[1]):
        E = np.zeros_like(X)
        E[:, i] = h[:, i]
        G[:, i] = (fn(X + E) - fn(X - E)) / (2.0 * h[:, i])
    return G


@dataclass
class KuwadaReport:
    probes: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    ratio: np.ndarray
    error: np.ndarray
    eta: np.ndarray
    K_p: float
    p: float
    t: float
    max_ratio: float
    passed: bool

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def kuwada_check(model: ModelSpec, f, p: float, t: float, probes, dt: float = 1e-3, n_paths: int = 10_000,
                 seed: int = 0, K_p: float | None = None, eta: float | None = None, box: float | None = None,
                 max_eta: float = 0.5) -> KuwadaReport:
    """Compare |grad P_t f| with e^{-K_p t} (P_t |grad f|^q)^{1/q}, q = p/(p-1), at probe points.

    The gradient of P_t f is a central difference of Monte Carlo estimates
    with common random numbers across the stencil; the step is
    sqrt(MC stderr of P_t f) unless given. The finite-difference error is
    estimated from the same stencil at twice the step.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    fn = scalar_function(f, model.d)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.shape[1] != model.d:
        probes = probes.reshape(-1, model.d)
    if K_p is None:
        reach = float(np.max(np.abs(probes))) + 3.0 if box is None else box
        K_p = estimate_Kp(model, p, reach, seed=seed).constants["K_p"]
    q = math.inf if p == 1 else p / (p - 1.0)

    def endpoints(x0):
        _, S = simulate_endpoints(model, x0, t, dt, seed, n_paths)
        return S[:, -1]

    P = len(probes)
    lhs, rhs, err, etas = (np.zeros(P) for _ in range(4))
    for j, x in enumerate(probes):
        base = fn(endpoints(x))
        mc = float(np.std(base, ddof=1) / math.sqrt(n_paths))
        h = math.sqrt(mc) if eta is None else float(eta)
        if mc == 0.0 and eta is None:
            g_end = np.linalg.norm(_grad(fn, endpoints(x)), axis=1)
            if np.all(g_end == 0):
                etas[j] = 0.0
                continue
            raise StencilError("zero Monte Carlo spread for a non-constant f; set the stencil step")
        if not 0 < h <= max_eta * max(1.0, float(np.linalg.norm(x))):
            raise StencilError(f"stencil step {h:.3g} is too coarse for the Monte Carlo noise; add paths")
        etas[j] = h
        g1, g2, var1 = np.zeros(model.d), np.zeros(model.d), np.zeros(model.d)
        for i in range(model.d):
            e = np.zeros(model.d)
            e[i] = 1.0
            D1 = (fn(endpoints(x + h * e)) - fn(endpoints(x - h * e))) / (2.0 * h)
            D2 = (fn(endpoints(x + 2 * h * e)) - fn(endpoints(x - 2 * h * e))) / (4.0 * h)
            g1[i], g2[i] = D1.mean(), D2.mean()
            var1[i] = D1.var(ddof=1) / n_paths
        norm_g = float(np.linalg.norm(g1))
        mc_g = float(math.sqrt(np.sum((g1 / norm_g) ** 2 * var1))) if norm_g > 0 else float(math.sqrt(var1.sum()))
        fd_g = float(np.linalg.norm(g2 - g1)) / 3.0
        grads = np.linalg.norm(_grad(fn, endpoints(x)), axis=1)
        if math.isinf(q):
            m, m_se = float(grads.max()), 0.0
            r = m
            r_se = 0.0
        else:
            vals = grads**q
            m = float(vals.mean())
            m_se = float(vals.std(ddof=1) / math.sqrt(n_paths))
            r = m ** (1.0 / q)
            r_se = (1.0 / q) * m ** (1.0 / q - 1.0) * m_se if m > 0 else 0.0
        r *= math.exp(-K_p * t)
        r_se *= math.exp(-K_p * t)
        lhs[j], rhs[j] = norm_g, r
        if r > 0:
            err[j] = (norm_g / r) * math.sqrt((math.hypot(mc_g, fd_g) / max(norm_g, 1e-300)) ** 2 + (r_se / r) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
    passed = bool(np.all(ratio <= 1.0 + 3.0 * err))
    return KuwadaReport(probes, lhs, rhs, ratio, err, etas, float(K_p), float(p), float(t), float(ratio.max()), passed)


@dataclass
class EquilibriumCurve:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n: int
    spacing: float
    floor: float

    def columns(self) -> dict:
        return {"t": self.times, "value": self.values, "stderr": self.stderr}


def rough_rate(model: ModelSpec, x0, dt: float, seed: int, horizon: float = 10.0, n_paths: int = 64) -> float:
    """A pilot decay rate: synchronous pair, falling back to reflection if that does not contract."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = x0 + 1.0 / math.sqrt(model.d)
    for kind in (CouplingKind.synchronous(), None):
        if kind is None:
            kind = CouplingKind.reflection(select_lambda0(model, float(np.max(np.abs(x0))) + 3.0))
        cfg = ExperimentConfig(model, kind, x0, y0, horizon, dt, n_paths, grid_dt=horizon / 50,
                               distances=(1.0,), seed=derive_seed(seed, 20))
        ens = simulate_pairs(model, kind, cfg.x, cfg.y, horizon, dt, cfg.seed, n_paths, cfg.grid_dt)
        vals, se = moment_curve(ens.rho, 1.0)
        try:
            return fit_rate(ContractionCurve(ens.times, vals, se, COUPLING, "p1", n_paths), n_boot=0).lam_hat
        except InsufficientDecay:
            continue
    raise InsufficientDecay("pilot run shows no decay; cannot choose the sampling spacing")


def equilibrium_sample(model: ModelSpec, x0, n: int, dt: float, seed: int, n_chains: int = 64,
                       spacing: float | None = None) -> tuple[EmpiricalMeasure, float]:
    """Parallel chains sampled every ``spacing`` after one spacing of burn-in.

    The spacing defaults to 10 / (pilot decay rate), rounded up to a multiple of dt.
    """
    if spacing is None:
        spacing = 10.0 / max(rough_rate(model, x0, dt, seed), 1e-3)
    steps = max(1, math.ceil(spacing / dt - 1e-9))
    spacing = steps * dt
    per_chain = math.ceil(n / n_chains)
    horizon = spacing * (per_chain + 1)
    _, S = simulate_endpoints(model, x0, horizon, dt, derive_seed(seed, 10), n_chains, spacing)
    pts = S[:, 2:, :].transpose(1, 0, 2).reshape(-1, model.d)[:n]
    return EmpiricalMeasure(pts), spacing


def equilibrium_experiment(model: ModelSpec, x0, times: Sequence[float], dt: float, n: int = 4096,
                           seed: int = 0, n_chains: int = 64, spacing: float | None = None,
                           mu_hat: EmpiricalMeasure | None = None) -> EquilibriumCurve:
    """W_2(delta_x P_t, mu_hat) from fresh clouds of ``n`` paths at each t."""
    if n < 2:
        raise EmptyInput("need at least two samples")
    if mu_hat is None:
        mu_hat, spacing = equilibrium_sample(model, x0, n, dt, seed, n_chains, spacing)
    M = mu_hat.points
    vals, ses = [], []
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    for i, t in enumerate(times):
        if t == 0:
            C = np.tile(x0, (n, 1))
        else:
            _, S = simulate_endpoints(model, x0, t, dt, derive_seed(seed, 100 + i), n)
            C = S[:, -1]
        stat = lambda a, b: wasserstein_p(EmpiricalMeasure(a), EmpiricalMeasure(b), 2.0)[0]
        vals.append(stat(C, M[: len(C)]))
        ses.append(_block_stderr(stat, C, M))
    return EquilibriumCurve(np.asarray(times, dtype=float), np.array(vals), np.array(ses), n,
                            float(spacing or 0.0), float(n ** -0.5))
