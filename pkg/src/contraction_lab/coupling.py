"""Pairs of Euler-Maruyama solutions under synchronous, reflection and hybrid couplings.

With ``a = sigma sigma^T >= lambda0^2 I`` the noise is split as
``sigma dB = sigma0 dB' + lambda0 dB''`` with ``sigma0 = sqrt(a - lambda0^2 I)``.
The ``B'`` channel is always shared; the ``B''`` channel is mirrored for Y
across the hyperplane orthogonal to ``X - Y``. The hybrid coupling splits
``B''`` once more into a reflected part weighted by ``h(rho)`` and a shared
part weighted by ``sqrt(1 - h(rho)^2)``.

Noise layout per step (lanes of the counter-based generator), with
``w = max(d, m)``::

    [0, w)          shared block: sigma xi[:m] (synchronous) or sigma0 xi[:d]
    [w, w + d)      reflected block B''
    [w + d, w + 2d) hybrid shared block

A separate uniform stream drives the Brownian-bridge crossing test.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import EigenvalueViolation, EmptyInput, NonFinite
from .linalg import NEG_TOL, matvec, rowdot, sigma0_from_a
from .model import ModelSpec
from ._kernels import pair_kernel
from .rng import CounterRNG

DIVERGENCE_BOUND = 1e8


@dataclass(frozen=True)
class CutoffProfile:
    """h = 1 on [0, r0], h = 0 on [r0 + 1, inf), C^1 together with sqrt(1 - h^2)."""

    r0: float

    def __call__(self, r):
        return cutoff_eval(self, r)


def cutoff_eval(profile: CutoffProfile, r):
    """(h(r), g(r)) with h = cos(pi/2 s(u)), g = sin(pi/2 s(u)), s(u) = 3u^2 - 2u^3."""
    r = np.asarray(r, dtype=float)
    with np.errstate(invalid="ignore"):
        u = np.clip(r - profile.r0, 0.0, 1.0)
    u = np.where(np.isnan(u), 0.0, u)
    s = u * u * (3.0 - 2.0 * u)
    h = np.where(u >= 1.0, 0.0, np.cos(0.5 * np.pi * s))
    g = np.where(u >= 1.0, 1.0, np.sin(0.5 * np.pi * s))
    if h.ndim == 0:
        return float(h), float(g)
    return h, g


@dataclass(frozen=True)
class CouplingKind:
    kind: str
    lambda0: float | None = None
    cutoff: CutoffProfile | None = None

    def __post_init__(self):
        if self.kind not in ("synchronous", "reflection", "hybrid"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kind != "synchronous" and not (self.lambda0 and self.lambda0 > 0):
            raise ValueError(f"{self.kind} coupling needs lambda0 > 0")
        if self.kind == "hybrid" and self.cutoff is None:
            raise ValueError("hybrid coupling needs a cutoff profile")

    @classmethod
    def synchronous(cls) -> "CouplingKind":
        return cls("synchronous")

    @classmethod
    def reflection(cls, lambda0: float) -> "CouplingKind":
        return cls("reflection", float(lambda0))

    @classmethod
    def hybrid(cls, lambda0: float, r0: float) -> "CouplingKind":
        return cls("hybrid", float(lambda0), CutoffProfile(float(r0)))

    @property
    def reflects(self) -> bool:
        return self.kind != "synchronous"


@dataclass(frozen=True)
class CoupledState:
    t: float
    X: np.ndarray
    Y: np.ndarray
    coupled: bool = False
    T: float | None = None

    @property
    def rho(self) -> float:
        return float(np.linalg.norm(self.X - self.Y))


def noise_width(model: ModelSpec) -> int:
    return max(model.d, model.m) + 2 * model.d


class _Stepper:
    """One vectorised Euler-Maruyama step for a batch of pairs."""

    def __init__(self, model: ModelSpec, kind: CouplingKind, dt: float,
                 couple_threshold: float = 0.0, bridge: bool = True):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.model, self.kind, self.dt = model, kind, float(dt)
        self.scale = math.sqrt(2.0 * dt)
        self.threshold = float(couple_threshold)
        self.bridge = bridge
        self.w = max(model.d, model.m)
        self.sigma_const = model.constant_sigma
        self.sigma0_const = None
        if kind.reflects and self.sigma_const is not None:
            S = self.sigma_const
            self.sigma0_const = sigma0_from_a(S @ S.T, kind.lambda0)
        self.skip_shared = (
            kind.reflects and self.sigma0_const is not None and not np.any(self.sigma0_const)
        )

    def sigma0(self, X):
        if self.sigma0_const is not None:
            return self.sigma0_const
        return sigma0_from_a(self.model.a(X), self.kind.lambda0)

    def draw(self, rng: CounterRNG, keys, step):
        d, w = self.model.d, self.w
        shared = None
        if not self.skip_shared:
            shared = rng.normals(keys, step, self.model.m if not self.kind.reflects else d, 0)
        refl = rng.normals(keys, step, d, w) if self.kind.reflects else None
        extra = rng.normals(keys, step, d, w + d) if self.kind.kind == "hybrid" else None
        u = rng.uniforms(keys, step)[:, 0] if (self.bridge and self.kind.reflects) else None
        return shared, refl, extra, u

    def split(self, block: np.ndarray):
        """Slice a full noise block (n, noise_width) into the channels this kind uses."""
        d, w, m = self.model.d, self.w, self.model.m
        shared = None if self.skip_shared else block[:, : (d if self.kind.reflects else m)]
        refl = block[:, w : w + d] if self.kind.reflects else None
        extra = block[:, w + d : w + 2 * d] if self.kind.kind == "hybrid" else None
        return shared, refl, extra

    def __call__(self, X, Y, shared, refl, extra, u=None, glued=None):
        """Advance (X, Y); returns (X_new, Y_new, newly_coupled)."""
        model, kind, dt, c = self.model, self.kind, self.dt, self.scale
        Z = X - Y
        rho = np.sqrt(rowdot(Z, Z))
        safe = np.where(rho > 0, rho, 1.0)
        e = Z / safe[:, None]
        e[rho == 0] = 0.0
        bX, bY = model.b(X), model.b(Y)
        if kind.kind == "synchronous":
            if self.sigma_const is not None:
                nX = nY = matvec(self.sigma_const, shared)
            else:
                nX, nY = matvec(model.sigma(X), shared), matvec(model.sigma(Y), shared)
            Xn = X + bX * dt + c * nX
            Yn = Y + bY * dt + c * nY
            h = None
            s0x = s0y = None
        else:
            lam = kind.lambda0
            if kind.kind == "hybrid":
                h, g = cutoff_eval(kind.cutoff, rho)
            else:
                h, g = np.ones_like(rho), np.zeros_like(rho)
            ref = refl - 2.0 * e * rowdot(e, refl)[:, None]
            nX = lam * (h[:, None] * refl)
            nY = lam * (h[:, None] * ref)
            if extra is not None:
                nX = nX + lam * (g[:, None] * extra)
                nY = nY + lam * (g[:, None] * extra)
            if self.skip_shared:
                s0x = s0y = None
            else:
                if self.sigma0_const is not None:
                    s0x = s0y = self.sigma0_const
                    common = matvec(s0x, shared)
                    nX, nY = common + nX, common + nY
                else:
                    s0x, s0y = self.sigma0(X), self.sigma0(Y)
                    nX = matvec(s0x, shared) + nX
                    nY = matvec(s0y, shared) + nY
            Xn = X + bX * dt + c * nX
            Yn = Y + bY * dt + c * nY
        if glued is not None and np.any(glued):
            Yn[glued] = Xn[glued]
        Zn = Xn - Yn
        signed = rowdot(Zn, e)
        hit = (signed <= self.threshold) & (rho > 0)
        if kind.reflects and u is not None:
            var = 8.0 * kind.lambda0**2 * h**2
            if s0x is not None and s0y is not None and s0x is not s0y:
                dproj = matvec(np.swapaxes(s0x - s0y, -1, -2) if np.ndim(s0x) == 3 else (s0x - s0y).T, e)
                var = var + 2.0 * rowdot(dproj, dproj)
            ok = (~hit) & (var > 0) & (rho > self.threshold)
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                p = np.exp(-2.0 * (rho - self.threshold) * (signed - self.threshold) / (np.where(var > 0, var, 1.0) * dt))
            hit = hit | (ok & (u < p))
        if glued is not None:
            hit = hit & ~glued
        return Xn, Yn, hit


def step_pair(model: ModelSpec, kind: CouplingKind, state: CoupledState, dt: float,
              gaussians, uniform: float | None = None, couple_threshold: float = 0.0) -> CoupledState:
    """One step from ``state`` using a full noise block of length ``noise_width(model)``.

    Without ``uniform`` no Brownian-bridge crossing test is made; the pair
    couples only when the new separation, projected on the old chord,
    falls to ``couple_threshold`` or below.
    """
    stepper = _Stepper(model, kind, dt, couple_threshold, bridge=uniform is not None)
    block = np.asarray(gaussians, dtype=float).reshape(1, -1)
    if block.shape[1] != noise_width(model):
        raise ValueError(f"noise block must have {noise_width(model)} entries")
    X = np.asarray(state.X, dtype=float).reshape(1, -1)
    Y = np.asarray(state.Y, dtype=float).reshape(1, -1)
    if kind.reflects:
        _check_admissible(model, kind, np.vstack([X, Y]))
    shared, refl, extra = stepper.split(block)
    u = None if uniform is None else np.array([float(uniform)])
    glued = np.array([state.coupled])
    Xn, Yn, hit = stepper(X, Y, shared, refl, extra, u, glued)
    t = state.t + dt
    if state.coupled:
        return CoupledState(t, Xn[0], Xn[0].copy(), True, state.T)
    if hit[0]:
        return CoupledState(t, Xn[0], Xn[0].copy(), True, t)
    return CoupledState(t, Xn[0], Yn[0], False, None)


def _check_admissible(model: ModelSpec, kind: CouplingKind, X: np.ndarray) -> None:
    a = model.a(X)
    w_min = float(np.linalg.eigvalsh(a).min())
    if w_min - kind.lambda0**2 < -NEG_TOL * max(1.0, kind.lambda0**2):
        raise EigenvalueViolation(
            f"lambda0^2 = {kind.lambda0**2:.6g} exceeds min eigenvalue {w_min:.6g} of sigma sigma^T"
        )


@dataclass
class PairPath:
    t: np.ndarray
    rho: np.ndarray
    T: float | None
    seed: int
    path_index: int = 0
    states: np.ndarray | None = None
    diverged: bool = False

    @property
    def coupled(self) -> np.ndarray:
        if self.T is None:
            return np.zeros(len(self.t), dtype=bool)
        return self.t >= self.T - 1e-12 * max(1.0, self.T)

    @property
    def censored(self) -> bool:
        return self.T is None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "rho", "coupled"])
            for t, r, c in zip(self.t, self.rho, self.coupled):
                writer.writerow([repr(float(t)), repr(float(r)), int(c)])

    MAGIC = b"CPLPATH1"

    def to_bytes(self) -> bytes:
        n = len(self.t)
        head = self.MAGIC + struct.pack("<Qd", n, math.nan if self.T is None else self.T)
        body = np.concatenate([self.t, self.rho, self.coupled.astype(float)]).astype("<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes, seed: int = 0, path_index: int = 0) -> "PairPath":
        if data[:8] != cls.MAGIC:
            raise ValueError("not a CPLPATH1 file")
        n, T = struct.unpack("<Qd", data[8:24])
        arr = np.frombuffer(data[24:], dtype="<f8")
        if arr.size != 3 * n:
            raise ValueError("truncated CPLPATH1 payload")
        return cls(arr[:n].copy(), arr[n : 2 * n].copy(), None if math.isnan(T) else float(T), seed, path_index)

    @classmethod
    def from_csv(cls, path, seed: int = 0, path_index: int = 0) -> "PairPath":
        rows = list(csv.DictReader(open(path)))
        t = np.array([float(r["t"]) for r in rows])
        rho = np.array([float(r["rho"]) for r in rows])
        coupled = np.array([int(r["coupled"]) for r in rows], dtype=bool)
        T = float(t[np.argmax(coupled)]) if coupled.any() else None
        return cls(t, rho, T, seed, path_index)


@dataclass
class PairEnsemble:
    """Vectorised result of ``simulate_pairs``: row i is path ``path_indices[i]``."""

    times: np.ndarray
    rho: np.ndarray
    T: np.ndarray
    diverged: np.ndarray
    seed: int
    dt: float
    path_indices: np.ndarray
    states: np.ndarray | None = None
    couple_threshold: float = 0.0

    def __len__(self) -> int:
        return self.rho.shape[0]

    def path(self, i: int) -> PairPath:
        T = None if math.isnan(self.T[i]) else float(self.T[i])
        st = None if self.states is None else self.states[i]
        return PairPath(self.times, self.rho[i], T, self.seed, int(self.path_indices[i]), st, bool(self.diverged[i]))

    def __iter__(self) -> Iterator[PairPath]:
        return (self.path(i) for i in range(len(self)))


def _grid(horizon: float, dt: float, grid_dt: float | None) -> tuple[int, int]:
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a positive multiple of dt")
    every = 1 if grid_dt is None else int(round(grid_dt / dt))
    if every < 1 or abs(every * dt - (grid_dt or dt)) > 1e-9 * max(1.0, grid_dt or dt) or n_steps % every:
        raise ValueError("grid spacing must be a multiple of dt dividing the horizon")
    return n_steps, every


def _simulate_chunk(model, kind, x, y, n_steps, every, dt, rng, paths, threshold, bridge, record_states):
    n, d = len(paths), model.d
    K = n_steps // every
    rho_out = np.zeros((n, K + 1))
    T = np.full(n, np.nan)
    diverged = np.zeros(n, dtype=bool)
    states = np.zeros((n, K + 1, 2, d)) if record_states else None
    rho0 = float(np.linalg.norm(x - y))
    rho_out[:, 0] = rho0
    X = np.tile(x, (n, 1))
    Y = np.tile(y, (n, 1))
    if states is not None:
        states[:, 0, 0], states[:, 0, 1] = X, Y
    if rho0 == 0.0:
        T[:] = 0.0
        if not record_states:
            return rho_out, T, diverged, states
    stepper = _Stepper(model, kind, dt, threshold, bridge)
    keys = rng.path_keys(paths)
    active = np.arange(n)
    glued = np.zeros(n, dtype=bool) if record_states else None
    if rho0 == 0.0:
        glued[:] = True
    for k in range(n_steps):
        if active.size == 0:
            break
        shared, refl, extra, u = stepper.draw(rng, keys, k)
        g = None if glued is None else glued[active]
        Xn, Yn, hit = stepper(X, Y, shared, refl, extra, u, g)
        t_next = (k + 1) * dt
        if hit.any():
            T[active[hit]] = t_next
            Yn[hit] = Xn[hit]
            if glued is not None:
                glued[active[hit]] = True
        bad = ~(np.all(np.abs(Xn) <= DIVERGENCE_BOUND, axis=1) & np.all(np.abs(Yn) <= DIVERGENCE_BOUND, axis=1))
        if bad.any():
            diverged[active[bad]] = True
            rho_out[active[bad], (k + every) // every :] = np.nan
        if (k + 1) % every == 0:
            col = (k + 1) // every
            Zn = Xn - Yn
            ok = ~bad
            rho_out[active[ok], col] = np.sqrt(rowdot(Zn[ok], Zn[ok]))
            if states is not None:
                states[active, col, 0], states[active, col, 1] = Xn, Yn
        keep = ~bad if record_states else ~(bad | hit)
        if keep.all():
            X, Y = Xn, Yn
        else:
            X, Y, active, keys = Xn[keep], Yn[keep], active[keep], keys[keep]
    return rho_out, T, diverged, states


def _compiled_chunk(model, kind, x, y, n_steps, every, dt, rng, paths, threshold, bridge, record_states):
    code, params = model.drift.kernel_spec()
    stepper = _Stepper(model, kind, dt, threshold, bridge)
    n, d = len(paths), model.d
    K = n_steps // every
    rho_out = np.zeros((n, K + 1))
    T = np.full(n, np.nan)
    div_step = np.full(n, -1, dtype=np.int64)
    states = np.zeros((n, K + 1, 2, d)) if record_states else np.zeros((0, 0, 2, d))
    S0 = stepper.sigma0_const if stepper.sigma0_const is not None else np.zeros((d, d))
    kinds = {"synchronous": 0, "reflection": 1, "hybrid": 2}
    r0 = kind.cutoff.r0 if kind.cutoff is not None else math.inf
    kernel = pair_kernel(kinds[kind.kind], d, model.m, code, bool(stepper.skip_shared), bool(bridge),
                         bool(record_states))
    kernel(
        rng.path_keys(paths), rng.step_words(n_steps, rng.NORMAL), rng.step_words(n_steps, rng.UNIFORM),
        np.ascontiguousarray(x), np.ascontiguousarray(y), n_steps, every, dt,
        np.array(params, dtype=float), np.ascontiguousarray(stepper.sigma_const), np.ascontiguousarray(S0),
        float(kind.lambda0 or 0.0), r0, float(threshold), stepper.w, rho_out, T, div_step, states,
    )
    return rho_out, T, div_step >= 0, states if record_states else None


_COMPILE_WORTHWHILE = 2_000_000


def uses_compiled(model: ModelSpec) -> bool:
    return model.constant_sigma is not None and model.drift.kernel_spec() is not None


def simulate_pairs(
    model: ModelSpec,
    kind: CouplingKind,
    x,
    y,
    horizon: float,
    dt: float,
    seed: int,
    n_paths: int = 1,
    grid_dt: float | None = None,
    first_path: int = 0,
    couple_threshold: float = 0.0,
    bridge: bool = True,
    record_states: bool = False,
    workers: int = 1,
    compiled: bool | None = None,
) -> PairEnsemble:
    """Simulate ``n_paths`` coupled pairs started at (x, y).

    Path i draws its noise from key (seed, first_path + i, step), so results
    do not depend on ``workers``. The pair is put in a canonical order
    before simulation, which makes the distance process symmetric under
    swapping x and y. A pair couples at the first step where its separation
    projected on the previous chord is at most ``couple_threshold``, or when
    the Brownian-bridge test detects a crossing inside the step.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != (model.d,) or y.shape != (model.d,):
        raise ValueError(f"initial points must have dimension {model.d}")
    n_steps, every = _grid(horizon, dt, grid_dt)
    swapped = tuple(y) < tuple(x)
    a, b = (y, x) if swapped else (x, y)
    rng = CounterRNG(seed)
    paths = np.arange(first_path, first_path + n_paths, dtype=np.uint64)
    chunks = np.array_split(paths, max(1, min(workers, n_paths)))

    if compiled is None:
        # small jobs are faster without the kernel's one-off compilation
        compiled = uses_compiled(model) and n_paths * n_steps >= _COMPILE_WORTHWHILE
    elif compiled and not uses_compiled(model):
        raise ValueError("the compiled stepper needs constant diffusion and a builtin drift")
    if kind.reflects and model.constant_sigma is None:
        _check_admissible(model, kind, np.vstack([a, b]))
    simulate_chunk = _compiled_chunk if compiled else _simulate_chunk

    def run(chunk):
        return simulate_chunk(model, kind, a, b, n_steps, every, dt, rng, chunk,
                              couple_threshold, bridge, record_states)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    rho = np.concatenate([p[0] for p in parts])
    T = np.concatenate([p[1] for p in parts])
    diverged = np.concatenate([p[2] for p in parts])
    states = None
    if record_states:
        states = np.concatenate([p[3] for p in parts])
        if swapped:
            states = states[:, :, ::-1, :].copy()
    times = np.arange(n_steps // every + 1) * (every * dt)
    return PairEnsemble(times, rho, T, diverged, seed, dt, paths.astype(np.int64), states, couple_threshold)


def simulate_pair(model: ModelSpec, kind: CouplingKind, x, y, horizon: float, dt: float, seed: int,
                  grid_dt: float | None = None, path_index: int = 0, **kwargs) -> PairPath:
    """A single coupled pair; raises NonFinite if the divergence guard trips."""
    ens = simulate_pairs(model, kind, x, y, horizon, dt, seed, 1, grid_dt, first_path=path_index, **kwargs)
    path = ens.path(0)
    if path.diverged:
        raise NonFinite(f"pair diverged (|X| or |Y| > {DIVERGENCE_BOUND:g} or non-finite)")
    return path


@dataclass(frozen=True)
class MomentCurve:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    p: float
    n: int


def _rho_matrix(paths) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(paths, PairEnsemble):
        order = np.argsort(paths.path_indices, kind="stable")
        return paths.times, paths.rho[order]
    paths = list(paths)
    if not paths:
        raise EmptyInput("no paths")
    paths.sort(key=lambda p: p.path_index)
    times = paths[0].t
    for p in paths[1:]:
        if p.t.shape != times.shape or not np.array_equal(p.t, times):
            raise ValueError("paths do not share one time grid")
    return times, np.vstack([p.rho for p in paths])


def moment_curve(samples: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise (E rho^p)^(1/p) and its delta-method standard error."""
    n = samples.shape[0]
    if n == 0:
        raise EmptyInput("no samples")
    if np.any(np.isnan(samples)):
        raise NonFinite("samples contain diverged paths")
    powered = samples**p
    m = powered.mean(axis=0)
    values = m ** (1.0 / p)
    # exact when every sample agrees, so a deterministic column reproduces its value
    const = np.all(samples == samples[:1], axis=0)
    values = np.where(const, samples[0], values)
    if n > 1:
        se_m = powered.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        se_m = np.zeros_like(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(m > 0, (1.0 / p) * m ** (1.0 / p - 1.0) * se_m, 0.0)
    se = np.where(const, 0.0, se)
    return values, se


def distance_moments(paths, p: float) -> MomentCurve:
    """t -> (E rho_t^p)^(1/p) over a collection of pair paths sharing one grid."""
    if p < 1:
        raise ValueError("p must be >= 1")
    times, R = _rho_matrix(paths)
    if R.shape[0] == 0:
        raise EmptyInput("no paths")
    values, se = moment_curve(R, p)
    return MomentCurve(times, values, se, float(p), R.shape[0])


def simulate_endpoints(model: ModelSpec, x0, horizon: float, dt: float, seed: int, n_paths: int,
                       grid_dt: float | None = None, first_path: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Independent Euler-Maruyama paths of the SDE itself from a common start (or per-path starts).

    Returns ``(times, states)`` with states of shape ``(n_paths, K + 1, d)``.
    Noise comes from the shared block of the pair layout.
    """
    n_steps, every = _grid(horizon, dt, grid_dt)
    x0 = np.asarray(x0, dtype=float)
    X = np.tile(x0, (n_paths, 1)) if x0.ndim == 1 else x0.copy()
    if X.shape != (n_paths, model.d):
        raise ValueError("bad initial points")
    rng = CounterRNG(seed)
    keys = rng.path_keys(np.arange(first_path, first_path + n_paths, dtype=np.uint64))
    S = model.constant_sigma
    scale = math.sqrt(2.0 * dt)
    out = np.empty((n_paths, n_steps // every + 1, model.d))
    out[:, 0] = X
    for k in range(n_steps):
        xi = rng.normals(keys, k, model.m)
        noise = matvec(S, xi) if S is not None else matvec(model.sigma(X), xi)
        X = X + model.b(X) * dt + scale * noise
        if (k + 1) % every == 0:
            out[:, (k + 1) // every] = X
    if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > DIVERGENCE_BOUND:
        raise NonFinite("an endpoint path diverged")
    times = np.arange(n_steps // every + 1) * (every * dt)
    return times, out
