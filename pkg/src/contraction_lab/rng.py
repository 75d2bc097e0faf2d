"""Counter-based normal and uniform variates keyed by (seed, path, step, lane).

Every variate is a pure function of its key, so a path's noise does not
depend on how paths are batched or scheduled. The mixer is the splitmix64
finalizer; each lane is one 53-bit uniform pushed through Wichura's AS241
inverse normal CDF, so any subset of lanes can be drawn on its own.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_PATH_SALT = np.uint64(0xD1B54A32D192ED03)
_STEP_SALT = np.uint64(0x8CB92BA72F3D8DD7)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _path_keys(seed_key, paths):
    out = np.empty(paths.shape[0], dtype=np.uint64)
    for i in range(paths.shape[0]):
        out[i] = _mix(seed_key ^ _mix((paths[i] + np.uint64(1)) * _PATH_SALT))
    return out


@njit(cache=True, inline="always")
def _ndtri(p):
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                    + 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r
                 + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                    + 21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r
                 + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
                    + 1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                 + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r
                    + 0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                 + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
                    + 0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                 + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r
                    + 7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                 + 0.59983220655588793769) * r + 1.0)
    x = num / den
    return -x if q < 0 else x


@njit(cache=True)
def _normals(keys, step_word, lane0, n_lanes, out):
    for i in range(keys.shape[0]):
        base = _mix(keys[i] ^ step_word)
        for j in range(n_lanes):
            h = _mix(base + np.uint64(lane0 + j + 1) * _GAMMA)
            out[i, j] = _ndtri((np.float64(h >> np.uint64(11)) + 0.5) * _INV_2_53)


@njit(cache=True)
def _uniforms(keys, step_word, n_lanes, out):
    for i in range(keys.shape[0]):
        base = _mix(keys[i] ^ step_word)
        for j in range(n_lanes):
            h = _mix(base + np.uint64(j + 1) * _GAMMA)
            out[i, j] = (np.float64(h >> np.uint64(11)) + 0.5) * _INV_2_53


def _step_word(step: int, stream: int) -> np.uint64:
    with np.errstate(over="ignore"):
        word = (np.uint64(step) * np.uint64(4) + np.uint64(stream)) * _STEP_SALT
    return np.uint64(_mix(np.uint64(word)))


def derive_seed(seed: int, tag: int) -> int:
    """A child master seed; used to give independent ensembles disjoint streams."""
    with np.errstate(over="ignore"):
        return int(_mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(_mix(np.uint64(tag + 1) * _GAMMA))))


class CounterRNG:
    """Stateless generator: ``normals(paths, step, n)`` is a pure function of its arguments."""

    NORMAL, UNIFORM = 0, 1

    def __init__(self, seed: int):
        self.seed = int(seed)
        with np.errstate(over="ignore"):
            self._key = np.uint64(_mix(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF) + _GAMMA))

    def path_keys(self, paths) -> np.ndarray:
        return _path_keys(self._key, np.asarray(paths, dtype=np.uint64))

    def normals(self, keys: np.ndarray, step: int, n_lanes: int, lane0: int = 0) -> np.ndarray:
        """Standard normals for lanes ``lane0 .. lane0 + n_lanes - 1``."""
        out = np.empty((keys.shape[0], n_lanes))
        _normals(keys, _step_word(step, self.NORMAL), lane0, n_lanes, out)
        return out

    def step_words(self, n_steps: int, stream: int) -> np.ndarray:
        return _step_words(n_steps, stream)

    def uniforms(self, keys: np.ndarray, step: int, n_lanes: int = 1) -> np.ndarray:
        out = np.empty((keys.shape[0], n_lanes))
        _uniforms(keys, _step_word(step, self.UNIFORM), n_lanes, out)
        return out


@njit(cache=True)
def _step_words(n_steps, stream):
    out = np.empty(n_steps, dtype=np.uint64)
    for k in range(n_steps):
        out[k] = _mix((np.uint64(k) * np.uint64(4) + np.uint64(stream)) * _STEP_SALT)
    return out


@njit(cache=True, inline="always")
def _normal_at(base, lane):
    h = _mix(base + np.uint64(lane + 1) * _GAMMA)
    return _ndtri((np.float64(h >> np.uint64(11)) + 0.5) * _INV_2_53)


@njit(cache=True, inline="always")
def _uniform_at(base, lane):
    h = _mix(base + np.uint64(lane + 1) * _GAMMA)
    return (np.float64(h >> np.uint64(11)) + 0.5) * _INV_2_53
