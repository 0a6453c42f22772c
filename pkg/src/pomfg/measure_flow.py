"""Measures, measure flows and the truncated Wasserstein distances between them.

Every distance here uses the ground cost ``min(|x - y|, 1)`` (sup over time for
paths), so all values lie in [0, 1].
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .errors import InvalidInput

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
EXACT_THRESHOLD = 256


@dataclass(frozen=True)
class Measure:
    """A one-dimensional measure, either weighted particles or a grid density.

    For ``kind == "grid"`` the ``weights`` array holds density values on a
    uniform, cell-centred grid and masses are ``density * dx``.
    """

    x: np.ndarray
    weights: np.ndarray
    kind: str = "particle"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if x.size == 0 or x.shape != w.shape:
            raise InvalidInput("measure needs matching, nonempty x and weights")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise InvalidInput("measure contains non-finite values")
        if np.any(w < 0):
            raise InvalidInput("measure weights must be nonnegative")
        if self.kind not in ("particle", "grid"):
            raise InvalidInput(f"unknown measure kind {self.kind!r}")
        if self.kind == "grid":
            if x.size < 2:
                raise InvalidInput("grid measure needs at least two nodes")
            steps = np.diff(x)
            if steps[0] <= 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
                raise InvalidInput("grid spacing must be strictly positive and uniform")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", w)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0]) if self.kind == "grid" else 1.0

    @property
    def masses(self) -> np.ndarray:
        return self.weights * self.dx

    @property
    def mass(self) -> float:
        return float(self.masses.sum())

    @property
    def mean(self) -> float:
        return float(self.masses @ self.x / self.mass)

    @property
    def variance(self) -> float:
        m = self.masses / self.mass
        mu = m @ self.x
        return float(m @ (self.x - mu) ** 2)

    def normalized(self) -> "Measure":
        total = self.mass
        if not total > 0:
            raise InvalidInput("cannot normalize a measure with zero mass")
        return Measure(self.x, self.weights / total, self.kind)

    def is_normalized(self) -> bool:
        return abs(self.mass - 1.0) <= MASS_TOL * max(1.0, self.x.size ** 0.5)

    def particles(self) -> tuple[np.ndarray, np.ndarray]:
        """Atoms and their probability masses; grid nodes carry mass-weighted cells."""
        return self.x, self.masses

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.masses @ np.asarray(fn(self.x), dtype=float))


def empirical_measure(samples: Sequence[float]) -> Measure:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise InvalidInput("empirical measure of an empty sample")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("empirical measure of non-finite samples")
    return Measure(x, np.full(x.size, 1.0 / x.size))


def gaussian_grid_measure(mean: float, var: float, x: np.ndarray) -> Measure:
    x = np.asarray(x, dtype=float)
    dens = np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
    return Measure(x, dens, "grid").normalized()


def _check_normalized(*measures: Measure) -> None:
    for m in measures:
        if not m.is_normalized():
            raise InvalidInput(f"measure not normalized (mass={m.mass!r})")


def wasserstein1(a: Measure, b: Measure) -> float:
    """Untruncated W1 through the monotone (quantile) coupling: the integral of |F_a - F_b|."""
    xa, wa = a.particles()
    xb, wb = b.particles()
    xs = np.concatenate([xa, xb])
    order = np.argsort(xs, kind="stable")
    xs = xs[order]
    jumps = np.concatenate([wa, -wb])[order]
    cdf_gap = np.cumsum(jumps)[:-1]
    return float(np.abs(cdf_gap) @ np.diff(xs))


def truncated_exact(a: Measure, b: Measure) -> float:
    """Optimal transport cost for min(|x-y|, 1) between small discrete measures."""
    xa, wa = a.particles()
    xb, wb = b.particles()
    cost = np.minimum(np.abs(xa[:, None] - xb[None, :]), 1.0)
    n, m = cost.shape
    if n == m and np.allclose(wa, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(wb, 1.0 / m, rtol=0, atol=1e-15):
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / n)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([wa, wb]), bounds=(0, None), method="highs")
    if not res.success:
        raise InvalidInput(f"transport LP failed: {res.message}")
    return float(res.fun)


def marginal_distance(a: Measure, b: Measure, threshold: int = EXACT_THRESHOLD) -> float:
    _check_normalized(a, b)
    w1 = wasserstein1(a, b)
    if max(a.x.size, b.x.size) <= threshold:
        value = min(w1, truncated_exact(a, b))
    else:
        value = min(w1, 1.0)
    return float(min(max(value, 0.0), 1.0))


@dataclass(frozen=True)
class MeasureFlow:
    times: np.ndarray
    measures: tuple
    holder_exponent: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size == 0 or np.any(np.diff(t) <= 0):
            raise InvalidInput("flow times must be nonempty and strictly increasing")
        if len(self.measures) != t.size:
            raise InvalidInput("flow needs exactly one measure per time")
        beta = self.holder_exponent
        if beta is not None and not 0 < beta <= 1:
            raise InvalidInput("holder exponent must lie in (0, 1]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "measures", tuple(self.measures))

    def __len__(self):
        return self.times.size

    def at(self, t: float) -> Measure:
        """Measure in force at time t (piecewise constant from the left)."""
        idx = int(np.searchsorted(self.times, t + 1e-12 * max(1.0, abs(t)), side="right")) - 1
        return self.measures[min(max(idx, 0), len(self.measures) - 1)]

    def means(self) -> np.ndarray:
        return np.array([m.mean for m in self.measures])

    def shifted(self, c: float) -> "MeasureFlow":
        return MeasureFlow(self.times, [Measure(m.x + c, m.weights, m.kind) for m in self.measures], self.holder_exponent)

    @classmethod
    def constant(cls, times, measure: Measure) -> "MeasureFlow":
        times = np.asarray(times, dtype=float)
        return cls(times, [measure] * times.size)

    @classmethod
    def from_samples(cls, times, samples: np.ndarray) -> "MeasureFlow":
        """Flow of empirical measures; ``samples`` has shape (n_paths, n_times)."""
        samples = np.asarray(samples, dtype=float)
        return cls(times, [empirical_measure(samples[:, k]) for k in range(samples.shape[1])])


def flow_distance(a: MeasureFlow, b: MeasureFlow, threshold: int = EXACT_THRESHOLD) -> float:
    """sup over the shared time grid of marginal distances."""
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times):
        raise InvalidInput("flows live on different time grids")
    return max(marginal_distance(ma, mb, threshold) for ma, mb in zip(a.measures, b.measures))


@dataclass(frozen=True)
class PathEnsemble:
    times: np.ndarray
    paths: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        p = np.atleast_2d(np.asarray(self.paths, dtype=float))
        if p.shape[0] < 1 or p.shape[1] != t.size:
            raise InvalidInput("paths must have shape (M >= 1, len(times))")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "paths", p)

    @property
    def size(self) -> int:
        return self.paths.shape[0]

    def marginal(self, k: int) -> Measure:
        return empirical_measure(self.paths[:, k])


def path_cost_matrix(a: PathEnsemble, b: PathEnsemble) -> np.ndarray:
    cost = np.zeros((a.size, b.size))
    for k in range(a.times.size):
        np.maximum(cost, np.abs(a.paths[:, k, None] - b.paths[None, :, k]), out=cost)
    return np.minimum(cost, 1.0)


def path_distance_DT(a: PathEnsemble, b: PathEnsemble) -> float:
    if a.size != b.size:
        raise InvalidInput(f"ensemble sizes differ ({a.size} vs {b.size})")
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise InvalidInput("ensembles use different time grids")
    cost = path_cost_matrix(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.size)


@dataclass(frozen=True)
class TestFunction:
    """Bounded Lipschitz test function with its declared constants."""

    fn: Callable[[np.ndarray], np.ndarray]
    bound: float
    lipschitz: float
    name: str = "psi"

    __test__ = False


@dataclass
class HolderReport:
    max_ratio: float
    bound: float
    beta: float
    passed: bool
    worst_pair: tuple[float, float] | None = None
    worst_function: str | None = None
    pairs_checked: int = 0


def holder_check(flow: MeasureFlow, beta: float, B: float, test_functions: Sequence[TestFunction],
                 n_distant: int = 200, seed: int = 0) -> HolderReport:
    if not test_functions:
        raise InvalidInput("holder check needs at least one test function")
    if not 0 < beta <= 1 or not B > 0:
        raise InvalidInput("need beta in (0, 1] and B > 0")
    n = len(flow)
    pairs = [(k, k + 1) for k in range(n - 1)]
    if n > 2 and n_distant > 0:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=n_distant)
        j = rng.integers(0, n, size=n_distant)
        pairs += [(min(p, q), max(p, q)) for p, q in zip(i, j) if abs(p - q) > 1]
    report = HolderReport(0.0, B, beta, True, pairs_checked=len(pairs))
    for tf in test_functions:
        integrals = np.array([m.normalized().integrate(tf.fn) for m in flow.measures])
        for p, q in pairs:
            gap = abs(integrals[q] - integrals[p])
            ratio = gap / abs(flow.times[q] - flow.times[p]) ** beta
            if ratio > report.max_ratio:
                report.max_ratio = float(ratio)
                report.worst_pair = (float(flow.times[p]), float(flow.times[q]))
                report.worst_function = tf.name
    report.passed = report.max_ratio <= B
    return report


def write_measure_csv(measure: Measure, path) -> None:
    column = "weight" if measure.kind == "particle" else "density"
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", column])
        out.writerows((f"{x:.17g}", f"{w:.17g}") for x, w in zip(measure.x, measure.weights))


def read_measure_csv(path) -> Measure:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "x" or header[1] not in ("weight", "density"):
        raise InvalidInput(f"unexpected measure header {header}")
    data = np.array(body, dtype=float)
    return Measure(data[:, 0], data[:, 1], "particle" if header[1] == "weight" else "grid")


def write_flow_csv(flow: MeasureFlow, path) -> None:
    kind = flow.measures[0].kind
    column = "weight" if kind == "particle" else "density"
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "x", column])
        for t, m in zip(flow.times, flow.measures):
            out.writerows((f"{t:.17g}", f"{x:.17g}", f"{w:.17g}") for x, w in zip(m.x, m.weights))


def read_flow_csv(path) -> MeasureFlow:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    kind = "particle" if header[2] == "weight" else "grid"
    times, starts = np.unique(body[:, 0], return_index=True)
    bounds = list(starts) + [len(body)]
    measures = [Measure(body[s:e, 1], body[s:e, 2], kind) for s, e in zip(bounds[:-1], bounds[1:])]
    return MeasureFlow(times, measures)
