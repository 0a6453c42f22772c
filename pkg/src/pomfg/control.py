"""Hamiltonian minimization, the HJB solve on the finite-dimensional filter
statistics, and Monte Carlo evaluation of policy costs.

The HJB solver is semi-Lagrangian: each backward step looks up the next value
slice at the points reached by the filter mean under every trial control,
using cubic spline interpolation.  In innovation mode the filter mean also
diffuses, which is handled with a four-point rule that matches the first two
moments of the increment.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from functools import singledispatch
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.ndimage import map_coordinates

from .dynamics import Scenario, mean_field_drift, normals, simulate_mckean_vlasov, simulate_population, stream
from .errors import ConfigError, InvalidInput
from .filtering import (BenesModel, DensityGrid, benes_drift, benes_filter_step, filter_gain,
                        initial_stats, riccati_step, sample_benes_initial)
from .measure_flow import Measure, MeasureFlow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostForm:
    """Running cost L(x, u, y) = l0(x, y) + lam/2 * u^2."""

    l0: Callable
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("control weight lam must be nonnegative")


def coupled_cost(l0: Callable, t: float, x, mu: Measure | None) -> np.ndarray:
    return mean_field_drift(lambda _t, a, b: l0(a, b), t, x, mu)


def hamiltonian(t: float, p: DensityGrid, a: float, gradV: Callable, mu: Measure | None, cost: CostForm) -> float:
    dx = p.dx
    drift_pair = float(gradV(p.x) * np.ones_like(p.x) @ p.values * dx)
    state_cost = float(coupled_cost(cost.l0, t, p.x, mu) @ p.values * dx)
    return a * drift_pair + state_cost + 0.5 * cost.lam * a**2 * p.mass


def minimize_hamiltonian(t: float, p: DensityGrid, gradV: Callable, mu: Measure | None, cost: CostForm,
                         U: tuple, n_grid: int = 1001) -> float:
    """Closed form when lam > 0, otherwise a grid search preferring the smallest |a|, then the smallest a."""
    lo, hi = U
    drift_pair = float(gradV(p.x) * np.ones_like(p.x) @ p.values * p.dx)
    if cost.lam > 0:
        return float(np.round(np.clip(-drift_pair / (cost.lam * p.mass), lo, hi), 12))
    grid = np.linspace(lo, hi, n_grid)
    grid = grid[np.lexsort((grid, np.abs(grid)))]
    return float(grid[np.argmin(grid * drift_pair)])


# tables -------------------------------------------------------------------------------

@dataclass(frozen=True)
class ValueTable:
    times: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    values: np.ndarray

    @property
    def gradient(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(np.gradient(self.values, self.r1, self.r2, axis=(1, 2)))

    def at(self, t: float, r) -> np.ndarray:
        k = _time_index(self.times, t)
        return _interp(self.values[k], self.r1, self.r2, np.atleast_2d(r), order=1)

    def write_csv(self, path) -> None:
        _write_table(path, "V", self.times, self.r1, self.r2, self.values)


@dataclass(frozen=True)
class PolicyTable:
    """Controls on (time, r1, r2); multilinear in r, piecewise constant in t."""

    times: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    controls: np.ndarray
    U: tuple

    def __call__(self, t: float, r) -> np.ndarray:
        r = np.atleast_2d(r)
        k = _time_index(self.times, t)
        out = _interp(self.controls[k], self.r1, self.r2, r, order=1)
        return np.clip(out, *self.U)

    def lipschitz(self) -> float:
        d1 = np.abs(np.diff(self.controls, axis=1)).max() / np.diff(self.r1).min()
        d2 = np.abs(np.diff(self.controls, axis=2)).max() / np.diff(self.r2).min()
        return float(max(d1, d2))

    def write_csv(self, path) -> None:
        _write_table(path, "u", self.times, self.r1, self.r2, self.controls)


def _time_index(times: np.ndarray, t: float) -> int:
    k = int(np.searchsorted(times, t + 1e-9 * (times[1] - times[0]), side="right")) - 1
    return min(max(k, 0), times.size - 1)


def _interp(table: np.ndarray, r1: np.ndarray, r2: np.ndarray, r: np.ndarray, order: int) -> np.ndarray:
    c1 = (r[..., 0] - r1[0]) / (r1[1] - r1[0])
    c2 = (r[..., 1] - r2[0]) / (r2[1] - r2[0])
    outside = (c1 < 0) | (c1 > r1.size - 1) | (c2 < 0) | (c2 > r2.size - 1)
    if np.any(outside):
        log.debug("clamped %d evaluations outside the r grid", int(outside.sum()))
    return map_coordinates(table, [c1.ravel(), c2.ravel()], order=order, mode="nearest").reshape(c1.shape)


def _write_table(path, column, times, r1, r2, values) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "r1", "r2", column])
        for k, t in enumerate(times):
            for i, a in enumerate(r1):
                for j, b in enumerate(r2):
                    out.writerow([f"{t:.17g}", f"{a:.17g}", f"{b:.17g}", f"{values[k, i, j]:.17g}"])


def read_gradient_csv(path) -> Callable:
    """Gradient kernel x -> dV/dx from an (x, gradV) grid file, linearly interpolated."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["x", "gradV"]:
        raise InvalidInput(f"unexpected gradient header {rows[0]}")
    data = np.array(rows[1:], dtype=float)
    return lambda x: np.interp(x, data[:, 0], data[:, 1])


# HJB on the filter statistics ------------------------------------------------------

@dataclass(frozen=True)
class HJBGrid:
    r1: np.ndarray
    r2: np.ndarray
    n_controls: int = 41
    quad_order: int = 10
    flow_atoms: int = 64
    z_nodes: int = 121

    @classmethod
    def around(cls, model: BenesModel, n: int = 41, width: float = 6.0, margin: float = 1.0, **kw) -> "HJBGrid":
        """Square grid centred on the prior mean, half-width width * sqrt(max P) + margin."""
        pmax = max(np.linalg.eigvalsh(p).max() for p in covariance_path(model, "literal"))
        half = width * np.sqrt(pmax) + margin
        xi = np.asarray(model.xi, float)
        return cls(np.linspace(xi[0] - half, xi[0] + half, n), np.linspace(xi[1] - half, xi[1] + half, n), **kw)


def covariance_path(model: BenesModel, mode: str) -> list[np.ndarray]:
    P = np.array(model.P0, dtype=float)
    out = [P]
    for t in model.times[:-1]:
        H, Nmat, Q, _, _ = model.coeffs(t)
        Qeff = Q + H.T @ np.linalg.solve(Nmat, H) if mode == "innovation" else Q
        P = riccati_step(P, Qeff, model.G(t), model.dt)
        out.append(P)
    return out


def _sqrtm_psd(P: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (P + P.T))
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def quantile_atoms(mu: Measure, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Compress a measure to at most k atoms: means of equal-mass quantile bins (the mean is kept exactly)."""
    x, w = mu.particles()
    w = w / w.sum()
    if x.size <= k:
        return x, w
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    mid = np.cumsum(w) - 0.5 * w
    bins = np.minimum((mid * k).astype(int), k - 1)
    mass = np.bincount(bins, weights=w, minlength=k)
    keep = mass > 0
    atoms = np.bincount(bins, weights=w * x, minlength=k)[keep] / mass[keep]
    return atoms, mass[keep]


def expected_running_cost(model: BenesModel, t: float, P: np.ndarray, r_nodes: np.ndarray,
                          mu: Measure, grids: HJBGrid) -> np.ndarray:
    """E_q[ integral l0(z, y) mu(dy) ] for the normalized information state at each r node."""
    l0 = model.cost.l0
    atoms, weights = quantile_atoms(mu, grids.flow_atoms)
    sq = _sqrtm_psd(P)
    spread = 7.0 * np.sqrt(np.maximum(np.diag(P), 1e-12))
    z1 = np.linspace(grids.r1[0] - spread[0], grids.r1[-1] + spread[0], grids.z_nodes)
    z2 = np.linspace(grids.r2[0] - spread[1], grids.r2[-1] + spread[1], grids.z_nodes)
    Z = np.stack(np.meshgrid(z1, z2, indexing="ij"), axis=-1)
    lbar = np.asarray(np.broadcast_to(l0(Z[..., None, :], atoms), Z.shape[:2] + atoms.shape), float) @ weights

    nodes, w = hermegauss(grids.quad_order)
    e1, e2 = np.meshgrid(nodes, nodes, indexing="ij")
    offsets = np.stack([e1.ravel(), e2.ravel()], axis=-1) @ sq.T
    wq = np.outer(w, w).ravel()
    pts = r_nodes[:, None, :] + offsets[None, :, :]
    gam = model.gamma(t, pts[..., 0])
    if np.any(gam <= 0):
        raise ConfigError("Gamma is not positive on the quadrature support")
    vals = _interp(lbar, z1, z2, pts, order=3)
    wg = wq * gam
    return (wg * vals).sum(axis=1) / wg.sum(axis=1)


def solve_hjb_sufficient_stats(model: BenesModel, flow: MeasureFlow, grids: HJBGrid,
                               mode: str = "innovation") -> tuple[ValueTable, PolicyTable]:
    if model.cost is None:
        raise ConfigError("model has no running cost")
    r1, r2 = grids.r1, grids.r2
    dr = min(r1[1] - r1[0], r2[1] - r2[0])
    times, dt = model.times, model.dt
    Ps = covariance_path(model, mode)
    pmax = max(np.diag(P).max() for P in Ps)
    xi = np.asarray(model.xi, float)
    for axis, g in ((0, r1), (1, r2)):
        if not (g[0] <= xi[axis] - 6 * np.sqrt(pmax) and g[-1] >= xi[axis] + 6 * np.sqrt(pmax)):
            raise InvalidInput("r grid must contain xi +- 6 sqrt(max P)")

    R = np.stack(np.meshgrid(r1, r2, indexing="ij"), axis=-1).reshape(-1, 2)
    controls = np.linspace(model.U[0], model.U[1], grids.n_controls)
    controls = controls[np.lexsort((controls, np.abs(controls)))]
    lam = model.cost.lam
    n1, n2 = r1.size, r2.size

    V = np.zeros((times.size, n1, n2))
    pol = np.zeros((times.size, n1, n2))
    for n in range(times.size - 2, -1, -1):
        t, P = times[n], Ps[n]
        H, Nmat, Q, m, _ = model.coeffs(t)
        running = expected_running_cost(model, t, P, R, flow.at(t), grids)
        base = R @ (P @ Q).T - P @ m
        if mode == "innovation":
            K = filter_gain(P, H, Nmat)
            kicks = np.sqrt(2 * dt) * _sqrtm_psd(K @ Nmat @ K.T).T
            kicks = np.concatenate([kicks, -kicks])
        else:
            kicks = np.zeros((1, 2))
        reach = np.abs(base).max() * dt + max(abs(controls).max() * dt, 0) + np.abs(kicks).max()
        if reach > dr:
            raise ConfigError(f"CFL bound violated: one-step displacement {reach:.4g} exceeds grid spacing {dr:.4g}")
        shift = np.stack([np.zeros_like(controls), controls], axis=-1) * dt
        pts = (R[None, None, :, :] + base[None, None] * dt + shift[:, None, None, :] + kicks[None, :, None, :])
        future = _interp(V[n + 1], r1, r2, pts, order=3).mean(axis=1)
        q = future + (running[None, :] + 0.5 * lam * controls[:, None] ** 2) * dt
        best = np.argmin(q, axis=0)
        V[n] = q[best, np.arange(R.shape[0])].reshape(n1, n2)
        pol[n] = controls[best].reshape(n1, n2)
    pol[-1] = pol[-2] if times.size > 1 else 0.0
    return ValueTable(times, r1, r2, V), PolicyTable(times, r1, r2, pol, tuple(model.U))


# simulation of the two-dimensional model ----------------------------------------------------

@dataclass
class BenesBundle:
    times: np.ndarray
    states: np.ndarray
    stats: np.ndarray
    controls: np.ndarray
    observations: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def second_coordinate_flow(self) -> MeasureFlow:
        return MeasureFlow.from_samples(self.times, self.states[:, :, 1])


def simulate_benes(model: BenesModel, policy: Callable, M: int, seed: int, mode: str = "innovation",
                   rep: int = 0, agents=None) -> BenesBundle:
    """Closed-loop paths of the two-dimensional model; each path runs its own filter."""
    agents = range(M) if agents is None else agents
    n, steps, dt = len(agents), model.n_steps, model.dt
    gens = [stream(seed, a, "init", rep) for a in agents]
    z = np.empty((n, steps + 1, 2))
    z[:, 0] = sample_benes_initial(model, np.array([g.random() for g in gens]),
                                   np.array([g.standard_normal() for g in gens]))
    dw = normals(seed, agents, "state", (steps, 2), rep) * np.sqrt(dt)
    db = normals(seed, agents, "obs", (steps, 2), rep) * np.sqrt(dt)
    s = initial_stats(model, n)
    r = np.empty((n, steps + 1, 2))
    u = np.empty((n, steps + 1))
    y = np.zeros((n, steps + 1, 2))
    for k in range(steps + 1):
        t = k * dt
        r[:, k] = s.r
        u[:, k] = np.clip(policy(t, s.r), *model.U)
        if k == steps:
            break
        H, Nmat, _, _, _ = model.coeffs(t)
        zk = z[:, k]
        dy = zk @ H.T * dt + db[:, k] @ np.linalg.cholesky(Nmat).T
        y[:, k + 1] = y[:, k] + dy
        drift = np.stack([benes_drift(model, t, zk[:, 0]), u[:, k]], axis=-1)
        z[:, k + 1] = zk + drift * dt + dw[:, k] @ model.G(t).T
        s = benes_filter_step(s, u[:, k], dy, dt, model, mode)
    return BenesBundle(model.times, z, r, u, y)


# cost evaluation ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n: int


def _estimate(samples: np.ndarray) -> CostEstimate:
    n = samples.size
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return CostEstimate(float(samples.mean()), se, n)


@singledispatch
def evaluate_policy_cost(model, policy, flow, M: int, which: str = "mv", N: int | None = None,
                         seed: int | None = None, **kw) -> CostEstimate:
    raise InvalidInput(f"no cost evaluation for {type(model).__name__}")


@evaluate_policy_cost.register
def _(model: Scenario, policy, flow, M: int, which: str = "mv", N: int | None = None,
      seed: int | None = None, filter_mode: str = "none", agent: int = 0) -> CostEstimate:
    sc = model if seed is None else _reseed(model, seed)
    l0, lam = sc.cost.l0, sc.cost.lam
    if which == "mv":
        b = simulate_mckean_vlasov(sc, policy, flow, M, filter_mode)
        running = np.stack([coupled_cost(l0, t, b.states[:, k], flow.at(t)) for k, t in enumerate(b.times[:-1])], axis=1)
        total = (running + 0.5 * lam * b.controls[:, :-1] ** 2).sum(axis=1) * sc.dt
        return _estimate(total)
    if which != "population" or N is None:
        raise InvalidInput("population mode needs N")
    totals = []
    for rep in range(M):
        b = simulate_population(sc, policy, N, filter_mode, flow=flow, rep=rep)
        zi = b.states[agent, :-1]
        running = np.asarray(np.broadcast_to(l0(zi[None, :], b.states[:, :-1]), b.states[:, :-1].shape)).mean(axis=0)
        totals.append((running + 0.5 * lam * b.controls[agent, :-1] ** 2).sum() * sc.dt)
    return _estimate(np.array(totals))


def _reseed(sc: Scenario, seed: int) -> Scenario:
    return replace(sc, seed=seed)


def benes_path_costs(model: BenesModel, bundle: BenesBundle, flow: MeasureFlow) -> np.ndarray:
    l0, lam = model.cost.l0, model.cost.lam
    running = np.empty((bundle.n_paths, bundle.times.size - 1))
    for k, t in enumerate(bundle.times[:-1]):
        atoms, masses = flow.at(t).particles()
        vals = np.broadcast_to(l0(bundle.states[:, k, None, :], atoms), (bundle.n_paths, atoms.size))
        running[:, k] = vals @ masses / masses.sum()
    return (running + 0.5 * lam * bundle.controls[:, :-1] ** 2).sum(axis=1) * model.dt


def population_agent_cost(model: BenesModel, agent_states: np.ndarray, agent_controls: np.ndarray,
                          population: np.ndarray) -> float:
    """Cost of one agent whose coupling averages over all N population members (itself included)."""
    l0, lam = model.cost.l0, model.cost.lam
    z = agent_states[:-1]
    others = population[:, :-1, 1]
    vals = np.broadcast_to(l0(z[None, :, :], others), others.shape).mean(axis=0)
    return float((vals + 0.5 * lam * agent_controls[:-1] ** 2).sum() * model.dt)


@evaluate_policy_cost.register
def _(model: BenesModel, policy, flow, M: int, which: str = "mv", N: int | None = None,
      seed: int | None = None, mode: str = "innovation", agent: int = 0) -> CostEstimate:
    seed = 0 if seed is None else seed
    if which == "mv":
        b = simulate_benes(model, policy, M, seed, mode)
        return _estimate(benes_path_costs(model, b, flow))
    if which != "population" or N is None:
        raise InvalidInput("population mode needs N")
    totals = []
    for rep in range(M):
        b = simulate_benes(model, policy, N, seed, mode, rep=rep)
        totals.append(population_agent_cost(model, b.states[agent], b.controls[agent], b.states))
    return _estimate(np.array(totals))
