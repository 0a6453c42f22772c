"""Euler-Maruyama simulation of the N-agent system and its McKean-Vlasov limit.

Randomness is counter based: every (replication, agent, noise kind) triple
owns an independent Philox stream.  Agent j therefore sees the same Brownian
increments whether it lives in an N-agent population or is the j-th of M
McKean-Vlasov copies, which is the coupling the rate studies rely on.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InvalidInput
from .measure_flow import Measure, MeasureFlow, empirical_measure

log = logging.getLogger(__name__)

NOISE_KINDS = {"init": 0, "state": 1, "obs": 2, "filter": 3}
_ORIGIN = empirical_measure([0.0])


def stream(seed: int, agent: int, kind: str, rep: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(rep), int(agent), NOISE_KINDS[kind]))
    return np.random.Generator(np.random.Philox(ss))


def normals(seed: int, agents: Sequence[int], kind: str, shape: tuple, rep: int = 0) -> np.ndarray:
    """Standard normals of the given per-agent shape, stacked along a leading agent axis."""
    return np.stack([stream(seed, a, kind, rep).standard_normal(shape) for a in agents])


@dataclass(frozen=True)
class GridSpec:
    x_lo: float = -8.0
    x_hi: float = 8.0
    n_nodes: int = 400
    k: float = 2.0

    @property
    def nodes(self) -> np.ndarray:
        dx = (self.x_hi - self.x_lo) / self.n_nodes
        return self.x_lo + dx * (np.arange(self.n_nodes) + 0.5)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_nodes


@dataclass(frozen=True)
class Scenario:
    """Scalar partially observed model.

    ``f_dagger(t, x, y)`` and ``h(x)`` must broadcast over numpy arrays.
    ``cost`` is a control.CostForm.  ``init_means`` may be a scalar or one
    value per agent; every agent shares ``init_var``.
    """

    T: float
    dt: float
    f_dagger: Callable
    sigma: float
    h: Callable
    cost: object = None
    U: tuple = (-1.0, 1.0)
    init_means: object = 0.0
    init_var: float = 0.0
    seed: int = 0
    grid: GridSpec | None = None
    f_bound: float | None = None
    name: str = "scenario"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not self.dt > 0 or not self.T > 0:
            raise ConfigError("T and dt must be positive")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(f"T/dt must be an integer (got {n:.6g})")
        if not self.U[0] < self.U[1]:
            raise ConfigError("control set needs u_min < u_max")
        if self.init_var < 0:
            raise ConfigError("initial variance must be nonnegative")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def means_for(self, n: int) -> np.ndarray:
        means = np.atleast_1d(np.asarray(self.init_means, dtype=float))
        if means.size == 1:
            return np.full(n, means[0])
        if means.size < n:
            raise InvalidInput(f"{means.size} initial means configured for {n} agents")
        return means[:n]


@dataclass
class InfoState:
    """What a separated policy may read: per-agent posterior summaries."""

    mean: np.ndarray
    var: np.ndarray


@dataclass
class TrajectoryBundle:
    times: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    controls: np.ndarray
    noises: dict
    seed: int
    filter_means: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["path_id", "t", "z", "y", "u"])
            for i in range(self.n_paths):
                for k, t in enumerate(self.times):
                    out.writerow([i, f"{t:.17g}", f"{self.states[i, k]:.17g}",
                                  f"{self.observations[i, k]:.17g}", f"{self.controls[i, k]:.17g}"])


def mean_field_drift(f_dagger: Callable, t: float, x, mu: Measure | None) -> np.ndarray:
    """The coupling integral of f_dagger(t, x, .) against mu; ``None`` means the point mass at 0."""
    mu = _ORIGIN if mu is None else mu
    atoms, masses = mu.particles()
    x = np.asarray(x, dtype=float)
    vals = f_dagger(t, x[..., None], atoms)
    return np.broadcast_to(vals, x.shape + atoms.shape) @ masses / masses.sum()


def zero_policy(t, info):
    return 0.0


def _controls(policies, t, info, n, U) -> np.ndarray:
    if callable(policies):
        u = np.broadcast_to(np.asarray(policies(t, info), dtype=float), (n,))
    else:
        if len(policies) != n:
            raise InvalidInput(f"{len(policies)} policies for {n} agents")
        u = np.empty(n)
        for i, pol in enumerate(policies):
            sub = None if info is None else InfoState(info.mean[i:i + 1], info.var[i:i + 1])
            u[i] = float(np.asarray(pol(t, sub)).ravel()[0])
    return np.clip(u, U[0], U[1])


def _simulate(scenario: Scenario, policies, n: int, drift: Callable, filter_mode: str,
              filter_flow: Callable, rep: int, n_particles: int) -> TrajectoryBundle:
    if n < 1:
        raise InvalidInput("need at least one agent")
    if filter_mode not in ("grid", "particle", "none"):
        raise ConfigError(f"unknown filter mode {filter_mode!r}")
    sc, dt, steps = scenario, scenario.dt, scenario.n_steps
    agents = range(n)
    means = sc.means_for(n)
    z0 = means + np.sqrt(sc.init_var) * normals(sc.seed, agents, "init", (), rep)
    dw = normals(sc.seed, agents, "state", (steps,), rep) * np.sqrt(dt)
    dv = normals(sc.seed, agents, "obs", (steps,), rep) * np.sqrt(dt)

    z = np.empty((n, steps + 1))
    y = np.zeros((n, steps + 1))
    u = np.empty((n, steps + 1))
    fm = np.empty((n, steps + 1)) if filter_mode != "none" else None
    z[:, 0] = z0

    from . import filtering  # filtering builds on this module's Scenario

    bank = clouds = None
    if filter_mode == "grid":
        grid = sc.grid or GridSpec()
        bank = filtering.GridFilterBank(grid.nodes, means, sc.init_var, sc.sigma, dt, grid.k)
    elif filter_mode == "particle":
        rngs = [stream(sc.seed, a, "filter", rep) for a in agents]
        clouds = [filtering.ParticleCloud(means[i] + np.sqrt(sc.init_var) * rngs[i].standard_normal(n_particles),
                                np.zeros(n_particles)) for i in agents]

    for k in range(steps + 1):
        t = k * dt
        if bank is not None:
            info = InfoState(bank.mean, bank.variance)
        elif clouds is not None:
            info = InfoState(np.array([c.mean for c in clouds]), np.array([c.variance for c in clouds]))
        else:
            info = None
        if fm is not None:
            fm[:, k] = info.mean
        u[:, k] = _controls(policies, t, info, n, sc.U)
        if k == steps:
            break
        zk = z[:, k]
        dy = sc.h(zk) * dt + dv[:, k]
        y[:, k + 1] = y[:, k] + dy
        z[:, k + 1] = zk + (drift(t, zk) + u[:, k]) * dt + sc.sigma * dw[:, k]
        if bank is not None:
            fstar = mean_field_drift(sc.f_dagger, t, bank.x, filter_flow(t, zk))
            bank.step(u[:, k], dy, dt, fstar, sc.h)
        elif clouds is not None:
            mu = filter_flow(t, zk)
            clouds = [filtering.particle_filter_step(c, u[i, k], dy[i], dt, sc, mu, rngs[i]) for i, c in enumerate(clouds)]

    noises = {"init": z0, "state": dw, "obs": dv}
    return TrajectoryBundle(sc.times, z, y, u, noises, sc.seed, fm)


def simulate_population(scenario: Scenario, policies, N: int, filter_mode: str = "grid",
                        flow: MeasureFlow | None = None, rep: int = 0, n_particles: int = 500) -> TrajectoryBundle:
    """N coupled agents; each drift averages f_dagger over the current population.

    Agents' filters use ``flow`` when given (the decentralized mean field
    model), otherwise the current empirical measure.
    """
    def filter_mu(t, zk):
        return flow.at(t) if flow is not None else empirical_measure(zk)

    return _simulate(scenario, policies, N, _population_drift(scenario.f_dagger), filter_mode, filter_mu, rep, n_particles)


def _population_drift(f):
    def drift(t, zk):
        vals = np.broadcast_to(f(t, zk[:, None], zk[None, :]), (zk.size, zk.size))
        return vals.mean(axis=1)
    return drift


def simulate_mckean_vlasov(scenario: Scenario, policy, flow: MeasureFlow, M: int, filter_mode: str = "grid",
                           rep: int = 0, n_particles: int = 500) -> TrajectoryBundle:
    """M independent copies driven by the frozen flow; copy j shares agent j's noise."""
    f = scenario.f_dagger

    def drift(t, zk):
        return mean_field_drift(f, t, zk, flow.at(t))

    return _simulate(scenario, policy, M, drift, filter_mode, lambda t, zk: flow.at(t), rep, n_particles)


def induced_flow(bundle: TrajectoryBundle) -> MeasureFlow:
    if bundle.n_paths < 1:
        raise InvalidInput("empty bundle")
    return MeasureFlow.from_samples(bundle.times, bundle.states)
