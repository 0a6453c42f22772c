"""Information states: grid Zakai/Kushner solver, particle filter, and the
finite-dimensional filter for models whose drift is the log-gradient of a
quadratic.

The grid solver is a cell-centred finite-volume scheme.  One step is an
explicit conservative Fokker-Planck update with zero-flux walls followed by a
pointwise multiplicative observation factor, so mass is conserved exactly
when the observation function vanishes.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np

from .dynamics import Scenario, mean_field_drift
from .errors import ConfigError, DomainError, FilterBlowup, NumericalError
from .measure_flow import Measure

log = logging.getLogger(__name__)

CFL_BOUND = 0.5
BOUNDARY_MASS_LIMIT = 1e-6
_TINY, _HUGE = 1e-300, 1e300


def check_cfl(sigma: float, dt: float, dx: float) -> None:
    ratio = sigma**2 * dt / dx**2
    if ratio > CFL_BOUND:
        raise ConfigError(
            f"CFL bound violated: sigma^2*dt/dx^2 = {ratio:.4g} > {CFL_BOUND} "
            f"(sigma={sigma}, dt={dt}, dx={dx:.4g})"
        )


@dataclass(frozen=True)
class DensityGrid:
    x: np.ndarray
    values: np.ndarray
    k: float = 2.0
    t: float = 0.0

    @cached_property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @cached_property
    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    @property
    def mean(self) -> float:
        return float(self.values @ self.x * self.dx / self.mass)

    @property
    def variance(self) -> float:
        mu = self.mean
        return float(self.values @ (self.x - mu) ** 2 * self.dx / self.mass)

    def ek_norm(self) -> float:
        return ek_norm(self.x, self.values, self.k)

    def as_measure(self) -> Measure:
        return Measure(self.x, self.values, "grid").normalized()


def ek_norm(x: np.ndarray, values: np.ndarray, k: float = 2.0) -> float:
    dx = x[1] - x[0]
    return float(np.sum((1 + np.abs(x) ** k) * np.abs(values), axis=-1) * dx)


def ek_distance(a: DensityGrid, b: DensityGrid) -> float:
    return ek_norm(a.x, a.values - b.values, a.k)


def gaussian_density(x: np.ndarray, mean, var, k: float = 2.0, t: float = 0.0) -> DensityGrid:
    x = np.asarray(x, dtype=float)
    vals = np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)
    d = DensityGrid(x, vals, k, t)
    return normalize(d)


def fokker_planck_step(p: np.ndarray, dx: float, drift: np.ndarray, sigma: float, dt: float) -> np.ndarray:
    """Conservative explicit step of dp = (1/2 sigma^2 p'' - (b p)') dt, zero flux at the walls.

    ``p`` and ``drift`` are node arrays that broadcast over leading axes.
    """
    b_half = 0.5 * (drift[..., 1:] + drift[..., :-1])
    flux = 0.5 * b_half * (p[..., 1:] + p[..., :-1]) - 0.5 * sigma**2 * np.diff(p, axis=-1) / dx
    div = np.zeros_like(p)
    div[..., :-1] += flux
    div[..., 1:] -= flux
    out = p - dt / dx * div
    if np.any(out < 0):
        worst = out.min()
        if worst < -1e-12:
            log.debug("clamping negative density values (min %.3g)", worst)
        out = np.maximum(out, 0.0)
    return out


def _guard(values: np.ndarray, dx: float, t: float) -> np.ndarray:
    mass = values.sum(axis=-1) * dx
    if not np.all(np.isfinite(mass)) or np.any(mass < _TINY) or np.any(mass > _HUGE):
        raise FilterBlowup("filter mass left the representable range", t)
    edge = (values[..., 0] + values[..., -1]) * dx
    if np.any(edge > BOUNDARY_MASS_LIMIT * mass):
        raise FilterBlowup("filter mass reached the grid boundary", t)
    return mass


def _drift_nodes(scenario: Scenario, t: float, x: np.ndarray, mu: Measure | None, u) -> np.ndarray:
    return mean_field_drift(scenario.f_dagger, t, x, mu) + float(u)


def zakai_step(d: DensityGrid, u, dy, dt, scenario: Scenario, mu: Measure | None) -> DensityGrid:
    check_cfl(scenario.sigma, dt, d.dx)
    drift = _drift_nodes(scenario, d.t, d.x, mu, u)
    p = fokker_planck_step(d.values, d.dx, drift, scenario.sigma, dt)
    hx = scenario.h(d.x)
    p = p * np.exp(hx * dy - 0.5 * hx**2 * dt)
    t = d.t + dt
    _guard(p, d.dx, t)
    return DensityGrid(d.x, p, d.k, t)


def normalize(d: DensityGrid) -> DensityGrid:
    if not d.mass > 0 or not np.isfinite(d.mass):
        raise FilterBlowup("cannot normalize a density with zero or non-finite mass", d.t)
    return DensityGrid(d.x, d.values / d.mass, d.k, d.t)


def kushner_step(d: DensityGrid, u, dy, dt, scenario: Scenario, mu: Measure | None) -> DensityGrid:
    """Normalized step driven by the innovation dy - <h, p> dt."""
    check_cfl(scenario.sigma, dt, d.dx)
    drift = _drift_nodes(scenario, d.t, d.x, mu, u)
    p = fokker_planck_step(d.values / d.mass, d.dx, drift, scenario.sigma, dt)
    p = p / (p.sum() * d.dx)
    hx = scenario.h(d.x)
    hbar = p @ hx * d.dx
    centred = hx - hbar
    p = p * np.exp(centred * (dy - hbar * dt) - 0.5 * centred**2 * dt)
    t = d.t + dt
    mass = _guard(p, d.dx, t)
    return DensityGrid(d.x, p / mass, d.k, t)


class GridFilterBank:
    """Independent normalized grid filters for many agents, stepped together."""

    def __init__(self, x: np.ndarray, means, var: float, sigma: float, dt: float, k: float = 2.0):
        self.x = np.asarray(x, dtype=float)
        self.dx = float(self.x[1] - self.x[0])
        check_cfl(sigma, dt, self.dx)
        if var < self.dx**2:
            raise ConfigError(f"prior variance {var} is not resolved by grid spacing {self.dx:.4g}")
        means = np.atleast_1d(np.asarray(means, dtype=float))
        vals = np.exp(-0.5 * (self.x[None, :] - means[:, None]) ** 2 / var)
        self.values = vals / (vals.sum(axis=1, keepdims=True) * self.dx)
        self.sigma, self.k, self.t = sigma, k, 0.0

    @property
    def mean(self) -> np.ndarray:
        return self.values @ self.x * self.dx

    @property
    def variance(self) -> np.ndarray:
        return self.values @ self.x**2 * self.dx - self.mean**2

    def step(self, u: np.ndarray, dy: np.ndarray, dt: float, fstar: np.ndarray, h: Callable) -> None:
        drift = fstar[None, :] + np.asarray(u, dtype=float)[:, None]
        p = fokker_planck_step(self.values, self.dx, drift, self.sigma, dt)
        p /= p.sum(axis=1, keepdims=True) * self.dx
        hx = h(self.x)
        hbar = p @ hx * self.dx
        centred = hx[None, :] - hbar[:, None]
        p *= np.exp(centred * (dy - hbar * dt)[:, None] - 0.5 * centred**2 * dt)
        self.t += dt
        mass = _guard(p, self.dx, self.t)
        self.values = p / mass[:, None]


# particle filter -----------------------------------------------------------

@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray
    log_weights: np.ndarray
    t: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - self.log_weights.max())
        return w / w.sum()

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w**2))

    @property
    def mean(self) -> float:
        return float(self.weights @ self.positions)

    @property
    def variance(self) -> float:
        w = self.weights
        mu = w @ self.positions
        return float(w @ (self.positions - mu) ** 2)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    points = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(weights), points)
    return np.minimum(idx, n - 1)


def particle_filter_step(c: ParticleCloud, u, dy, dt, scenario: Scenario, mu: Measure | None,
                         rng: np.random.Generator) -> ParticleCloud:
    x = c.positions
    hx = scenario.h(x)
    lw = c.log_weights + hx * dy - 0.5 * hx**2 * dt
    if not np.any(np.isfinite(lw)):
        raise FilterBlowup("all particle weights underflowed", c.t)
    lw = np.where(np.isfinite(lw), lw - lw[np.isfinite(lw)].max(), -np.inf)
    w = np.exp(lw)
    w /= w.sum()
    if 1.0 / np.sum(w**2) < 0.5 * x.size:
        idx = systematic_resample(w, rng)
        x, lw = x[idx], np.zeros(x.size)
    fstar = mean_field_drift(scenario.f_dagger, c.t, x, mu)
    x = x + (fstar + u) * dt + scenario.sigma * np.sqrt(dt) * rng.standard_normal(x.size)
    return ParticleCloud(x, lw, c.t + dt)


# linear-Gaussian oracle ------------------------------------------------------

def kalman_bucy_oracle(a: float, c: float, sigma: float, R: float, dy: np.ndarray,
                       m0: float, v0: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance paths of dx = a x dt + sigma dw, dy = c x dt + sqrt(R) dv.

    Returns arrays of length len(dy) + 1 along the last axis.  The variance
    follows an RK4 solve of its Riccati equation; the mean uses the same
    left-point innovation as the filters it is compared against.
    """
    if R <= 0:
        raise ConfigError("observation noise variance R must be positive")
    dy = np.asarray(dy, dtype=float)
    n = dy.shape[-1]

    def rhs(v):
        return 2 * a * v + sigma**2 - v**2 * c**2 / R

    v = np.empty(n + 1)
    v[0] = v0
    for k in range(n):
        k1 = rhs(v[k])
        k2 = rhs(v[k] + 0.5 * dt * k1)
        k3 = rhs(v[k] + 0.5 * dt * k2)
        k4 = rhs(v[k] + dt * k3)
        v[k + 1] = v[k] + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    m = np.empty(dy.shape[:-1] + (n + 1,))
    m[..., 0] = m0
    for k in range(n):
        mk = m[..., k]
        m[..., k + 1] = mk + a * mk * dt + v[k] * c / R * (dy[..., k] - c * mk * dt)
    return m, v


# finite-dimensional filter -------------------------------------------------------

def _at(value, t):
    return value(t) if callable(value) else value


@dataclass(frozen=True)
class BenesModel:
    """Two-dimensional model: log-gradient drift on the first coordinate,
    integrator of the control on the second, linear observations of both.

    Scalars may be given as constants or as callables of time.
    """

    G11: float = 1.0
    G22: float = 0.5
    H: np.ndarray = field(default_factory=lambda: np.eye(2))
    Nmat: np.ndarray = field(default_factory=lambda: np.eye(2))
    Q: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    m: np.ndarray = field(default_factory=lambda: np.zeros(2))
    delta: float = 0.0
    Delta: float = 1.0
    varsigma: float = 0.5
    eta: float = 2.0
    P0: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    xi: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    cost: object = None
    T: float = 1.0
    dt: float = 0.01
    U: tuple = (-2.0, 2.0)
    name: str = "benes"

    def __post_init__(self):
        if not (_at(self.G11, 0.0) > 0 and _at(self.G22, 0.0) > 0):
            raise ConfigError("G11 and G22 must be positive")
        n_steps = self.T / self.dt
        if self.dt <= 0 or abs(n_steps - round(n_steps)) > 1e-9 * max(1.0, n_steps):
            raise ConfigError("T/dt must be a positive integer")
        if not self.U[0] < self.U[1]:
            raise ConfigError("control set needs u_min < u_max")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def G(self, t: float) -> np.ndarray:
        return np.diag([_at(self.G11, t), _at(self.G22, t)])

    def coeffs(self, t: float):
        return (np.asarray(_at(self.H, t), float), np.asarray(_at(self.Nmat, t), float),
                np.asarray(_at(self.Q, t), float), np.asarray(_at(self.m, t), float),
                float(_at(self.delta, t)))

    def gamma(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * _at(self.Delta, t) * x**2 + _at(self.varsigma, t) * x + _at(self.eta, t)


@dataclass(frozen=True)
class SufficientStats:
    r: np.ndarray
    P: np.ndarray
    lam: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.lam))):
            raise NumericalError("non-finite sufficient statistics")


def initial_stats(model: BenesModel, n: int | None = None) -> SufficientStats:
    r = np.array(model.xi, dtype=float)
    lam = 0.0
    if n is not None:
        r, lam = np.tile(r, (n, 1)), np.zeros(n)
    return SufficientStats(r, np.array(model.P0, dtype=float), np.asarray(lam, dtype=float), 0.0)


def riccati_step(P: np.ndarray, Q: np.ndarray, G: np.ndarray, dt: float) -> np.ndarray:
    """One RK4 step of dP/dt = -P Q P + G G^T, then symmetrize and clamp to PSD."""
    GG = G @ G.T

    def rhs(p):
        return -p @ Q @ p + GG

    k1 = rhs(P)
    k2 = rhs(P + 0.5 * dt * k1)
    k3 = rhs(P + 0.5 * dt * k2)
    k4 = rhs(P + dt * k3)
    out = P + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    out = 0.5 * (out + out.T)
    if not np.all(np.isfinite(out)):
        raise NumericalError("Riccati step produced non-finite entries")
    vals, vecs = np.linalg.eigh(out)
    if vals.min() < 0:
        log.debug("clamping negative Riccati eigenvalue %.3g", vals.min())
        out = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return out


def filter_gain(P: np.ndarray, H: np.ndarray, Nmat: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(Nmat)
    except np.linalg.LinAlgError:
        raise ConfigError("observation noise covariance N must be positive definite") from None
    return P @ H.T @ np.linalg.inv(Nmat)


def benes_filter_step(s: SufficientStats, u, dy, dt: float, model: BenesModel, mode: str = "innovation") -> SufficientStats:
    """Advance (r, P, lambda) by one step.

    ``literal`` integrates the mean ODE exactly as displayed, with no
    observation term.  ``innovation`` adds the gain P H^T N^-1 (dy - H r dt)
    and lets the covariance absorb the observation precision H^T N^-1 H, so
    that the linear sub-case reduces to the Kalman-Bucy filter.
    """
    if mode not in ("literal", "innovation"):
        raise ConfigError(f"unknown filter mode {mode!r}")
    H, Nmat, Q, m, delta = model.coeffs(s.t)
    P, r = s.P, s.r
    u = np.asarray(u, dtype=float)
    control = np.stack([np.zeros_like(u), u], axis=-1)
    drift = r @ (P @ Q).T - P @ m + control
    K = filter_gain(P, H, Nmat)
    quad = np.einsum("...i,ij,...j->...", r, Q, r)
    lam = s.lam + 0.5 * (quad + 2 * r @ m + delta + np.trace(P @ Q)) * dt
    if mode == "innovation":
        r = r + drift * dt + (np.asarray(dy) - r @ H.T * dt) @ K.T
        P = riccati_step(P, Q + H.T @ np.linalg.solve(Nmat, H), model.G(s.t), dt)
    else:
        r = r + drift * dt
        P = riccati_step(P, Q, model.G(s.t), dt)
    return SufficientStats(r, P, lam, s.t + dt)


def benes_drift(model: BenesModel, t: float, x) -> np.ndarray:
    gam = model.gamma(t, x)
    if np.any(gam <= 0):
        raise DomainError("Gamma must be positive where the drift is evaluated")
    g11 = _at(model.G11, t)
    return g11**2 * (_at(model.Delta, t) * np.asarray(x, float) + _at(model.varsigma, t)) / gam


def benes_density(s: SufficientStats, model: BenesModel, x) -> np.ndarray:
    """Unnormalized information state Gamma(t, x1) exp(lambda) N(x; r, P)."""
    x = np.asarray(x, dtype=float)
    gam = model.gamma(s.t, x[..., 0])
    if np.any(gam <= 0):
        raise DomainError("Gamma must be positive where the information state is evaluated")
    det = np.linalg.det(s.P)
    if det <= 0:
        raise DomainError("P must be nonsingular to evaluate the information state")
    diff = x - s.r
    quad = np.einsum("...i,ij,...j->...", diff, np.linalg.inv(s.P), diff)
    gauss = np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(det))
    return gam * np.exp(s.lam) * gauss


def benes_marginal_x1(s: SufficientStats, model: BenesModel, x1: np.ndarray) -> np.ndarray:
    """Normalized first-coordinate marginal of the information state on a uniform grid."""
    var = s.P[0, 0]
    vals = model.gamma(s.t, x1) * np.exp(-0.5 * (x1 - s.r[0]) ** 2 / var)
    return vals / (vals.sum() * (x1[1] - x1[0]))


@dataclass
class ResidualReport:
    max_residual: float
    tolerance: float
    passed: bool
    worst_point: tuple[float, float] | None = None


def phi_residual_check(model: BenesModel, grid, times, tol: float = 1e-6, h: float = 1e-5) -> ResidualReport:
    """Residual of d_t phi + 1/2 G11^2 phi'' + 1/2 (G11 phi')^2 - 1/2 (Q x^2 + 2 m x + delta) for phi = log Gamma.

    Space derivatives are exact for the quadratic Gamma; the time derivative
    is a central difference of the coefficient paths.
    """
    x = np.asarray(grid, dtype=float)
    worst, where = 0.0, None
    for t in np.atleast_1d(times):
        gam = model.gamma(t, x)
        if np.any(gam <= 0):
            raise DomainError(f"Gamma not positive on the grid at t={t}")
        g1 = _at(model.Delta, t) * x + _at(model.varsigma, t)
        phi_x = g1 / gam
        phi_xx = _at(model.Delta, t) / gam - phi_x**2
        phi_t = (np.log(model.gamma(t + h, x)) - np.log(model.gamma(t - h, x))) / (2 * h)
        g11 = _at(model.G11, t)
        _, _, Q, m, delta = model.coeffs(t)
        lhs = phi_t + 0.5 * g11**2 * phi_xx + 0.5 * (g11 * phi_x) ** 2
        rhs = 0.5 * (Q[0, 0] * x**2 + 2 * m[0] * x + delta)
        res = np.abs(lhs - rhs)
        j = int(res.argmax())
        if res[j] > worst:
            worst, where = float(res[j]), (float(t), float(x[j]))
    return ResidualReport(worst, tol, worst < tol, where)


def sample_benes_initial(model: BenesModel, uniforms: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Draw z(0) from the normalized initial information state by inverse transform on x1
    and the Gaussian conditional on x2."""
    xi, P0 = np.asarray(model.xi, float), np.asarray(model.P0, float)
    sd = np.sqrt(P0[0, 0])
    grid = np.linspace(xi[0] - 10 * sd, xi[0] + 10 * sd, 8001)
    dens = model.gamma(0.0, grid) * np.exp(-0.5 * (grid - xi[0]) ** 2 / P0[0, 0])
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    x1 = np.interp(uniforms, cdf, grid)
    cond_mean = xi[1] + P0[1, 0] / P0[0, 0] * (x1 - xi[0])
    cond_var = P0[1, 1] - P0[1, 0] ** 2 / P0[0, 0]
    return np.stack([x1, cond_mean + np.sqrt(max(cond_var, 0.0)) * normals], axis=-1)


# CSV --------------------------------------------------------------------------------

def write_density_csv(d: DensityGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# t={d.t:.17g} mass={d.mass:.17g} k_norm={d.ek_norm():.17g}\n")
        out = csv.writer(fh)
        out.writerow(["x", "value"])
        out.writerows((f"{x:.17g}", f"{v:.17g}") for x, v in zip(d.x, d.values))


def write_stats_csv(history: list[SufficientStats], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "r1", "r2", "P11", "P12", "P22", "lambda"])
        for s in history:
            row = [s.t, s.r[0], s.r[1], s.P[0, 0], s.P[0, 1], s.P[1, 1], float(s.lam)]
            out.writerow([f"{v:.17g}" for v in row])
