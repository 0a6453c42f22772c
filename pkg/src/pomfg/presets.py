"""Named model presets with numeric parameters."""

from __future__ import annotations

import numpy as np

from .control import CostForm
from .dynamics import GridSpec, Scenario
from .filtering import BenesModel


def driftless(sigma: float = 1.0, T: float = 1.0, dt: float = 1e-3, seed: int = 0, **kw) -> Scenario:
    return Scenario(T=T, dt=dt, f_dagger=lambda t, x, y: 0.0 * x, sigma=sigma, h=lambda x: 0.0 * x,
                    cost=CostForm(lambda x, y: x**2 + 0.0 * y, lam=1.0), U=(-1.0, 1.0),
                    init_means=0.0, init_var=0.0, seed=seed, grid=GridSpec(-10.0, 10.0, 400),
                    f_bound=0.0, name="driftless", **kw)


def linear_gaussian(a: float = -0.2, c: float = 1.0, sigma: float = 1.0, m0: float = 2.0, v0: float = 0.25,
                    T: float = 1.0, dt: float = 1e-3, seed: int = 0, grid: GridSpec | None = None, **kw) -> Scenario:
    return Scenario(T=T, dt=dt, f_dagger=lambda t, x, y: a * x + 0.0 * y, sigma=sigma, h=lambda x: c * x,
                    cost=CostForm(lambda x, y: x**2 + 0.0 * y, lam=1.0), U=(-1.0, 1.0),
                    init_means=m0, init_var=v0, seed=seed, grid=grid or GridSpec(-10.0, 10.0, 400),
                    name="linear-gaussian", **kw)


def mean_reversion_coupled(gamma: float = 0.5, sigma: float = 0.5, T: float = 1.0, dt: float = 1e-3,
                           m0: float = 0.0, v0: float = 0.25, seed: int = 0, **kw) -> Scenario:
    """f_dagger(t, x, y) = gamma (y - x); the coupling cost is (x - y)^2."""
    return Scenario(T=T, dt=dt, f_dagger=lambda t, x, y: gamma * (y - x), sigma=sigma, h=lambda x: x,
                    cost=CostForm(lambda x, y: (x - y) ** 2, lam=1.0), U=(-1.0, 1.0),
                    init_means=m0, init_var=v0, seed=seed, grid=GridSpec(-6.0, 6.0, 200),
                    name="mean-reversion-coupled", **kw)


def open_loop_drive(amplitude: float = 0.5):
    """State-independent control amplitude * sin(2 pi t), shared by every agent."""
    return lambda t, info: amplitude * np.sin(2 * np.pi * t)


def mean_reversion_flow(gamma: float, sigma: float, m0: float, v0: float, times, amplitude: float = 0.5,
                        x=None):
    """Exact law of the limit system under ``open_loop_drive``: Gaussian, mean m0 + integral of the control.

    With the drive common to all agents the population mean follows the
    drive, so gamma (mean - x) only pulls toward the mean and the variance
    solves dv/dt = -2 gamma v + sigma^2.
    """
    from .measure_flow import MeasureFlow, gaussian_grid_measure

    times = np.asarray(times, float)
    x = np.linspace(-8, 8, 2001) if x is None else x
    # the drive is applied at left endpoints on the simulation grid, so use the same sum for the mean
    dt = np.diff(times)
    drive = amplitude * np.sin(2 * np.pi * times[:-1])
    mean = m0 + np.concatenate([[0.0], np.cumsum(drive * dt)])
    decay = np.exp(-2 * gamma * times)
    var = v0 * decay + sigma**2 * (1 - decay) / (2 * gamma)
    return MeasureFlow(times, [gaussian_grid_measure(m, v, x) for m, v in zip(mean, var)])


def benes_quadratic(gamma: float = 0.1, target: float = 1.0, weight: float = 1.0, lam: float = 1.0,
                    G11: float = 1.0, G22: float = 0.5, Delta: float = 1.0, varsigma: float = 0.5,
                    eta0: float = 2.0, obs: float = 1.0, noise: float = 1.0, P0: float = 0.5,
                    xi=(0.5, 0.0), T: float = 1.0, dt: float = 0.01, U=(-2.0, 2.0)) -> BenesModel:
    """Quadratic Gamma with constant Delta and varsigma and eta(t) = eta0 - G11^2 Delta t / 2.

    That eta path makes phi = log Gamma solve its PDE exactly with Q = m = delta = 0.
    The running cost is weight (z2 - target)^2 + gamma (z2 - y)^2 + lam u^2 / 2,
    with y distributed as the second coordinate across the population.
    """
    def l0(z, y):
        return weight * (z[..., 1] - target) ** 2 + gamma * (z[..., 1] - y) ** 2

    return BenesModel(
        G11=G11, G22=G22, H=obs * np.eye(2), Nmat=noise * np.eye(2), Q=np.zeros((2, 2)), m=np.zeros(2),
        delta=0.0, Delta=Delta, varsigma=varsigma, eta=lambda t: eta0 - 0.5 * G11**2 * Delta * t,
        P0=P0 * np.eye(2), xi=np.asarray(xi, float), cost=CostForm(l0, lam), T=T, dt=dt, U=tuple(U),
        name="benes-quadratic" if gamma else "benes-coupling-free",
    )
