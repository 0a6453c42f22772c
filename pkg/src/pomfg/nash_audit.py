"""Monte Carlo audits of the two large-population guarantees: the 1/sqrt(N)
distance between the N-agent system and its McKean-Vlasov copies, and the
epsilon-Nash property of the mean field policy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .control import HJBGrid, population_agent_cost, simulate_benes, solve_hjb_sufficient_stats
from .dynamics import Scenario, simulate_mckean_vlasov, simulate_population
from .errors import InvalidInput
from .filtering import BenesModel
from .measure_flow import MeasureFlow

log = logging.getLogger(__name__)

NO_DEVIATION = "no profitable deviation detected at any N"
DETECTION_SE = 2.0
MACHINE_NOISE = 1e-12
DEFAULT_DEVIATIONS = tuple((a, b) for a in (0.8, 0.9, 1.0, 1.1, 1.2) for b in (-0.1, 0.0, 0.1))


@dataclass
class RateReport:
    N_values: list
    errors: list
    stderrs: list
    slope: float
    intercept: float
    spearman: float = float("nan")
    literal_errors: list = field(default_factory=list)
    message: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["N", "error", "stderr"])
            for n, e, s in zip(self.N_values, self.errors, self.stderrs):
                out.writerow([n, f"{e:.17g}", f"{s:.17g}"])


def _fit(N_values, values) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(N_values), np.log(values), 1)
    return float(slope), float(intercept)


def mv_rate_study(model: Scenario, policy, N_values: Sequence[int], replications: int, seed: int,
                  flow: MeasureFlow, filter_mode: str = "none") -> RateReport:
    """Coupled gap between each population and its McKean-Vlasov copies.

    Agents are exchangeable, so the per-agent expected gap is estimated by
    averaging over agents and replications before taking the sup over time.
    The literal estimator (sup over agents of replication means) is kept in
    ``literal_errors``; it carries an upward extreme-value bias growing with N.
    """
    N_values = list(N_values)
    if any(n < 4 or n > 4096 for n in N_values) or sorted(set(N_values)) != N_values:
        raise InvalidInput("N_values must be increasing and within 4..4096")
    if replications < 4:
        raise InvalidInput("need at least 4 replications")
    sc = replace(model, seed=seed)
    errors, stderrs, literal = [], [], []
    for n in N_values:
        gaps = np.empty((replications, n, sc.n_steps + 1))
        for rep in range(replications):
            pop = simulate_population(sc, policy, n, filter_mode, flow=flow, rep=rep)
            mv = simulate_mckean_vlasov(sc, policy, flow, n, filter_mode, rep=rep)
            gaps[rep] = np.abs(pop.states - mv.states)
        per_time = gaps.mean(axis=(0, 1))
        k = int(per_time.argmax())
        rep_means = gaps[:, :, k].mean(axis=1)
        errors.append(float(per_time[k]))
        stderrs.append(float(rep_means.std(ddof=1) / np.sqrt(replications)))
        literal.append(float(gaps.mean(axis=0).max()))
        log.info("N=%d error %.4g", n, errors[-1])
    if max(errors) < MACHINE_NOISE:
        nan = float("nan")
        return RateReport(N_values, errors, stderrs, nan, nan, nan, literal, "gaps at machine-noise level for all N")
    slope, intercept = _fit(N_values, errors)
    rho = float(spearmanr(N_values, errors).statistic) if len(N_values) > 2 else float("nan")
    return RateReport(N_values, errors, stderrs, slope, intercept, rho, literal, f"fitted slope {slope:.3f}")


def epsilon_N(initial_means: Sequence[float], z_bar: float) -> float:
    m = np.asarray(initial_means, dtype=float)
    if m.size == 0:
        raise InvalidInput("epsilon_N needs at least one mean")
    return float(abs(np.mean(m**2) - 2 * z_bar * np.mean(m) + z_bar**2))


@dataclass
class NashGapReport:
    N: int
    baseline_cost: float
    best_deviation_cost: float
    gap: float
    stderr: float
    best_deviation: str
    epsilon_N: float
    deviation_costs: dict = field(default_factory=dict)

    @property
    def detected(self) -> bool:
        """A deviation counts as profitable only beyond two standard errors of the paired difference."""
        return self.gap > DETECTION_SE * self.stderr


def _affine(policy, alpha, beta, U):
    return lambda t, r: np.clip(alpha * policy(t, r) + beta, *U)


def nash_gap(model: BenesModel, mfg_policy, flow: MeasureFlow, N: int, deviation_budget: int, seed: int,
             replications: int = 64, deviations=DEFAULT_DEVIATIONS, best_response: bool = True,
             grids: HJBGrid | None = None, mode: str = "innovation") -> NashGapReport:
    """Agent 0 deviates while the other N-1 agents keep the mean field policy.

    Family (a) rescales and shifts agent 0's own policy output; family (b)
    re-solves the best response against the pooled empirical flow of the
    others.  Every candidate reuses agent 0's noise (common random numbers).
    In this model the state dynamics are uncoupled, so the others' paths do
    not change when agent 0 deviates.
    """
    if deviation_budget < 1:
        raise InvalidInput("deviation_budget must be at least 1")
    family = list(deviations)[:deviation_budget]
    pops = [simulate_benes(model, mfg_policy, N, seed, mode, rep=r) for r in range(replications)]
    baseline = np.array([population_agent_cost(model, b.states[0], b.controls[0], b.states) for b in pops])

    candidates = {f"affine(alpha={a:g},beta={b:g})": _affine(mfg_policy, a, b, model.U) for a, b in family}
    if best_response and N > 1:
        others = np.concatenate([b.states[1:, :, 1] for b in pops])
        empirical = MeasureFlow.from_samples(model.times, others)
        candidates["best_response"] = solve_hjb_sufficient_stats(model, empirical, grids or HJBGrid.around(model), mode)[1]

    costs = {}
    for name, pol in candidates.items():
        if name == "affine(alpha=1,beta=0)":
            costs[name] = baseline
            continue
        per_rep = np.empty(replications)
        for r, b in enumerate(pops):
            dev = simulate_benes(model, pol, 1, seed, mode, rep=r, agents=[0])
            pop = b.states.copy()
            pop[0] = dev.states[0]
            per_rep[r] = population_agent_cost(model, dev.states[0], dev.controls[0], pop)
        costs[name] = per_rep
    best = min(costs, key=lambda k: costs[k].mean()) if costs else None
    best_cost = costs[best].mean() if best else baseline.mean()
    diff = baseline - costs[best] if best else np.zeros(replications)
    eps = epsilon_N(np.full(N, model.xi[1]), float(model.xi[1]))
    return NashGapReport(N, float(baseline.mean()), float(best_cost), float(baseline.mean() - best_cost),
                         float(diff.std(ddof=1) / np.sqrt(replications)) if replications > 1 else float("nan"),
                         best or "baseline", eps, {k: float(v.mean()) for k, v in costs.items()})


@dataclass
class NashRateReport:
    reports: list
    slope: float
    C: float
    passed: bool
    message: str

    @property
    def bounds(self) -> list:
        return [r.epsilon_N + self.C / np.sqrt(r.N) for r in self.reports]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["N", "gap", "epsilon_N", "bound"])
            for r, b in zip(self.reports, self.bounds):
                out.writerow([r.N, f"{r.gap:.17g}", f"{r.epsilon_N:.17g}", f"{b:.17g}"])


def nash_rate_study(model: BenesModel, mfg_policy, flow: MeasureFlow, N_values: Sequence[int], seed: int,
                    **kw) -> NashRateReport:
    budget = kw.pop("deviation_budget", len(DEFAULT_DEVIATIONS))
    reports = [nash_gap(model, mfg_policy, flow, n, budget, seed, **kw) for n in N_values]
    positive = np.array([max(r.gap, 0.0) for r in reports])
    Ns = np.array([r.N for r in reports], float)
    eps = np.array([r.epsilon_N for r in reports])
    C = float(max(np.max((positive - eps) * np.sqrt(Ns)), 0.0))
    mask = positive > 0
    slope = _fit(Ns[mask], positive[mask])[0] if mask.sum() >= 2 else float("nan")
    if not any(r.detected for r in reports):
        return NashRateReport(reports, slope, C, True, NO_DEVIATION)
    within = bool(np.all(positive <= eps + C / np.sqrt(Ns) + 1e-15))
    decreasing = bool(positive[-1] <= positive[0])
    passed = within and (decreasing or (not np.isnan(slope) and slope <= -0.3))
    msg = f"fitted slope {slope:.3f}, C = {C:.4g}, positive gap {'non-increasing' if decreasing else 'increasing'} in N"
    return NashRateReport(reports, slope, C, passed, msg)
