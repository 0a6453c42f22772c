"""Nash certainty equivalence iteration: best response to a frozen flow, then the
flow that response generates, repeated with common random numbers."""

from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .control import HJBGrid, PolicyTable, simulate_benes, solve_hjb_sufficient_stats
from .errors import InvalidInput, NonContractive
from .filtering import BenesModel
from .measure_flow import Measure, MeasureFlow, PathEnsemble, flow_distance, path_distance_DT

log = logging.getLogger(__name__)

STALL_WINDOW = 5


@dataclass(frozen=True)
class GainEstimate:
    c1_hat: float
    c2_hat: float
    skipped_pairs: int = 0

    @property
    def product(self) -> float:
        return self.c1_hat * self.c2_hat

    @property
    def passed(self) -> bool:
        return self.product < 1.0


@dataclass
class FixedPointReport:
    iterates: list
    distances: list
    converged: bool
    iterations: int
    gain_estimate: GainEstimate | None = None
    path_distance: float | None = None
    policy: PolicyTable | None = None
    warnings: list = field(default_factory=list)
    ensemble_size: int = 0

    def write_csv(self, path) -> None:
        c1 = c2 = ""
        if self.gain_estimate is not None:
            c1, c2 = f"{self.gain_estimate.c1_hat:.17g}", f"{self.gain_estimate.c2_hat:.17g}"
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "distance", "c1_hat", "c2_hat"])
            for k, d in enumerate(self.distances, start=1):
                out.writerow([k, f"{d:.17g}", c1, c2])


def best_response_map(flow: MeasureFlow, model: BenesModel, grids: HJBGrid, mode: str = "innovation") -> PolicyTable:
    return solve_hjb_sufficient_stats(model, flow, grids, mode)[1]


def _closed_loop(policy, model, M, seed, mode):
    return simulate_benes(model, policy, M, seed, mode)


def induced_flow_of_policy(policy, model: BenesModel, M: int, seed: int, mode: str = "innovation") -> MeasureFlow:
    """Empirical flow of the second (controlled) coordinate under the policy.

    The mean field enters this model only through the cost, so the closed
    loop does not need the flow that generated the policy.
    """
    return _closed_loop(policy, model, M, seed, mode).second_coordinate_flow()


def _mix(old: MeasureFlow, new: MeasureFlow, theta: float) -> MeasureFlow:
    if theta >= 1.0:
        return new
    mixed = []
    for a, b in zip(old.measures, new.measures):
        xa, wa = a.particles()
        xb, wb = b.particles()
        mixed.append(Measure(np.concatenate([xa, xb]), np.concatenate([(1 - theta) * wa, theta * wb])))
    return MeasureFlow(new.times, mixed)


def nce_iterate(initial_flow: MeasureFlow, model: BenesModel, tol: float, max_iter: int, M: int, seed: int,
                grids: HJBGrid | None = None, mode: str = "innovation", damping: float = 1.0) -> FixedPointReport:
    """Iterate flow -> best response -> induced flow until successive flows agree.

    The response to ``initial_flow`` is iterate 0; distance k compares iterate
    k with iterate k-1 using the sup over time of marginal distances.  The
    same seed drives every closed-loop simulation.
    """
    if not tol > 0:
        raise InvalidInput("tol must be positive")
    if not 0 < damping <= 1:
        raise InvalidInput("damping must lie in (0, 1]")
    grids = grids or HJBGrid.around(model)
    policy = best_response_map(initial_flow, model, grids, mode)
    bundle = _closed_loop(policy, model, M, seed, mode)
    flow = bundle.second_coordinate_flow()
    iterates, distances, notes = [initial_flow, flow], [], []
    paths = prev_paths = bundle.states[:, :, 1]
    stall, converged = 0, False
    for k in range(1, max_iter + 1):
        policy = best_response_map(flow, model, grids, mode)
        bundle = _closed_loop(policy, model, M, seed, mode)
        new_flow = _mix(flow, bundle.second_coordinate_flow(), damping)
        d = flow_distance(flow, new_flow)
        distances.append(d)
        iterates.append(new_flow)
        log.info("iteration %d distance %.3e", k, d)
        stall = stall + 1 if len(distances) > 1 and d >= distances[-2] else 0
        if stall >= STALL_WINDOW and not notes:
            msg = f"distances failed to decrease for {STALL_WINDOW} consecutive iterations"
            warnings.warn(msg, NonContractive, stacklevel=2)
            notes.append(msg)
        prev_paths, paths, flow = paths, bundle.states[:, :, 1], new_flow
        if d < tol:
            converged = True
            break
    times = model.times
    d_full = path_distance_DT(PathEnsemble(times, prev_paths), PathEnsemble(times, paths)) if M <= 2000 else None
    return FixedPointReport(iterates, distances, converged, len(distances), None, d_full, policy, notes, M)


def probe_states(model: BenesModel, policy, n: int, M: int, seed: int, mode: str = "innovation") -> list:
    """(t, r) pairs sampled from simulated filter trajectories."""
    bundle = simulate_benes(model, policy, M, seed, mode)
    rng = np.random.default_rng(seed)
    paths = rng.integers(0, bundle.n_paths, n)
    steps = rng.integers(0, bundle.times.size - 1, n)
    return [(float(bundle.times[k]), bundle.stats[i, k]) for i, k in zip(paths, steps)]


def _policy_gap(p, q, probes) -> float:
    return max(float(np.abs(p(t, r) - q(t, r)).max()) for t, r in probes)


def estimate_gain_constants(model: BenesModel, base_flow: MeasureFlow, perturbations: list, probes: list,
                            grids: HJBGrid | None = None, M: int = 1000, seed: int = 0,
                            mode: str = "innovation") -> GainEstimate:
    """Empirical lower bounds on the sensitivity constants.

    c1: policy change per unit flow change; c2: induced-flow change per unit
    policy change.  Pairs with a zero denominator are skipped.
    """
    if len(perturbations) < 2:
        raise InvalidInput("need at least two perturbation flows")
    grids = grids or HJBGrid.around(model)
    flows = [base_flow, *perturbations]
    policies = [best_response_map(f, model, grids, mode) for f in flows]
    induced = [induced_flow_of_policy(p, model, M, seed, mode) for p in policies]
    c1 = c2 = 0.0
    skipped = 0
    for i, j in itertools.combinations(range(len(flows)), 2):
        d_flow = flow_distance(flows[i], flows[j])
        d_pol = _policy_gap(policies[i], policies[j], probes)
        if d_flow > 0:
            c1 = max(c1, d_pol / d_flow)
        else:
            skipped += 1
            log.info("skipping flow pair (%d, %d) at distance 0", i, j)
        if d_pol > 0:
            c2 = max(c2, flow_distance(induced[i], induced[j]) / d_pol)
        else:
            skipped += 1
            log.info("skipping policy pair (%d, %d) with identical policies", i, j)
    return GainEstimate(c1, c2, skipped)
