"""Bi-level round planner: exact cohort selection under the remaining
energy budget, then per-client power-mode assignment.

The outer problem picks a cohort minimizing alpha * T_hat - (1 - alpha) *
sum of surrogate values, where T_hat is the cohort's worst-case MAXN round
time normalized by the largest eligible MAXN time so both objective terms
live in [0, 1]. Energy feasibility is checked against each client's MAXN
energy, the conservative estimate the budget audit also uses. The inner
problem then downclocks every selected client to its lowest-energy Pareto
mode that still fits inside the round, which never stretches the round and
never raises energy above the MAXN estimate.

The outer solve is exact without an external solver: every cohort has a
unique slowest member under the (time, id) order, so cohorts are
partitioned into tiers by that member and each tier reduces to a
cardinality-capped 0/1 knapsack explored as a subset tree with fractional
value bounds. Each search node IS a distinct candidate cohort, which keeps
the visited-node count at or below 2^(eligible clients).
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .device_model import ParetoFront, ParetoPoint

PLAN_CSV_HEADER = ("round", "client", "mode_id", "tau_s", "energy_j", "maxn_energy_j")

OBJECTIVE_SLACK = 1e-9


class SelectionInfeasibleError(RuntimeError):
    """No non-empty cohort fits the remaining budget; training must stop."""


class SolverDeadlineError(RuntimeError):
    """The solver exceeded its wall-clock deadline."""


@dataclass(frozen=True)
class ClientState:
    """One selectable client as the outer solver sees it."""

    client_id: int
    surrogate: float
    front: ParetoFront
    cooldown: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.surrogate):
            raise ValueError("surrogate must be finite")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")

    @property
    def maxn_time_s(self) -> float:
        return self.front.maxn.round_time_s

    @property
    def maxn_energy_j(self) -> float:
        return self.front.maxn.energy_j

    @property
    def eligible(self) -> bool:
        return self.cooldown == 0


@dataclass(frozen=True)
class SelectionProblem:
    """Inputs of one round's selection solve."""

    clients: Tuple[ClientState, ...]
    remaining_budget_j: float
    max_cohort: int
    alpha: float

    def __post_init__(self) -> None:
        if not self.clients:
            raise ValueError("need at least one client")
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        if not (self.remaining_budget_j >= 0):
            raise ValueError("remaining budget must be >= 0")
        if self.max_cohort < 1:
            raise ValueError("max cohort size must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def eligible(self) -> Tuple[ClientState, ...]:
        return tuple(c for c in self.clients if c.eligible)

    def client(self, client_id: int) -> ClientState:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(f"unknown client {client_id}")


@dataclass(frozen=True)
class SelectionPlan:
    """A solved round: cohort, per-client modes, and predictions."""

    cohort: Tuple[int, ...]
    modes: Mapping[int, ParetoPoint]
    maxn_energies: Mapping[int, float]
    predicted_time_s: float
    predicted_energy_j: float
    maxn_energy_j: float
    objective: float
    nodes_visited: int

    def __post_init__(self) -> None:
        if not self.cohort:
            raise ValueError("plan must select at least one client")
        if list(self.cohort) != sorted(set(self.cohort)):
            raise ValueError("cohort must be sorted and unique")
        if set(self.modes) != set(self.cohort) or set(self.maxn_energies) != set(
            self.cohort
        ):
            raise ValueError("exactly one mode per selected client")
        worst = max(p.round_time_s for p in self.modes.values())
        if worst > self.predicted_time_s:
            raise ValueError("assigned modes may not stretch the round")
        if self.predicted_energy_j > self.maxn_energy_j * (1 + 1e-12) + 1e-9:
            raise ValueError("assigned energy may not exceed the MAXN estimate")


def _objective(
    alpha: float,
    tier_time_s: float,
    time_scale_s: float,
    surrogates: Sequence[float],
) -> float:
    # canonical form shared with the enumeration oracle: surrogates are
    # summed in ascending client-id order so both routes round identically
    return alpha * (tier_time_s / time_scale_s) - (1.0 - alpha) * sum(surrogates)


def _candidate_key(
    problem: SelectionProblem,
    members: Sequence[ClientState],
    tier_time_s: float,
    time_scale_s: float,
) -> Tuple[float, float, float, Tuple[int, ...]]:
    """(objective, MAXN energy, time, ids): lexicographic min wins."""
    ordered = sorted(members, key=lambda c: c.client_id)
    objective = _objective(
        problem.alpha, tier_time_s, time_scale_s, [c.surrogate for c in ordered]
    )
    energy = sum(c.maxn_energy_j for c in ordered)
    return (objective, energy, tier_time_s, tuple(c.client_id for c in ordered))


def ilp_cs(
    problem: SelectionProblem, deadline_s: Optional[float] = None
) -> Tuple[int, ...]:
    """Exact cohort choice; see solve_selection for the full plan."""
    cohort, _, _ = _search(problem, deadline_s)
    return cohort


def _search(
    problem: SelectionProblem, deadline_s: Optional[float] = None
) -> Tuple[Tuple[int, ...], float, int]:
    """Tiered branch-and-bound over cohorts.

    Returns (cohort ids ascending, objective, nodes visited). Raises
    SelectionInfeasibleError when no single client fits the budget and
    SolverDeadlineError when deadline_s of wall time elapses.
    """
    eligible = problem.eligible
    if not eligible:
        raise SelectionInfeasibleError("no eligible clients")
    budget = problem.remaining_budget_j
    time_scale = max(c.maxn_time_s for c in eligible)
    # slack absorbs summation-order noise in the running energy total; the
    # canonical per-candidate check below stays exact
    budget_slack = 1e-9 * (1.0 + abs(budget))
    started = time.perf_counter()

    best_key: Optional[Tuple[float, float, float, Tuple[int, ...]]] = None
    nodes = 0

    # a cohort's tier head is its (time, id)-largest member, so tiers
    # partition the cohort space and fix T_hat within each subproblem
    by_time = sorted(eligible, key=lambda c: (c.maxn_time_s, c.client_id))
    for head_rank, head in enumerate(by_time):
        if deadline_s is not None and time.perf_counter() - started > deadline_s:
            raise SolverDeadlineError(f"selection exceeded {deadline_s} s")
        if head.maxn_energy_j > budget + budget_slack:
            continue
        tier_time = head.maxn_time_s
        tier_base = problem.alpha * (tier_time / time_scale)
        # value-dense first: members with surrogate <= 0 never help the
        # objective and always worsen the energy tie-break, so they are
        # not branched on (a lone head still covers the singleton case)
        pool = sorted(
            (c for c in by_time[:head_rank] if c.surrogate > 0.0),
            key=lambda c: (-c.surrogate / c.maxn_energy_j, c.client_id),
        )
        values = [c.surrogate for c in pool]
        energies = [c.maxn_energy_j for c in pool]

        def value_bound(start: int, capacity: float, slots: int) -> float:
            """Upper bound on extra surrogate value from pool[start:].

            Minimum of two relaxations: fractional knapsack ignoring the
            cardinality cap, and the top `slots` values ignoring capacity.
            """
            if slots <= 0 or capacity <= 0 or start >= len(pool):
                return 0.0
            by_capacity = 0.0
            left = capacity
            for j in range(start, len(pool)):
                if energies[j] <= left:
                    by_capacity += values[j]
                    left -= energies[j]
                else:
                    by_capacity += values[j] * (left / energies[j])
                    break
            by_count = sum(heapq.nlargest(slots, values[start:]))
            return min(by_capacity, by_count)

        stack: List[Tuple[int, Tuple[ClientState, ...], float, float]] = [
            (0, (head,), head.surrogate, head.maxn_energy_j)
        ]
        while stack:
            if deadline_s is not None and time.perf_counter() - started > deadline_s:
                raise SolverDeadlineError(f"selection exceeded {deadline_s} s")
            start, members, value, energy = stack.pop()
            nodes += 1
            key = _candidate_key(problem, members, tier_time, time_scale)
            if key[1] <= budget and (best_key is None or key < best_key):
                best_key = key
            if len(members) >= problem.max_cohort:
                continue
            for j in range(start, len(pool)):
                child_energy = energy + energies[j]
                if child_energy > budget + budget_slack:
                    continue
                if best_key is not None:
                    extra = value_bound(
                        j + 1,
                        budget - child_energy,
                        problem.max_cohort - len(members) - 1,
                    )
                    optimistic = tier_base - (1.0 - problem.alpha) * (
                        value + values[j] + extra
                    )
                    if optimistic > best_key[0] + OBJECTIVE_SLACK:
                        continue
                stack.append(
                    (j + 1, members + (pool[j],), value + values[j], child_energy)
                )

    if best_key is None:
        raise SelectionInfeasibleError(
            f"no non-empty cohort fits the remaining {budget} J"
        )
    return best_key[3], best_key[0], nodes


def ilp_pm(
    cohort: Iterable[int],
    paretos: Mapping[int, ParetoFront],
    round_time_s: float,
) -> Dict[int, ParetoPoint]:
    """Cheapest Pareto mode per client that fits the round.

    The objective separates across clients, so each one independently takes
    its lowest-energy point with time <= round_time_s. The cohort's slowest
    client only fits its own MAXN mode, so the realized round time equals
    the predicted one.
    """
    assignment: Dict[int, ParetoPoint] = {}
    for client in sorted(set(cohort)):
        front = paretos[client]
        if front.maxn.round_time_s > round_time_s:
            raise ValueError(
                f"client {client} cannot finish within {round_time_s} s even at MAXN"
            )
        assignment[client] = front.cheapest_within(round_time_s)
    return assignment


def solve_selection(
    problem: SelectionProblem, deadline_s: Optional[float] = None
) -> SelectionPlan:
    """Run both levels and assemble the round plan."""
    cohort, objective, nodes = _search(problem, deadline_s)
    states = {c: problem.client(c) for c in cohort}
    round_time = max(s.maxn_time_s for s in states.values())
    modes = ilp_pm(cohort, {c: s.front for c, s in states.items()}, round_time)
    predicted_energy = sum(modes[c].energy_j for c in cohort)
    maxn_energies = {c: states[c].maxn_energy_j for c in cohort}
    return SelectionPlan(
        cohort=cohort,
        modes=modes,
        maxn_energies=maxn_energies,
        predicted_time_s=round_time,
        predicted_energy_j=predicted_energy,
        maxn_energy_j=sum(maxn_energies[c] for c in cohort),
        objective=objective,
        nodes_visited=nodes,
    )


def cooldown_update(
    counters: Mapping[int, int],
    local_accuracy_pct: Mapping[int, float],
    rho: float,
) -> Dict[int, int]:
    """Advance cooldown counters after a round.

    Clients in local_accuracy_pct just participated and receive
    ceil(rho * accuracy) with accuracy on the 0-100 scale; every other
    positive counter drops by one. A client is eligible iff its counter
    is zero.
    """
    if rho < 0:
        raise ValueError("cooldown factor must be >= 0")
    updated: Dict[int, int] = {}
    for client, value in counters.items():
        if client not in local_accuracy_pct and value > 0:
            updated[client] = value - 1
        elif client not in local_accuracy_pct:
            updated[client] = 0
    for client, accuracy in local_accuracy_pct.items():
        if accuracy < 0:
            raise ValueError(f"accuracy of client {client} must be >= 0")
        updated[client] = math.ceil(rho * accuracy)
    return updated


def plan_csv_rows(round_index: int, plan: SelectionPlan) -> List[Tuple]:
    """Rows for the per-round plan dump, matching PLAN_CSV_HEADER."""
    return [
        (
            round_index,
            client,
            plan.modes[client].mode_id,
            plan.modes[client].round_time_s,
            plan.modes[client].energy_j,
            plan.maxn_energies[client],
        )
        for client in plan.cohort
    ]
