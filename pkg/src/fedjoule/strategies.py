"""Client-selection strategies behind a single orchestrator-facing
interface.

Every strategy answers three calls per round: a cheap feasibility
look-ahead, select (returning a full round plan with power modes), and
observe (folding the round's outcome into internal state). Baselines run
all selected clients at MAXN and ignore cooldown; the two budget-planner
variants run the bi-level solver for selection and downclocking, track
cooldown counters, and score contributions with exhaustive or
kernel-regression Shapley values evaluated on the validation coreset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .contribution import (
    CohortUtility,
    ShapleyLedger,
    exhaustive_shapley,
    kernel_shapley,
    normalize,
    sample_cohorts,
)
from .data_partition import LabeledDataset
from .device_model import ParetoFront
from .fl_core import ModelParams, ReferenceModel
from .selector import (
    ClientState,
    SelectionInfeasibleError,
    SelectionPlan,
    SelectionProblem,
    cooldown_update,
    solve_selection,
)

logger = logging.getLogger(__name__)

STRATEGY_NAMES = ("rnd", "exsh", "ksh", "escs", "fedj_ex", "fedj_k")


@dataclass(frozen=True)
class StrategyParams:
    """Hyperparameters shared across strategies; unused ones are ignored."""

    gamma: int
    alpha: float = 0.5
    rho: float = 0.05
    beta: float = 0.5
    cooldown_accuracy_scale: float = 100.0
    escs_loss_weight: float = 1.0
    escs_time_weight: float = 1.0
    exhaustive_cap: int = 12

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if self.cooldown_accuracy_scale <= 0:
            raise ValueError("cooldown accuracy scale must be > 0")


@dataclass(frozen=True)
class ClientView:
    """Static per-client facts a strategy may select on."""

    client_id: int
    front: ParetoFront


@dataclass(frozen=True)
class RoundContext:
    """Everything a strategy sees before committing to a cohort."""

    round_index: int
    clients: Tuple[ClientView, ...]
    remaining_budget_j: float
    rng: np.random.Generator


@dataclass(frozen=True)
class RoundOutcome:
    """A finished round, as reported back to the strategy."""

    round_index: int
    cohort: Tuple[int, ...]
    model: ReferenceModel
    base_params: ModelParams
    local_updates: Mapping[int, Tuple[ModelParams, int]]
    local_accuracies: Mapping[int, float]
    local_losses: Mapping[int, float]
    eval_coreset: LabeledDataset
    sampler_seed: int


def maxn_plan(fronts: Mapping[int, ParetoFront], cohort: Sequence[int]) -> SelectionPlan:
    """Plan that runs every selected client at its MAXN mode."""
    members = tuple(sorted(cohort))
    modes = {c: fronts[c].maxn for c in members}
    energies = {c: modes[c].energy_j for c in members}
    return SelectionPlan(
        cohort=members,
        modes=modes,
        maxn_energies=energies,
        predicted_time_s=max(m.round_time_s for m in modes.values()),
        predicted_energy_j=sum(energies[c] for c in members),
        maxn_energy_j=sum(energies[c] for c in members),
        objective=0.0,
        nodes_visited=0,
    )


def _fit_walk(
    ordered: Sequence[ClientView], budget_j: float, gamma: int
) -> Tuple[int, ...]:
    """Greedy budget-aware take: walk the order, keep clients whose MAXN
    energy still fits, stop at gamma."""
    picked = []
    spent = 0.0
    for view in ordered:
        if len(picked) >= gamma:
            break
        cost = view.front.maxn.energy_j
        if spent + cost <= budget_j:
            picked.append(view.client_id)
            spent += cost
    return tuple(picked)


class Strategy:
    """Base round-loop contract; subclasses own their selection policy."""

    name = "base"
    uses_cooldown = False

    def __init__(self, params: StrategyParams) -> None:
        self.params = params
        self.ledger = ShapleyLedger(decay=params.beta)
        self.cooldowns: Dict[int, int] = {}

    def eligible(self, ctx: RoundContext) -> Tuple[ClientView, ...]:
        return tuple(
            v for v in ctx.clients if self.cooldowns.get(v.client_id, 0) == 0
        )

    def lookahead_feasible(self, ctx: RoundContext) -> bool:
        """Cheap stop test: can any eligible client fit the remaining
        budget even at its lowest-energy mode?"""
        candidates = self.eligible(ctx)
        if not candidates:
            return False
        cheapest = min(v.front.min_energy.energy_j for v in candidates)
        return cheapest <= ctx.remaining_budget_j

    def idle_tick(self) -> None:
        """A round passed with no cohort; cooling clients recover one step.

        Keeps the loop alive when every client is cooling down at once
        (small clusters with large gamma hit this), without letting any
        client back in before its counter reaches zero.
        """
        for client_id, count in self.cooldowns.items():
            if count > 0:
                self.cooldowns[client_id] = count - 1

    def select(self, ctx: RoundContext) -> SelectionPlan:
        raise NotImplementedError

    def observe(self, outcome: RoundOutcome) -> None:
        return None

    def _require_cohort(self, cohort: Tuple[int, ...], ctx: RoundContext) -> None:
        if not cohort:
            raise SelectionInfeasibleError(
                f"no client fits the remaining {ctx.remaining_budget_j} J"
            )


class RandomStrategy(Strategy):
    """Uniform sampling without replacement, everyone at MAXN."""

    name = "rnd"

    def select(self, ctx: RoundContext) -> SelectionPlan:
        candidates = sorted(self.eligible(ctx), key=lambda v: v.client_id)
        order = [candidates[i] for i in ctx.rng.permutation(len(candidates))]
        cohort = _fit_walk(order, ctx.remaining_budget_j, self.params.gamma)
        self._require_cohort(cohort, ctx)
        return maxn_plan({v.client_id: v.front for v in candidates}, cohort)


class ShapleyWeightedStrategy(Strategy):
    """Sampling proportional to surrogate contribution scores, at MAXN.

    Clients start at weight 1, so round 1 is uniform. After each round the
    cohort's Shapley values (exhaustive or kernel, per subclass) are
    normalized and folded into the surrogate weights.
    """

    def _weights(self, candidates: Sequence[ClientView]) -> np.ndarray:
        weights = np.array(
            [self.ledger.surrogate(v.client_id) for v in candidates], dtype=np.float64
        )
        if (weights < 0).any():
            raise ValueError("sampling weights must be >= 0")
        if weights.sum() == 0:
            logger.warning(
                "%s: all surrogate weights are zero; falling back to uniform",
                self.name,
            )
            weights = np.ones_like(weights)
        return weights

    def select(self, ctx: RoundContext) -> SelectionPlan:
        candidates = sorted(self.eligible(ctx), key=lambda v: v.client_id)
        weights = self._weights(candidates)
        pool = list(range(len(candidates)))
        picked = []
        spent = 0.0
        while pool and len(picked) < self.params.gamma:
            probs = weights[pool] / weights[pool].sum()
            choice = pool[int(ctx.rng.choice(len(pool), p=probs))]
            pool.remove(choice)
            cost = candidates[choice].front.maxn.energy_j
            if spent + cost <= ctx.remaining_budget_j:
                picked.append(candidates[choice].client_id)
                spent += cost
        cohort = tuple(sorted(picked))
        self._require_cohort(cohort, ctx)
        return maxn_plan({v.client_id: v.front for v in candidates}, cohort)

    def _raw_values(self, outcome: RoundOutcome, utility: CohortUtility) -> Dict[int, float]:
        raise NotImplementedError

    def observe(self, outcome: RoundOutcome) -> None:
        utility = CohortUtility(
            outcome.model,
            outcome.base_params,
            {c: outcome.local_updates[c] for c in outcome.cohort},
            outcome.eval_coreset,
        )
        raw = self._raw_values(outcome, utility)
        surrogate_next = normalize(raw)
        self.ledger.update(outcome.round_index, raw, surrogate_next, outcome.cohort)


class ExhaustiveShapleyStrategy(ShapleyWeightedStrategy):
    name = "exsh"

    def _raw_values(self, outcome: RoundOutcome, utility: CohortUtility) -> Dict[int, float]:
        return exhaustive_shapley(utility, outcome.cohort, self.params.exhaustive_cap)


class KernelShapleyStrategy(ShapleyWeightedStrategy):
    name = "ksh"

    def _raw_values(self, outcome: RoundOutcome, utility: CohortUtility) -> Dict[int, float]:
        samples = sample_cohorts(outcome.cohort, outcome.sampler_seed)
        return kernel_shapley(utility, outcome.cohort, samples)


class EscsStrategy(Strategy):
    """Loss-and-speed ranking: round 1 trains everyone, later rounds take
    the top gamma by normalized last-known loss minus normalized MAXN
    time. Deterministic given (losses, times)."""

    name = "escs"

    def __init__(self, params: StrategyParams) -> None:
        super().__init__(params)
        self.last_losses: Dict[int, float] = {}

    def select(self, ctx: RoundContext) -> SelectionPlan:
        candidates = sorted(self.eligible(ctx), key=lambda v: v.client_id)
        fronts = {v.client_id: v.front for v in candidates}
        if ctx.round_index == 1:
            # bootstrap round trains every client; shed the most expensive
            # ones if the budget cannot carry the whole cluster
            members = list(candidates)
            while members and sum(v.front.maxn.energy_j for v in members) > ctx.remaining_budget_j:
                members.remove(
                    max(members, key=lambda v: (v.front.maxn.energy_j, v.client_id))
                )
            cohort = tuple(v.client_id for v in members)
            self._require_cohort(cohort, ctx)
            return maxn_plan(fronts, cohort)
        missing = [v.client_id for v in candidates if v.client_id not in self.last_losses]
        if missing:
            raise ValueError(f"no recorded loss for clients {missing}")
        max_loss = max(self.last_losses[v.client_id] for v in candidates)
        max_time = max(v.front.maxn.round_time_s for v in candidates)

        def utility(view: ClientView) -> float:
            loss_term = (
                self.last_losses[view.client_id] / max_loss if max_loss > 0 else 0.0
            )
            time_term = view.front.maxn.round_time_s / max_time
            return (
                self.params.escs_loss_weight * loss_term
                - self.params.escs_time_weight * time_term
            )

        ranked = sorted(candidates, key=lambda v: (-utility(v), v.client_id))
        cohort = _fit_walk(ranked, ctx.remaining_budget_j, self.params.gamma)
        self._require_cohort(cohort, ctx)
        return maxn_plan(fronts, tuple(sorted(cohort)))

    def observe(self, outcome: RoundOutcome) -> None:
        self.last_losses.update(outcome.local_losses)


class BudgetPlannerStrategy(Strategy):
    """Bi-level selection with downclocking, cooldown, and Shapley-driven
    surrogate scores evaluated on the validation coreset."""

    uses_cooldown = True

    def select(self, ctx: RoundContext) -> SelectionPlan:
        states = tuple(
            ClientState(
                client_id=v.client_id,
                surrogate=self.ledger.surrogate(v.client_id),
                front=v.front,
                cooldown=self.cooldowns.get(v.client_id, 0),
            )
            for v in sorted(ctx.clients, key=lambda v: v.client_id)
        )
        problem = SelectionProblem(
            clients=states,
            remaining_budget_j=ctx.remaining_budget_j,
            max_cohort=self.params.gamma,
            alpha=self.params.alpha,
        )
        return solve_selection(problem)

    def _raw_values(self, outcome: RoundOutcome, utility: CohortUtility) -> Dict[int, float]:
        raise NotImplementedError

    def observe(self, outcome: RoundOutcome) -> None:
        utility = CohortUtility(
            outcome.model,
            outcome.base_params,
            {c: outcome.local_updates[c] for c in outcome.cohort},
            outcome.eval_coreset,
        )
        raw = self._raw_values(outcome, utility)
        surrogate_next = normalize(raw)
        self.ledger.update(outcome.round_index, raw, surrogate_next, outcome.cohort)
        scale = self.params.cooldown_accuracy_scale
        accuracies_pct = {
            c: outcome.local_accuracies[c] * scale for c in outcome.cohort
        }
        self.cooldowns = cooldown_update(self.cooldowns, accuracies_pct, self.params.rho)


class BudgetPlannerExhaustive(BudgetPlannerStrategy):
    name = "fedj_ex"

    def _raw_values(self, outcome: RoundOutcome, utility: CohortUtility) -> Dict[int, float]:
        return exhaustive_shapley(utility, outcome.cohort, self.params.exhaustive_cap)


class BudgetPlannerKernel(BudgetPlannerStrategy):
    name = "fedj_k"

    def _raw_values(self, outcome: RoundOutcome, utility: CohortUtility) -> Dict[int, float]:
        samples = sample_cohorts(outcome.cohort, outcome.sampler_seed)
        return kernel_shapley(utility, outcome.cohort, samples)


_REGISTRY = {
    "rnd": RandomStrategy,
    "exsh": ExhaustiveShapleyStrategy,
    "ksh": KernelShapleyStrategy,
    "escs": EscsStrategy,
    "fedj_ex": BudgetPlannerExhaustive,
    "fedj_k": BudgetPlannerKernel,
}


def make_strategy(name: str, params: StrategyParams) -> Strategy:
    """Instantiate a strategy by its config key."""
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown strategy {name!r}; choose one of {', '.join(STRATEGY_NAMES)}"
        ) from None
    return cls(params)
