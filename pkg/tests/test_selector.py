"""Tests for the bi-level round planner.

The central oracle is a full two-stage enumeration: every cohort up to the
size cap is scored with the same canonical objective expression (so float
rounding matches bit for bit), and mode assignments are brute-forced over
the cross product of every selected client's Pareto points.
"""

import itertools
import math

import numpy as np
import pytest

from fedjoule.device_model import ParetoFront, ParetoPoint
from fedjoule.selector import (
    PLAN_CSV_HEADER,
    ClientState,
    SelectionInfeasibleError,
    SelectionPlan,
    SelectionProblem,
    SolverDeadlineError,
    cooldown_update,
    ilp_cs,
    ilp_pm,
    plan_csv_rows,
    solve_selection,
)


def single_mode(client_id, surrogate, tau, energy, cooldown=0):
    front = ParetoFront((ParetoPoint("m0", tau, energy),))
    return ClientState(client_id, surrogate, front, cooldown)


def random_front(rng, max_modes=6):
    m = int(rng.integers(1, max_modes + 1))
    times = np.cumsum(rng.uniform(0.5, 8.0, size=m)) + rng.uniform(1.0, 4.0)
    energies = np.cumsum(rng.uniform(5.0, 60.0, size=m))[::-1] + rng.uniform(5.0, 20.0)
    points = tuple(
        ParetoPoint(f"m{j}", float(times[j]), float(energies[j])) for j in range(m)
    )
    return ParetoFront(points)


def random_problem(rng, max_clients=4, max_modes=6, with_cooldowns=False):
    n = int(rng.integers(1, max_clients + 1))
    clients = []
    for i in range(n):
        cooldown = int(rng.integers(0, 3)) if with_cooldowns and rng.random() < 0.3 else 0
        clients.append(
            ClientState(i + 1, float(rng.uniform(0.0, 1.0)), random_front(rng, max_modes), cooldown)
        )
    total = sum(c.maxn_energy_j for c in clients)
    budget = float(rng.uniform(0.2, 1.3)) * total
    gamma = int(rng.integers(1, n + 1))
    alpha = float(rng.uniform(0.0, 1.0))
    return SelectionProblem(tuple(clients), budget, gamma, alpha)


def enumerate_cohort(problem):
    """Stage-1 oracle: best (objective, energy, time, ids) over all cohorts."""
    eligible = [c for c in problem.clients if c.cooldown == 0]
    if not eligible:
        return None
    time_scale = max(c.maxn_time_s for c in eligible)
    eligible = sorted(eligible, key=lambda c: c.client_id)
    best = None
    for r in range(1, problem.max_cohort + 1):
        for combo in itertools.combinations(eligible, r):
            energy = sum(c.maxn_energy_j for c in combo)
            if energy > problem.remaining_budget_j:
                continue
            t = max(c.maxn_time_s for c in combo)
            objective = problem.alpha * (t / time_scale) - (
                1.0 - problem.alpha
            ) * sum(c.surrogate for c in combo)
            key = (objective, energy, t, tuple(c.client_id for c in combo))
            if best is None or key < best:
                best = key
    return best


def enumerate_modes(fronts, round_time):
    """Stage-2 oracle: cheapest joint assignment over the full product."""
    clients = sorted(fronts)
    best = None
    for combo in itertools.product(*(fronts[c].points for c in clients)):
        if any(p.round_time_s > round_time for p in combo):
            continue
        total = sum(p.energy_j for p in combo)
        if best is None or total < best[0]:
            best = (total, {c: p for c, p in zip(clients, combo)})
    return best[1]


WORKED_CLIENTS = (
    single_mode(1, 1.0, 10.0, 100.0),
    single_mode(2, 0.6, 5.0, 50.0),
    single_mode(3, 0.2, 5.0, 50.0),
)


class TestCohortSelection:
    def test_worked_example(self):
        problem = SelectionProblem(WORKED_CLIENTS, 120.0, 2, 0.5)
        plan = solve_selection(problem)
        assert plan.cohort == (2, 3)
        assert plan.objective == pytest.approx(-0.15, abs=1e-12)

    def test_alpha_zero_takes_top_values_within_budget(self):
        problem = SelectionProblem(WORKED_CLIENTS, 120.0, 2, 0.0)
        # pure value: {1} gives 1.0 but {1, 2} busts the budget; {2, 3}
        # fits and sums 0.8 < 1.0, so the lone top client loses to nothing
        assert ilp_cs(problem) == (1,)
        roomy = SelectionProblem(WORKED_CLIENTS, 220.0, 3, 0.0)
        assert ilp_cs(roomy) == (1, 2, 3)

    def test_budget_below_every_client_is_infeasible(self):
        problem = SelectionProblem(WORKED_CLIENTS, 40.0, 2, 0.5)
        with pytest.raises(SelectionInfeasibleError):
            ilp_cs(problem)

    def test_exact_budget_boundary_is_feasible(self):
        problem = SelectionProblem(WORKED_CLIENTS, 100.0, 2, 0.5)
        plan = solve_selection(problem)
        assert plan.maxn_energy_j <= 100.0

    def test_cooled_down_clients_are_excluded(self):
        clients = (
            single_mode(1, 1.0, 10.0, 100.0, cooldown=2),
            single_mode(2, 0.6, 5.0, 50.0),
            single_mode(3, 0.2, 5.0, 50.0),
        )
        problem = SelectionProblem(clients, 1000.0, 3, 0.0)
        assert ilp_cs(problem) == (2, 3)

    def test_no_eligible_clients_is_infeasible(self):
        clients = (single_mode(1, 1.0, 10.0, 100.0, cooldown=1),)
        with pytest.raises(SelectionInfeasibleError):
            ilp_cs(SelectionProblem(clients, 1000.0, 1, 0.5))

    def test_tie_breaks_prefer_lower_energy_then_ids(self):
        # both singletons score the same objective; client 2 burns less
        clients = (
            single_mode(1, 0.5, 10.0, 100.0),
            single_mode(2, 0.5, 10.0, 80.0),
        )
        assert ilp_cs(SelectionProblem(clients, 500.0, 1, 0.0)) == (2,)
        # identical clients: lexicographic id wins
        clients = (
            single_mode(4, 0.5, 10.0, 80.0),
            single_mode(2, 0.5, 10.0, 80.0),
        )
        assert ilp_cs(SelectionProblem(clients, 500.0, 1, 0.0)) == (2,)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(73)
        checked = 0
        for trial in range(200):
            problem = random_problem(rng, with_cooldowns=(trial % 3 == 0))
            expected = enumerate_cohort(problem)
            if expected is None:
                with pytest.raises(SelectionInfeasibleError):
                    ilp_cs(problem)
                continue
            plan = solve_selection(problem)
            assert plan.cohort == expected[3]
            assert plan.objective == expected[0]
            assert plan.maxn_energy_j == expected[1]
            fronts = {c: problem.client(c).front for c in plan.cohort}
            oracle_modes = enumerate_modes(fronts, plan.predicted_time_s)
            assert {c: p.mode_id for c, p in plan.modes.items()} == {
                c: p.mode_id for c, p in oracle_modes.items()
            }
            checked += 1
        assert checked >= 120

    def test_constant_value_shift_preserves_order_within_time_tiers(self):
        rng = np.random.default_rng(5)
        clients = tuple(
            single_mode(i + 1, float(rng.uniform(0, 1)), float(t), float(rng.uniform(40, 120)))
            for i, t in enumerate([10.0, 10.0, 10.0, 10.0])
        )
        problem = SelectionProblem(clients, 1e9, 4, 0.4)
        shifted = SelectionProblem(
            tuple(
                ClientState(c.client_id, c.surrogate + 0.37, c.front)
                for c in clients
            ),
            1e9,
            4,
            0.4,
        )

        def ranking(prob):
            elig = sorted(prob.clients, key=lambda c: c.client_id)
            scale = max(c.maxn_time_s for c in elig)
            keyed = []
            for r in range(1, 5):
                for combo in itertools.combinations(elig, r):
                    t = max(c.maxn_time_s for c in combo)
                    obj = prob.alpha * (t / scale) - (1 - prob.alpha) * sum(
                        c.surrogate for c in combo
                    )
                    keyed.append(((len(combo), t), obj, tuple(c.client_id for c in combo)))
            order = {}
            for group in {k for k, _, _ in keyed}:
                members = sorted(
                    (obj, ids) for k, obj, ids in keyed if k == group
                )
                order[group] = [ids for _, ids in members]
            return order

        assert ranking(problem) == ranking(shifted)

    def test_node_counter_bounded_by_subset_count(self):
        rng = np.random.default_rng(11)
        for trial in range(30):
            problem = random_problem(rng, max_clients=8)
            try:
                plan = solve_selection(problem)
            except SelectionInfeasibleError:
                continue
            assert 1 <= plan.nodes_visited <= 2 ** len(problem.eligible)

    def test_deadline_raises(self):
        clients = tuple(
            single_mode(i, 0.5 + 1e-6 * i, 10.0 + i * 1e-9, 50.0) for i in range(40)
        )
        problem = SelectionProblem(clients, 50.0 * 40, 20, 0.5)
        with pytest.raises(SolverDeadlineError):
            solve_selection(problem, deadline_s=0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(17)
        problem = random_problem(rng, max_clients=4)
        first = solve_selection(problem)
        second = solve_selection(problem)
        assert first == second


class TestModeAssignment:
    def test_worked_example(self):
        front = ParetoFront(
            (
                ParetoPoint("fast", 6.0, 120.0),
                ParetoPoint("mid", 9.0, 90.0),
                ParetoPoint("slow", 12.0, 60.0),
            )
        )
        modes = ilp_pm([1], {1: front}, round_time_s=10.0)
        assert modes[1] == ParetoPoint("mid", 9.0, 90.0)

    def test_forced_maxn_when_nothing_else_fits(self):
        front = ParetoFront(
            (ParetoPoint("fast", 6.0, 120.0), ParetoPoint("slow", 12.0, 60.0))
        )
        modes = ilp_pm([1], {1: front}, round_time_s=6.0)
        assert modes[1].mode_id == "fast"

    def test_slowest_client_lands_on_maxn(self):
        rng = np.random.default_rng(23)
        for trial in range(30):
            fronts = {i: random_front(rng) for i in range(4)}
            round_time = max(f.maxn.round_time_s for f in fronts.values())
            slowest = max(fronts, key=lambda c: fronts[c].maxn.round_time_s)
            modes = ilp_pm(fronts, fronts, round_time)
            assert modes[slowest] == fronts[slowest].maxn
            assert all(p.round_time_s <= round_time for p in modes.values())

    def test_matches_product_enumeration(self):
        rng = np.random.default_rng(29)
        for trial in range(40):
            fronts = {i: random_front(rng, max_modes=5) for i in range(3)}
            round_time = max(f.maxn.round_time_s for f in fronts.values())
            modes = ilp_pm(fronts, fronts, round_time)
            oracle = enumerate_modes(fronts, round_time)
            assert modes == oracle

    def test_energy_never_exceeds_maxn_total(self):
        rng = np.random.default_rng(31)
        for trial in range(30):
            fronts = {i: random_front(rng) for i in range(5)}
            round_time = max(f.maxn.round_time_s for f in fronts.values())
            modes = ilp_pm(fronts, fronts, round_time)
            assigned = sum(p.energy_j for p in modes.values())
            maxn = sum(f.maxn.energy_j for f in fronts.values())
            assert assigned <= maxn + 1e-9

    def test_round_time_below_maxn_rejected(self):
        front = ParetoFront((ParetoPoint("m0", 10.0, 100.0),))
        with pytest.raises(ValueError, match="client 1"):
            ilp_pm([1], {1: front}, round_time_s=5.0)


class TestSolvePlan:
    def test_realized_time_equals_prediction(self):
        rng = np.random.default_rng(37)
        for trial in range(25):
            problem = random_problem(rng)
            try:
                plan = solve_selection(problem)
            except SelectionInfeasibleError:
                continue
            worst = max(p.round_time_s for p in plan.modes.values())
            assert worst == plan.predicted_time_s
            assert plan.predicted_energy_j <= plan.maxn_energy_j + 1e-9
            assert plan.maxn_energy_j <= problem.remaining_budget_j

    def test_plan_validation(self):
        point = ParetoPoint("m0", 5.0, 50.0)
        with pytest.raises(ValueError, match="at least one"):
            SelectionPlan((), {}, {}, 5.0, 50.0, 50.0, 0.0, 1)
        with pytest.raises(ValueError, match="sorted"):
            SelectionPlan((2, 1), {1: point, 2: point}, {1: 50.0, 2: 50.0}, 5.0, 100.0, 100.0, 0.0, 1)
        with pytest.raises(ValueError, match="one mode"):
            SelectionPlan((1, 2), {1: point}, {1: 50.0, 2: 50.0}, 5.0, 100.0, 100.0, 0.0, 1)
        with pytest.raises(ValueError, match="stretch"):
            SelectionPlan((1,), {1: point}, {1: 50.0}, 4.0, 50.0, 50.0, 0.0, 1)
        with pytest.raises(ValueError, match="MAXN"):
            SelectionPlan((1,), {1: point}, {1: 40.0}, 5.0, 50.0, 40.0, 0.0, 1)

    def test_plan_csv_rows(self):
        problem = SelectionProblem(WORKED_CLIENTS, 120.0, 2, 0.5)
        plan = solve_selection(problem)
        rows = plan_csv_rows(7, plan)
        assert PLAN_CSV_HEADER == ("round", "client", "mode_id", "tau_s", "energy_j", "maxn_energy_j")
        assert rows == [
            (7, 2, "m0", 5.0, 50.0, 50.0),
            (7, 3, "m0", 5.0, 50.0, 50.0),
        ]


class TestCooldown:
    def test_ceiling_example(self):
        out = cooldown_update({}, {1: 80.0}, rho=0.05)
        assert out == {1: 4}

    def test_zero_rho_disables_cooldown(self):
        out = cooldown_update({}, {1: 93.0, 2: 12.0}, rho=0.0)
        assert out == {1: 0, 2: 0}

    def test_decrement_and_eligibility_window(self):
        counters = cooldown_update({1: 0, 2: 0}, {1: 55.0}, rho=0.05)
        assert counters == {1: 3, 2: 0}
        # rounds r+1 .. r+3: client 1 stays out and counts down
        for expected in (2, 1, 0):
            counters = cooldown_update(counters, {2: 50.0}, rho=0.0)
            assert counters == {1: expected, 2: 0}
        # the counter reaching zero means eligibility at round r+4

    def test_validation(self):
        with pytest.raises(ValueError):
            cooldown_update({}, {1: 50.0}, rho=-0.1)
        with pytest.raises(ValueError, match="client 1"):
            cooldown_update({}, {1: -5.0}, rho=0.1)


class TestProblemValidation:
    def test_field_validation(self):
        client = single_mode(1, 0.5, 10.0, 100.0)
        with pytest.raises(ValueError):
            SelectionProblem((), 100.0, 1, 0.5)
        with pytest.raises(ValueError, match="unique"):
            SelectionProblem((client, client), 100.0, 1, 0.5)
        with pytest.raises(ValueError, match="budget"):
            SelectionProblem((client,), -1.0, 1, 0.5)
        with pytest.raises(ValueError, match="cohort"):
            SelectionProblem((client,), 100.0, 0, 0.5)
        with pytest.raises(ValueError, match="alpha"):
            SelectionProblem((client,), 100.0, 1, 1.5)
        with pytest.raises(ValueError, match="cooldown"):
            single_mode(1, 0.5, 10.0, 100.0, cooldown=-1)
        with pytest.raises(ValueError, match="finite"):
            single_mode(1, float("nan"), 10.0, 100.0)

    def test_client_lookup(self):
        problem = SelectionProblem(WORKED_CLIENTS, 120.0, 2, 0.5)
        assert problem.client(2).surrogate == 0.6
        with pytest.raises(KeyError):
            problem.client(9)
