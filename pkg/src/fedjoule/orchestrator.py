"""Experiment harness: the round loop, energy accounting, metrics and plot
emission, and the selection-scalability benchmark.

A run wires together synthetic device profiles, a non-IID partition of a
synthetic dataset, a reference model, and one selection strategy, then
loops rounds until the energy budget cannot cover another round. Device
time and energy come from the traced power-mode profiles scaled by each
client's partition size; Shapley and solver overhead is measured as wall
time and reported separately from the simulated clock.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .contribution import build_coreset
from .data_partition import (
    LabeledDataset,
    PartitionAssignment,
    dirichlet_partition,
    shard_partition,
    synthesize_dataset,
)
from .device_model import (
    DEFAULT_DEVICE_CLASSES,
    ParetoFront,
    ParetoPoint,
    extract_pareto,
    synthesize_profiles,
)
from .fl_core import ReferenceModel, TrainConfig, fedavg_aggregate
from .selector import (
    ClientState,
    SelectionInfeasibleError,
    SelectionProblem,
    SolverDeadlineError,
    solve_selection,
)
from .strategies import (
    ClientView,
    RoundContext,
    RoundOutcome,
    Strategy,
    StrategyParams,
    make_strategy,
)

METRICS_HEADER = (
    "round",
    "cohort",
    "round_time_s",
    "round_energy_j",
    "cum_energy_j",
    "global_acc",
    "selection_wall_ms",
)

TTA_UNREACHED = "unreached"

MIN_SCALE = 0.1

# seed-derivation tags keeping per-round streams independent
_SELECT_TAG = 101
_SAMPLER_TAG = 202
_TRAIN_TAG = 303


class BudgetViolationError(RuntimeError):
    """A charge would push cumulative energy past the budget."""


class MetricsParseError(ValueError):
    """A metrics CSV does not follow the expected schema."""


@dataclass
class EnergyLedger:
    """Hard-invariant energy account: cumulative spend never exceeds the
    budget and only moves up."""

    budget_j: float
    spent_j: float = 0.0
    per_round_j: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (self.budget_j > 0):
            raise ValueError("budget must be > 0")

    @property
    def remaining_j(self) -> float:
        return self.budget_j - self.spent_j

    def charge(self, amount_j: float) -> None:
        if amount_j <= 0:
            raise ValueError("round energy must be > 0")
        if self.spent_j + amount_j > self.budget_j:
            raise BudgetViolationError(
                f"charge of {amount_j} J exceeds remaining {self.remaining_j} J"
            )
        self.spent_j += amount_j
        self.per_round_j.append(amount_j)


@dataclass(frozen=True)
class RoundRecord:
    """One completed (or rejected) round.

    selection_wall_ms covers the strategy's select and observe calls, i.e.
    solver plus contribution-scoring overhead; the simulated device time
    lives in realized_time_s.
    """

    round_index: int
    cohort: Tuple[int, ...]
    mode_ids: Mapping[int, str]
    predicted_time_s: float
    realized_time_s: float
    round_energy_j: float
    cum_energy_j: float
    global_acc: float
    selection_wall_ms: float
    rejected: bool = False


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    records: Tuple[RoundRecord, ...]
    stop_reason: str
    final_accuracy: float


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _build_model(cfg: ExperimentConfig) -> ReferenceModel:
    w = cfg.workload
    if w.model == "logistic":
        return ReferenceModel.logistic(dim=w.dim, classes=w.classes)
    return ReferenceModel.mlp(dim=w.dim, classes=w.classes, hidden=w.hidden)


def _client_fronts(cfg: ExperimentConfig) -> Dict[int, ParetoFront]:
    """Unscaled per-client fronts; clients are numbered by sorted device
    class so the mapping is stable for a given cluster composition."""
    wanted = sorted(name for name, count in cfg.cluster.items() if count > 0)
    by_name = {spec.name: spec for spec in DEFAULT_DEVICE_CLASSES}
    profiles = synthesize_profiles(
        [by_name[name] for name in wanted],
        workload=cfg.workload.name,
        seed=cfg.master_seed,
        time_noise=cfg.profiles.time_noise,
        power_noise=cfg.profiles.power_noise,
    )
    fronts: Dict[int, ParetoFront] = {}
    client = 0
    for name in wanted:
        front = extract_pareto(profiles[(name, cfg.workload.name)])
        for _ in range(cfg.cluster[name]):
            fronts[client] = front
            client += 1
    return fronts


def _partition(cfg: ExperimentConfig, train: LabeledDataset) -> PartitionAssignment:
    seed = _derive_seed(cfg.master_seed, 7)
    if cfg.partition.kind == "shard":
        return shard_partition(
            train, cfg.client_count, cfg.partition.labels_per_client, seed
        )
    return dirichlet_partition(
        train, cfg.client_count, cfg.partition.dirichlet_alpha, seed
    )


def prepare_clients(
    cfg: ExperimentConfig,
) -> Tuple[Dict[int, LabeledDataset], Dict[int, ParetoFront], LabeledDataset]:
    """Materialize partitions, size-scaled fronts, and the validation set.

    Train and validation come from a single synthesis so they share class
    centers; a client's time and energy scale linearly with its partition
    size relative to the even split, floored at MIN_SCALE.
    """
    w = cfg.workload
    total = w.train_samples + w.val_samples
    data = synthesize_dataset(
        classes=w.classes,
        dim=w.dim,
        samples=total,
        class_separation=w.class_separation,
        seed=_derive_seed(cfg.master_seed, 3),
        noise_sigma=w.noise_sigma,
    )
    train = data.subset(np.arange(w.train_samples))
    validation = data.subset(np.arange(w.train_samples, total))
    partition = _partition(cfg, train)
    datasets = {
        c: train.subset(partition.client_indices(c)) for c in range(cfg.client_count)
    }
    reference = w.train_samples / cfg.client_count
    fronts = _client_fronts(cfg)
    scaled = {
        c: fronts[c].scaled(max(len(datasets[c]) / reference, MIN_SCALE))
        for c in fronts
    }
    return datasets, scaled, validation


def run_experiment(
    cfg: ExperimentConfig, strategy: Optional[Strategy] = None
) -> ExperimentResult:
    """Run rounds until the budget, an infeasible selection, or a budget
    violation stops the experiment.

    The number of rounds is an outcome, not an input. `strategy` overrides
    the configured one (the budget-violation path is tested by injecting a
    deliberately over-spending strategy here).
    """
    datasets, fronts, validation = prepare_clients(cfg)
    coreset = build_coreset(validation, cfg.coreset.ratio, cfg.coreset.min_per_class)
    model = _build_model(cfg)
    global_params = model.init_params(seed=_derive_seed(cfg.master_seed, 5))
    if strategy is None:
        strategy = make_strategy(
            cfg.strategy.name,
            StrategyParams(
                gamma=cfg.strategy.gamma,
                alpha=cfg.strategy.alpha,
                rho=cfg.strategy.rho,
                beta=cfg.strategy.beta,
                cooldown_accuracy_scale=cfg.strategy.cooldown_accuracy_scale,
                escs_loss_weight=cfg.strategy.escs_loss_weight,
                escs_time_weight=cfg.strategy.escs_time_weight,
            ),
        )
    views = tuple(ClientView(c, fronts[c]) for c in sorted(fronts))
    ledger = EnergyLedger(budget_j=cfg.budget_j)
    records: List[RoundRecord] = []
    accuracy = model.evaluate(global_params, validation).accuracy
    stop_reason = "budget_exhausted"
    round_index = 0

    while True:
        round_index += 1
        ctx = RoundContext(
            round_index=round_index,
            clients=views,
            remaining_budget_j=ledger.remaining_j,
            rng=np.random.default_rng(
                _derive_seed(cfg.master_seed, round_index, _SELECT_TAG)
            ),
        )
        if not strategy.eligible(ctx):
            # every client is cooling down; let the round pass idle rather
            # than terminating with budget still unspent
            if any(count > 0 for count in strategy.cooldowns.values()):
                strategy.idle_tick()
                continue
            stop_reason = "no_clients"
            break
        if not strategy.lookahead_feasible(ctx):
            break
        select_start = time.perf_counter()
        try:
            plan = strategy.select(ctx)
        except SelectionInfeasibleError:
            stop_reason = "selection_infeasible"
            break
        select_ms = (time.perf_counter() - select_start) * 1e3
        if plan.maxn_energy_j > ledger.remaining_j:
            records.append(
                RoundRecord(
                    round_index=round_index,
                    cohort=plan.cohort,
                    mode_ids={c: plan.modes[c].mode_id for c in plan.cohort},
                    predicted_time_s=plan.predicted_time_s,
                    realized_time_s=0.0,
                    round_energy_j=0.0,
                    cum_energy_j=ledger.spent_j,
                    global_acc=accuracy,
                    selection_wall_ms=select_ms,
                    rejected=True,
                )
            )
            stop_reason = "budget_violation"
            break

        updates: Dict[int, Tuple[np.ndarray, int]] = {}
        local_accuracies: Dict[int, float] = {}
        local_losses: Dict[int, float] = {}
        for client in plan.cohort:
            local = datasets[client]
            trained = model.local_train(
                global_params,
                local,
                TrainConfig(
                    epochs=cfg.training.epochs,
                    lr=cfg.training.lr,
                    batch_size=cfg.training.batch_size,
                    seed=_derive_seed(cfg.master_seed, round_index, _TRAIN_TAG, client),
                ),
            )
            updates[client] = (trained, len(local))
            fit = model.evaluate(trained, local)
            local_accuracies[client] = fit.accuracy
            local_losses[client] = fit.loss
        base_params = global_params
        global_params = fedavg_aggregate([updates[c] for c in plan.cohort])
        accuracy = model.evaluate(global_params, validation).accuracy

        realized_time = max(plan.modes[c].round_time_s for c in plan.cohort)
        realized_energy = sum(plan.modes[c].energy_j for c in plan.cohort)
        ledger.charge(realized_energy)

        outcome = RoundOutcome(
            round_index=round_index,
            cohort=plan.cohort,
            model=model,
            base_params=base_params,
            local_updates=updates,
            local_accuracies=local_accuracies,
            local_losses=local_losses,
            eval_coreset=coreset,
            sampler_seed=_derive_seed(cfg.master_seed, round_index, _SAMPLER_TAG),
        )
        observe_start = time.perf_counter()
        strategy.observe(outcome)
        wall_ms = select_ms + (time.perf_counter() - observe_start) * 1e3

        records.append(
            RoundRecord(
                round_index=round_index,
                cohort=plan.cohort,
                mode_ids={c: plan.modes[c].mode_id for c in plan.cohort},
                predicted_time_s=plan.predicted_time_s,
                realized_time_s=realized_time,
                round_energy_j=realized_energy,
                cum_energy_j=ledger.spent_j,
                global_acc=accuracy,
                selection_wall_ms=wall_ms,
                rejected=False,
            )
        )

    return ExperimentResult(
        config=cfg,
        records=tuple(records),
        stop_reason=stop_reason,
        final_accuracy=accuracy,
    )


def emit_metrics(
    records: Sequence[RoundRecord],
    path: str,
    budget_j: float,
    target_accuracy: Optional[float] = None,
) -> None:
    """Write the per-round CSV plus a '#'-commented summary block.

    The summary self-checks the budget invariant from the records alone,
    so handing it records that overspend flags a violation. Time to the
    target accuracy counts simulated round time plus measured selection
    wall time up to the first qualifying round.
    """
    completed = [r for r in records if not r.rejected]
    cum_energy = sum(r.round_energy_j for r in completed)
    cum_time = sum(r.realized_time_s for r in completed)
    wall_ms_total = sum(r.selection_wall_ms for r in records)
    violation = cum_energy > budget_j or any(r.rejected for r in records)

    tta = "n/a"
    if target_accuracy is not None:
        tta = TTA_UNREACHED
        sim, wall = 0.0, 0.0
        for r in completed:
            sim += r.realized_time_s
            wall += r.selection_wall_ms
            if r.global_acc >= target_accuracy:
                tta = repr(sim + wall / 1e3)
                break

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow(
                (
                    r.round_index,
                    "|".join(str(c) for c in r.cohort),
                    repr(r.realized_time_s),
                    repr(r.round_energy_j),
                    repr(r.cum_energy_j),
                    repr(r.global_acc),
                    repr(r.selection_wall_ms),
                )
            )
        handle.write(f"# rounds: {len(completed)}\n")
        if not completed:
            handle.write("# summary: no rounds\n")
        handle.write(f"# budget_j: {budget_j!r}\n")
        handle.write(f"# cum_energy_j: {cum_energy!r}\n")
        handle.write(f"# cum_time_s: {cum_time!r}\n")
        handle.write(f"# selection_wall_ms_total: {wall_ms_total!r}\n")
        final = repr(completed[-1].global_acc) if completed else "n/a"
        handle.write(f"# accuracy_at_budget: {final}\n")
        target = repr(target_accuracy) if target_accuracy is not None else "n/a"
        handle.write(f"# target_accuracy: {target}\n")
        handle.write(f"# tta_s: {tta}\n")
        handle.write(f"# budget_violation: {'true' if violation else 'false'}\n")


def read_metrics(path: str) -> Tuple[List[Dict[str, object]], Dict[str, str]]:
    """Parse a metrics CSV back into rows and the summary mapping."""
    rows: List[Dict[str, object]] = []
    summary: Dict[str, str] = {}
    with open(path) as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0].split(",") != list(METRICS_HEADER):
        raise MetricsParseError(f"{path}: missing metrics header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if ":" not in body:
                raise MetricsParseError(f"{path}:{lineno}: bad summary line")
            key, value = body.split(":", 1)
            summary[key.strip()] = value.strip()
            continue
        parts = line.split(",")
        if len(parts) != len(METRICS_HEADER):
            raise MetricsParseError(
                f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields"
            )
        try:
            rows.append(
                {
                    "round": int(parts[0]),
                    "cohort": tuple(int(c) for c in parts[1].split("|") if c),
                    "round_time_s": float(parts[2]),
                    "round_energy_j": float(parts[3]),
                    "cum_energy_j": float(parts[4]),
                    "global_acc": float(parts[5]),
                    "selection_wall_ms": float(parts[6]),
                }
            )
        except ValueError as exc:
            raise MetricsParseError(f"{path}:{lineno}: {exc}") from None
    return rows, summary


def emit_plot(metric_paths: Sequence[str], out_path: str) -> None:
    """Render accuracy and cumulative time against cumulative energy.

    One labeled series per metrics file; an empty file set or files with
    zero rounds produce annotated empty axes rather than an error.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, acc_ax = plt.subplots(figsize=(7, 4.5))
    time_ax = acc_ax.twinx()
    plotted = False
    for path in metric_paths:
        rows, summary = read_metrics(path)
        if not rows:
            continue
        energy = [row["cum_energy_j"] for row in rows]
        acc = [row["global_acc"] for row in rows]
        cum_time = np.cumsum([row["round_time_s"] for row in rows])
        label = summary.get("label", path.rsplit("/", 1)[-1].removesuffix(".csv"))
        line = acc_ax.plot(energy, acc, marker="o", markersize=3, label=label)[0]
        time_ax.plot(
            energy, cum_time, linestyle="--", alpha=0.6, color=line.get_color()
        )
        plotted = True
    acc_ax.set_xlabel("cumulative energy (J)")
    acc_ax.set_ylabel("global accuracy")
    time_ax.set_ylabel("cumulative round time (s, dashed)")
    if plotted:
        acc_ax.legend(loc="lower right", fontsize=8)
    else:
        acc_ax.annotate(
            "no rounds to plot",
            xy=(0.5, 0.5),
            xycoords="axes fraction",
            ha="center",
            va="center",
        )
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


@dataclass(frozen=True)
class BenchCell:
    """One (pool size, cohort size) timing measurement."""

    pool: int
    cohort: int
    repetitions: int
    mean_solve_s: Optional[float]
    status: str  # ok | skipped | timeout
    reason: str = ""


def _bench_problem(rng: np.random.Generator, pool: int, cohort: int) -> SelectionProblem:
    clients = []
    for i in range(pool):
        tau = float(rng.uniform(4.0, 60.0))
        energy = float(rng.uniform(50.0, 400.0))
        front = ParetoFront((ParetoPoint("m0", tau, energy),))
        clients.append(ClientState(i, float(rng.uniform(0.0, 1.0)), front))
    total = sum(c.maxn_energy_j for c in clients)
    # roomy enough that cohorts exist, tight enough that the knapsack has
    # real decisions to make
    budget = 0.5 * total
    return SelectionProblem(tuple(clients), budget, cohort, 0.5)


def bench_selection(
    pools: Sequence[int],
    cohorts: Sequence[int],
    repetitions: int,
    timeout_s: float = 3600.0,
    seed: int = 0,
) -> List[BenchCell]:
    """Mean wall-clock solve time of the cohort selector per grid cell.

    Cells where the cohort exceeds the pool are skipped with a reason;
    cells whose total solve time passes timeout_s are marked timed out.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    cells: List[BenchCell] = []
    for pool in pools:
        for cohort in cohorts:
            if pool < 1 or cohort < 1:
                raise ValueError("pool and cohort sizes must be >= 1")
            if cohort > pool:
                cells.append(
                    BenchCell(
                        pool,
                        cohort,
                        repetitions,
                        None,
                        "skipped",
                        f"cohort {cohort} exceeds pool {pool}",
                    )
                )
                continue
            rng = np.random.default_rng(
                _derive_seed(seed, pool, cohort)
            )
            elapsed: List[float] = []
            status = "ok"
            reason = ""
            deadline = timeout_s
            for _ in range(repetitions):
                problem = _bench_problem(rng, pool, cohort)
                start = time.perf_counter()
                try:
                    solve_selection(problem, deadline_s=deadline)
                except SolverDeadlineError:
                    status = "timeout"
                    reason = f"exceeded {timeout_s} s"
                    break
                except SelectionInfeasibleError:
                    pass  # timing still covers the full search
                spent = time.perf_counter() - start
                elapsed.append(spent)
                deadline -= spent
                if deadline <= 0:
                    status = "timeout"
                    reason = f"exceeded {timeout_s} s"
                    break
            mean = sum(elapsed) / len(elapsed) if elapsed and status == "ok" else None
            cells.append(BenchCell(pool, cohort, repetitions, mean, status, reason))
    return cells


def bench_table(cells: Sequence[BenchCell]) -> str:
    """Human-readable fixed-width table of benchmark cells."""
    lines = [f"{'pool':>6} {'cohort':>6} {'reps':>5} {'mean_s':>12} status"]
    for cell in cells:
        mean = f"{cell.mean_solve_s:.6f}" if cell.mean_solve_s is not None else "-"
        suffix = f" ({cell.reason})" if cell.reason else ""
        lines.append(
            f"{cell.pool:>6} {cell.cohort:>6} {cell.repetitions:>5} "
            f"{mean:>12} {cell.status}{suffix}"
        )
    return "\n".join(lines)
