"""Trace-driven simulator for energy-budgeted federated learning on
heterogeneous edge accelerators.

The package covers the full pipeline: device power-mode modeling, non-IID
partitioning of a labeled dataset across simulated clients, local training
plus federated averaging on a small reference model, contribution scoring
via exact and kernel-regression Shapley values with coreset-backed
evaluation, an exact bi-level selector that picks a cohort and per-client
power modes under a hard energy budget, pluggable selection strategies,
and an orchestrator that runs seeded experiments and emits metrics.
"""

from fedjoule.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from fedjoule.contribution import (
    CohortUtility,
    build_coreset,
    coreset_indices,
    exhaustive_shapley,
    kernel_shapley,
)
from fedjoule.data_partition import (
    LabeledDataset,
    PartitionAssignment,
    dirichlet_partition,
    shard_partition,
    synthesize_dataset,
)
from fedjoule.device_model import (
    DEFAULT_DEVICE_CLASSES,
    DeviceWorkloadProfile,
    ParetoFront,
    ParetoPoint,
    PowerModeProfile,
    extract_pareto,
    load_profiles,
    synthesize_profiles,
)
from fedjoule.fl_core import ReferenceModel, TrainConfig, fedavg_aggregate
from fedjoule.orchestrator import (
    BudgetViolationError,
    EnergyLedger,
    ExperimentResult,
    RoundRecord,
    bench_selection,
    emit_metrics,
    emit_plot,
    prepare_clients,
    read_metrics,
    run_experiment,
)
from fedjoule.selector import (
    ClientState,
    SelectionInfeasibleError,
    SelectionPlan,
    SelectionProblem,
    SolverDeadlineError,
    solve_selection,
)
from fedjoule.strategies import Strategy, StrategyParams, make_strategy

__version__ = "0.1.0"

__all__ = [
    "BudgetViolationError",
    "ClientState",
    "CohortUtility",
    "ConfigError",
    "DEFAULT_DEVICE_CLASSES",
    "DeviceWorkloadProfile",
    "EnergyLedger",
    "ExperimentConfig",
    "ExperimentResult",
    "LabeledDataset",
    "ParetoFront",
    "ParetoPoint",
    "PartitionAssignment",
    "PowerModeProfile",
    "ReferenceModel",
    "RoundRecord",
    "SelectionInfeasibleError",
    "SelectionPlan",
    "SelectionProblem",
    "SolverDeadlineError",
    "Strategy",
    "StrategyParams",
    "TrainConfig",
    "bench_selection",
    "build_coreset",
    "config_from_dict",
    "config_to_dict",
    "coreset_indices",
    "emit_metrics",
    "emit_plot",
    "exhaustive_shapley",
    "extract_pareto",
    "fedavg_aggregate",
    "kernel_shapley",
    "load_config",
    "load_profiles",
    "dirichlet_partition",
    "make_strategy",
    "prepare_clients",
    "read_metrics",
    "run_experiment",
    "save_config",
    "shard_partition",
    "solve_selection",
    "synthesize_dataset",
    "synthesize_profiles",
]
