"""Client contribution scoring: exact and kernel-regression Shapley values,
surrogate score tracking, and coreset-backed cohort evaluation.

A round's cohort defines a cooperative game: the utility of a subset is the
validation accuracy of the federated average of that subset's local models,
and the utility of the empty set is the accuracy of the incoming global
model. Exact Shapley values enumerate every subset, which is affordable
only for small cohorts; the kernel estimator regresses sampled subset
utilities on membership indicators instead. Per-round values are min-max
normalized and folded into a per-client exponential moving average that
selection strategies consume. To keep the many subset evaluations cheap,
utilities are measured on a small class-balanced coreset selected by greedy
facility location in cosine distance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data_partition import LabeledDataset
from .fl_core import ModelParams, ReferenceModel, fedavg_aggregate

CohortUtilityFn = Callable[[frozenset], float]


class CohortSizeError(ValueError):
    """Cohort too large for exhaustive subset enumeration."""


class CoverageError(ValueError):
    """A client never appears in any sampled subset."""


EXHAUSTIVE_COHORT_CAP = 12


class CohortUtility:
    """Memoized cohort -> accuracy game over federated model merges.

    The empty cohort maps to the incoming global model's accuracy. Results
    are cached by frozenset of client ids; both Shapley routes revisit
    subsets, and CPython dict insertion is atomic, so concurrent lookups of
    distinct keys are safe.
    """

    def __init__(
        self,
        model: ReferenceModel,
        base_params: ModelParams,
        local_updates: Mapping[int, Tuple[ModelParams, int]],
        eval_data: LabeledDataset,
    ) -> None:
        self._model = model
        self._base_params = np.asarray(base_params, dtype=np.float64)
        self._local_updates = dict(local_updates)
        self._eval_data = eval_data
        self._cache: Dict[frozenset, float] = {}
        self.evaluation_count = 0

    @property
    def clients(self) -> Tuple[int, ...]:
        return tuple(sorted(self._local_updates))

    def __call__(self, cohort: Iterable[int]) -> float:
        key = frozenset(cohort)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        unknown = key - self._local_updates.keys()
        if unknown:
            raise KeyError(f"no local update for clients {sorted(unknown)}")
        if key:
            merged = fedavg_aggregate([self._local_updates[c] for c in sorted(key)])
        else:
            merged = self._base_params
        value = self._model.evaluate(merged, self._eval_data).accuracy
        self.evaluation_count += 1
        self._cache[key] = value
        return value


def exhaustive_shapley(
    utility: CohortUtilityFn,
    cohort: Iterable[int],
    cap: int = EXHAUSTIVE_COHORT_CAP,
) -> Dict[int, float]:
    """Exact Shapley value of every cohort member.

    phi_i = sum over subsets s of the others of
    (v(s + i) - v(s)) / (n * C(n - 1, |s|)); the empty set counts with the
    incoming model's utility. Enumerates all 2^n subsets, so cohorts above
    `cap` members are rejected.
    """
    members = sorted(set(cohort))
    n = len(members)
    if n == 0:
        raise ValueError("cohort must be non-empty")
    if n > cap:
        raise CohortSizeError(f"cohort of {n} exceeds exhaustive cap {cap}")
    values = {}
    for mask in range(1 << n):
        subset = frozenset(members[i] for i in range(n) if mask >> i & 1)
        values[mask] = utility(subset)
    shapley: Dict[int, float] = {}
    for i, client in enumerate(members):
        total = 0.0
        for mask in range(1 << n):
            if mask >> i & 1:
                continue
            size = bin(mask).count("1")
            marginal = values[mask | (1 << i)] - values[mask]
            total += marginal / (n * math.comb(n - 1, size))
        shapley[client] = total
    return shapley


def kernel_weights(subset_size: int, cohort_size: int) -> float:
    """Kernel regression weight of a subset by its size.

    The grand coalition gets weight 1; a proper subset of size k gets
    (n - 1) / (C(n, k) * k * (n - k)). Size 0 is outside the domain.
    """
    if cohort_size < 1:
        raise ValueError("cohort_size must be >= 1")
    if subset_size < 1 or subset_size > cohort_size:
        raise ValueError(
            f"subset_size must lie in [1, {cohort_size}], got {subset_size}"
        )
    if subset_size == cohort_size:
        return 1.0
    n, k = cohort_size, subset_size
    return (n - 1) / (math.comb(n, k) * k * (n - k))


def sample_cohorts(cohort: Iterable[int], seed: int) -> List[frozenset]:
    """Choose the subsets whose utilities the kernel estimator will fit.

    With n members this returns min(2^n - 1, 3n) unique non-empty subsets:
    every non-empty subset when 2^n <= 3n, otherwise all n singletons plus
    2n subsets drawn without replacement with probability proportional to
    the kernel weight of their size, with the grand coalition forced in by
    displacing the last draw when it was not sampled.
    """
    members = sorted(set(cohort))
    n = len(members)
    if n == 0:
        raise ValueError("cohort must be non-empty")
    if 2**n <= 3 * n:
        return [
            frozenset(combo)
            for size in range(1, n + 1)
            for combo in combinations(members, size)
        ]
    rng = np.random.default_rng(seed)
    chosen: List[frozenset] = [frozenset((m,)) for m in members]
    seen = set(chosen)
    # singletons are already in, so draws range over sizes 2..n; the draw
    # probability of a size is its subset count times its kernel weight
    sizes = np.arange(2, n + 1)
    size_weights = np.array(
        [math.comb(n, int(k)) * kernel_weights(int(k), n) for k in sizes]
    )
    size_probs = size_weights / size_weights.sum()
    draws: List[frozenset] = []
    budget = 2 * n
    guard = 0
    while len(draws) < budget:
        guard += 1
        if guard > 10000 * budget:
            raise RuntimeError("subset sampling failed to find enough unique subsets")
        size = int(rng.choice(sizes, p=size_probs))
        subset = frozenset(rng.choice(members, size=size, replace=False).tolist())
        if subset in seen:
            continue  # redraw: equivalent to sampling without replacement
        seen.add(subset)
        draws.append(subset)
    grand = frozenset(members)
    if grand not in seen:
        draws[-1] = grand
    return chosen + draws


def kernel_shapley(
    utility: CohortUtilityFn,
    cohort: Iterable[int],
    samples: Sequence[frozenset],
) -> Dict[int, float]:
    """Kernel regression estimate of Shapley values from sampled subsets.

    Fits utility lift over the incoming model, v(s) - v(empty), with a
    least-squares model sum_i phi_i * [i in s] solved by normal equations.
    The kernel's size weighting enters through how sample_cohorts draws the
    subsets, so rows are fitted unweighted here; there is no intercept, no
    empty-set row, and no efficiency constraint, which is why the estimate
    can differ from the exact values even on a full enumeration. A ridge of
    1e-9 is added only when the normal matrix is singular.
    """
    members = sorted(set(cohort))
    n = len(members)
    if n == 0:
        raise ValueError("cohort must be non-empty")
    unique = []
    seen = set()
    for subset in samples:
        key = frozenset(subset)
        if not key:
            raise ValueError("sampled subsets must be non-empty")
        if not key <= set(members):
            raise ValueError(f"subset {sorted(key)} is not within the cohort")
        if key not in seen:
            seen.add(key)
            unique.append(key)
    if not unique:
        raise ValueError("need at least one sampled subset")
    # canonical row order makes the estimate independent of sample order
    unique.sort(key=lambda s: (len(s), sorted(s)))
    uncovered = [m for m in members if not any(m in s for s in unique)]
    if uncovered:
        raise CoverageError(f"clients {uncovered} appear in no sampled subset")
    index = {client: i for i, client in enumerate(members)}
    design = np.zeros((len(unique), n))
    for row, subset in enumerate(unique):
        for client in subset:
            design[row, index[client]] = 1.0
    base = utility(frozenset())
    targets = np.array([utility(s) - base for s in unique])
    normal = design.T @ design
    rhs = design.T @ targets
    try:
        solution = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError:
        solution = np.linalg.solve(normal + 1e-9 * np.eye(n), rhs)
    return {client: float(solution[index[client]]) for client in members}


def normalize(values: Mapping[int, float]) -> Dict[int, float]:
    """Min-max normalize a round's raw estimates into [0, 1].

    A degenerate range (every value equal) maps all clients to 1.0.
    """
    if not values:
        raise ValueError("cannot normalize an empty value map")
    raw = np.array(list(values.values()), dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("values must be finite")
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return {client: 1.0 for client in values}
    return {client: (float(v) - lo) / (hi - lo) for client, v in values.items()}


@dataclass
class ShapleyLedger:
    """Per-client surrogate contribution scores with round history.

    Unseen clients start at surrogate 1.0 so that early rounds sample
    uniformly. After each scored round the participants' surrogates move by
    an exponential average toward the round's normalized estimate.
    """

    decay: float
    surrogates: Dict[int, float] = field(default_factory=dict)
    history: List[Tuple[int, int, float, float, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (0.0 <= self.decay <= 1.0):
            raise ValueError("decay must lie in [0, 1]")

    def surrogate(self, client: int) -> float:
        return self.surrogates.get(client, 1.0)

    def update(
        self,
        round_index: int,
        raw_values: Mapping[int, float],
        normalized_values: Mapping[int, float],
        participants: Iterable[int],
    ) -> None:
        """Fold one round's normalized estimates into the surrogates.

        Only participants move; each must have a value in both maps.
        """
        participants = sorted(set(participants))
        for client in participants:
            if client not in normalized_values or client not in raw_values:
                raise ValueError(f"participant {client} has no round value")
        for client in participants:
            updated = self.decay * self.surrogate(client) + (1.0 - self.decay) * float(
                normalized_values[client]
            )
            self.surrogates[client] = updated
            self.history.append(
                (
                    round_index,
                    client,
                    float(raw_values[client]),
                    float(normalized_values[client]),
                    updated,
                )
            )

    def dump_csv(self, path: str) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["round", "client", "phi_raw", "phi_norm", "phi_surrogate"])
            for row in self.history:
                writer.writerow(
                    [row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])]
                )


def surrogate_update(
    ledger: ShapleyLedger,
    round_index: int,
    raw_values: Mapping[int, float],
    normalized_values: Mapping[int, float],
    participants: Iterable[int],
) -> ShapleyLedger:
    """Apply one round of surrogate updates and return the ledger."""
    ledger.update(round_index, raw_values, normalized_values, participants)
    return ledger


def _cosine_distances(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances; zero vectors sit at distance 1 from
    everything, including themselves."""
    norms = np.linalg.norm(features, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = features / safe[:, None]
    unit[norms == 0] = 0.0
    similarity = np.clip(unit @ unit.T, -1.0, 1.0)
    return 1.0 - similarity


def facility_location_order(features: np.ndarray) -> List[int]:
    """Greedy facility-location selection order over one class.

    The first pick is the medoid (minimum cosine-distance row sum); each
    later pick maximizes the coverage improvement
    sum_j max(0, mu_j - d_ij) where mu is the running minimum distance to
    the selected set. All ties break to the lowest row index.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, d) matrix")
    n = features.shape[0]
    distances = _cosine_distances(features)
    order: List[int] = []
    selected = np.zeros(n, dtype=bool)
    medoid = int(np.argmin(distances.sum(axis=1)))
    order.append(medoid)
    selected[medoid] = True
    coverage = distances[medoid].copy()
    while len(order) < n:
        gains = np.maximum(0.0, coverage[None, :] - distances).sum(axis=1)
        gains[selected] = -np.inf
        pick = int(np.argmax(gains))
        order.append(pick)
        selected[pick] = True
        coverage = np.minimum(coverage, distances[pick])
    return order


def coreset_size(total: int, classes: int, ratio: float, min_per_class: int) -> Tuple[int, int]:
    """(target size, per-class quota) for a coreset of `total` samples."""
    if not (0.0 < ratio <= 1.0):
        raise ValueError("ratio must lie in (0, 1]")
    if min_per_class < 1:
        raise ValueError("min_per_class must be >= 1")
    target = max(int(ratio * total), classes * min_per_class)
    per_class = max(target // classes, min_per_class)
    return target, per_class


def coreset_indices(
    data: LabeledDataset,
    ratio: float,
    min_per_class: int,
    feature_extractor: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Global indices of a class-balanced facility-location coreset.

    Each class contributes min(per_class_quota, class size) samples chosen
    by facility_location_order over extracted features (identity features
    by default). Returned indices are sorted ascending.
    """
    _, per_class = coreset_size(len(data), data.num_classes, ratio, min_per_class)
    embedded = data.features if feature_extractor is None else np.asarray(
        feature_extractor(data.features), dtype=np.float64
    )
    if embedded.shape[0] != len(data):
        raise ValueError("feature extractor must keep one row per sample")
    picked: List[int] = []
    for label in range(data.num_classes):
        class_idx = np.nonzero(data.labels == label)[0]
        if class_idx.size == 0:
            continue
        take = min(per_class, class_idx.size)
        order = facility_location_order(embedded[class_idx])
        picked.extend(int(class_idx[i]) for i in order[:take])
    return np.array(sorted(picked), dtype=np.int64)


def build_coreset(
    data: LabeledDataset,
    ratio: float,
    min_per_class: int,
    feature_extractor: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> LabeledDataset:
    """Materialize the coreset selected by coreset_indices."""
    return data.subset(coreset_indices(data, ratio, min_per_class, feature_extractor))
