"""Labeled-dataset synthesis and non-IID partitioning across clients.

Two partitioners are provided. The shard scheme slices every class into
equal shards and deals each client a fixed number of shards of distinct
classes, giving hard label skew with an exact per-client class count. The
Dirichlet scheme draws per-class client proportions from a symmetric
Dirichlet prior, giving tunable skew. Both conserve samples: every sample
lands on exactly one client. Label skew is quantified by a generalized
Jensen-Shannon divergence over the per-client label distributions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class PartitionInfeasibleError(ValueError):
    """No valid assignment exists for the requested partition shape."""


@dataclass(frozen=True)
class LabeledDataset:
    """Dense feature matrix with integer class labels."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ValueError("features must be a non-empty (n, d) matrix")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be a (n,) vector matching features")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)


@dataclass(frozen=True)
class PartitionAssignment:
    """Sample-to-client map plus consistent per-client label histograms."""

    client_count: int
    assignment: np.ndarray  # (n,) int64, values in [0, client_count)
    label_histograms: np.ndarray  # (client_count, num_classes) int64

    def __post_init__(self) -> None:
        assignment = np.asarray(self.assignment, dtype=np.int64)
        hists = np.asarray(self.label_histograms, dtype=np.int64)
        if self.client_count < 1:
            raise ValueError("client_count must be >= 1")
        if assignment.ndim != 1 or assignment.size == 0:
            raise ValueError("assignment must be a non-empty vector")
        if assignment.min() < 0 or assignment.max() >= self.client_count:
            raise ValueError("assignment values must lie in [0, client_count)")
        if hists.shape[0] != self.client_count:
            raise ValueError("label_histograms must have one row per client")
        if int(hists.sum()) != assignment.size:
            raise ValueError("label_histograms do not account for every sample")
        counts = np.bincount(assignment, minlength=self.client_count)
        if not np.array_equal(counts, hists.sum(axis=1)):
            raise ValueError("per-client histogram totals disagree with assignment")
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "label_histograms", hists)

    @classmethod
    def from_assignment(
        cls, data: LabeledDataset, assignment: np.ndarray, client_count: int
    ) -> "PartitionAssignment":
        assignment = np.asarray(assignment, dtype=np.int64)
        hists = np.zeros((client_count, data.num_classes), dtype=np.int64)
        np.add.at(hists, (assignment, data.labels), 1)
        return cls(client_count, assignment, hists)

    def client_indices(self, client: int) -> np.ndarray:
        return np.nonzero(self.assignment == client)[0]

    @property
    def sizes(self) -> np.ndarray:
        return self.label_histograms.sum(axis=1)


def synthesize_dataset(
    classes: int,
    dim: int,
    samples: int,
    class_separation: float,
    seed: int,
    noise_sigma: float = 0.5,
) -> LabeledDataset:
    """Gaussian class clusters around unit-norm centers scaled by
    `class_separation`, with isotropic within-class noise of scale
    `noise_sigma`.

    Class counts are balanced to within one sample and sample order is
    shuffled. Separation 0 collapses every center to the origin, so labels
    carry no signal and any classifier sits at chance accuracy; separation
    2.0 at the default noise makes the classes cleanly separable.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if samples < classes:
        raise ValueError("samples must be >= classes so every class appears")
    if not (class_separation >= 0) or not math.isfinite(class_separation):
        raise ValueError("class_separation must be finite and >= 0")
    if not (noise_sigma > 0) or not math.isfinite(noise_sigma):
        raise ValueError("noise_sigma must be finite and > 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    centers = centers / norms * class_separation
    base, extra = divmod(samples, classes)
    counts = np.full(classes, base, dtype=np.int64)
    counts[:extra] += 1
    labels = rng.permutation(np.repeat(np.arange(classes, dtype=np.int64), counts))
    features = centers[labels] + noise_sigma * rng.standard_normal((samples, dim))
    return LabeledDataset(features, labels, classes)


def _build_class_shards(
    data: LabeledDataset, shards_per_class: int, rng: np.random.Generator
) -> List[List[np.ndarray]]:
    """Shuffle each class and split it into near-equal shards.

    The remainder of an uneven split is spread one extra sample per shard.
    """
    shards: List[List[np.ndarray]] = []
    for label in range(data.num_classes):
        members = np.nonzero(data.labels == label)[0]
        if members.size < shards_per_class:
            raise PartitionInfeasibleError(
                f"class {label} has {members.size} samples but needs at least "
                f"{shards_per_class} to fill its shards"
            )
        members = rng.permutation(members)
        base, extra = divmod(members.size, shards_per_class)
        sizes = np.full(shards_per_class, base, dtype=np.int64)
        sizes[:extra] += 1
        shards.append(list(np.split(members, np.cumsum(sizes)[:-1])))
    return shards


def _random_class_matching(
    clients: int, labels_per_client: int, classes: int, shards_per_class: int,
    rng: np.random.Generator, max_attempts: int,
) -> Optional[List[List[int]]]:
    """Deal shard slots to clients by random permutation with retry.

    Accepts a deal only when every client block holds distinct classes and
    every class is dealt at least once; returns None when all attempts fail.
    """
    slots = np.repeat(np.arange(classes), shards_per_class)
    need = clients * labels_per_client
    for _ in range(max_attempts):
        perm = rng.permutation(slots)[:need]
        blocks = perm.reshape(clients, labels_per_client)
        if any(len(set(block.tolist())) != labels_per_client for block in blocks):
            continue
        if len(np.unique(perm)) != classes:
            continue
        return [sorted(block.tolist()) for block in blocks]
    return None


def _round_robin_matching(
    clients: int, labels_per_client: int, classes: int
) -> List[List[int]]:
    """Deterministic fallback: client k takes classes k*delta .. k*delta+delta-1
    modulo the class count.

    The flattened schedule enumerates 0..c*delta-1 once, so each class is
    requested at most ceil(c*delta/l) times (its shard count) and, because
    c*delta >= l, at least once.
    """
    return [
        sorted((client * labels_per_client + j) % classes for j in range(labels_per_client))
        for client in range(clients)
    ]


def shard_partition(
    data: LabeledDataset,
    clients: int,
    labels_per_client: int,
    seed: int,
    max_attempts: int = 10000,
) -> PartitionAssignment:
    """Partition by dealing class shards so each client holds exactly
    `labels_per_client` distinct classes.

    Every class is cut into ceil(clients * labels_per_client / classes)
    shards. A random matching assigns one shard of each chosen class per
    client; when the class count does not divide the shard total, surplus
    shards are folded into clients that already hold that class, keeping
    the distinct-label count exact and every sample assigned.
    """
    delta = labels_per_client
    classes = data.num_classes
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if delta < 1:
        raise ValueError("labels_per_client must be >= 1")
    if delta > classes:
        raise PartitionInfeasibleError(
            f"labels_per_client {delta} exceeds class count {classes}"
        )
    if clients * delta < classes:
        raise PartitionInfeasibleError(
            f"{clients} clients x {delta} labels cannot cover {classes} classes"
        )
    shards_per_class = math.ceil(clients * delta / classes)
    rng = np.random.default_rng(seed)
    shards = _build_class_shards(data, shards_per_class, rng)
    matching = _random_class_matching(
        clients, delta, classes, shards_per_class, rng, max_attempts
    )
    if matching is None:
        matching = _round_robin_matching(clients, delta, classes)
    holders: List[List[int]] = [[] for _ in range(classes)]
    for client, block in enumerate(matching):
        for label in block:
            holders[label].append(client)
    assignment = np.full(len(data), -1, dtype=np.int64)
    for label in range(classes):
        owners = holders[label]
        if not owners or len(owners) > shards_per_class:
            raise PartitionInfeasibleError(
                f"class {label} matched to {len(owners)} clients with only "
                f"{shards_per_class} shards"
            )
        # random shard-to-owner pairing; surplus shards cycle back through owners
        order = rng.permutation(shards_per_class)
        for position, shard_index in enumerate(order):
            owner = owners[position % len(owners)]
            assignment[shards[label][shard_index]] = owner
    return PartitionAssignment.from_assignment(data, assignment, clients)


def dirichlet_partition(
    data: LabeledDataset,
    clients: int,
    alpha: float,
    seed: int,
) -> PartitionAssignment:
    """Partition each class by proportions drawn from Dirichlet(alpha).

    Small alpha concentrates a class on few clients; large alpha approaches
    a uniform split. Clients left empty by the draw are repaired with one
    sample taken from the currently largest client so that every client can
    train.
    """
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if not (alpha > 0) or not math.isfinite(alpha):
        raise ValueError("alpha must be finite and > 0")
    if len(data) < clients:
        raise PartitionInfeasibleError(
            f"{len(data)} samples cannot cover {clients} clients"
        )
    rng = np.random.default_rng(seed)
    members: List[List[int]] = [[] for _ in range(clients)]
    for label in range(data.num_classes):
        class_idx = rng.permutation(np.nonzero(data.labels == label)[0])
        if class_idx.size == 0:
            continue
        proportions = rng.dirichlet(np.full(clients, alpha))
        counts = rng.multinomial(class_idx.size, proportions)
        offset = 0
        for client, count in enumerate(counts):
            if count:
                members[client].extend(class_idx[offset : offset + count].tolist())
                offset += count
    sizes = np.array([len(m) for m in members], dtype=np.int64)
    # repair: donate one sample at a time from the largest client
    while (sizes == 0).any():
        receiver = int(np.argmin(sizes > 0))  # lowest-index empty client
        donor = int(np.argmax(sizes))
        if sizes[donor] < 2:
            raise PartitionInfeasibleError("cannot repair empty clients")
        members[receiver].append(members[donor].pop())
        sizes[receiver] += 1
        sizes[donor] -= 1
    assignment = np.full(len(data), -1, dtype=np.int64)
    for client, idx in enumerate(members):
        assignment[np.array(idx, dtype=np.int64)] = client
    return PartitionAssignment.from_assignment(data, assignment, clients)


def js_divergence(partition: PartitionAssignment) -> float:
    """Generalized Jensen-Shannon divergence of per-client label
    distributions, uniform client weights, base-2 logs, normalized by
    log2(min(clients, classes)) into [0, 1].

    0 means identical distributions; 1 means maximally disjoint support.
    """
    hists = partition.label_histograms.astype(np.float64)
    totals = hists.sum(axis=1)
    if (totals == 0).any():
        raise ValueError("every client must hold at least one sample")
    dists = hists / totals[:, None]

    def entropy_bits(p: np.ndarray) -> float:
        nz = p[p > 0]
        return float(-(nz * np.log2(nz)).sum())

    mixture = dists.mean(axis=0)
    divergence = entropy_bits(mixture) - float(
        np.mean([entropy_bits(row) for row in dists])
    )
    normalizer = math.log2(min(partition.client_count, hists.shape[1]))
    if normalizer == 0:
        return 0.0
    return float(min(1.0, max(0.0, divergence / normalizer)))


DATASET_LABEL_COLUMN = "label"


def save_dataset(data: LabeledDataset, path: str) -> None:
    """Write the dataset as CSV: d feature columns then the integer label."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"f{i}" for i in range(data.dim)] + [DATASET_LABEL_COLUMN])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset(path: str, num_classes: Optional[int] = None) -> LabeledDataset:
    """Read a dataset CSV written by save_dataset.

    When num_classes is omitted it is inferred as max(label) + 1.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected header row") from None
        if len(header) < 2 or header[-1] != DATASET_LABEL_COLUMN:
            raise ValueError(f"{path}: last column must be {DATASET_LABEL_COLUMN!r}")
        dim = len(header) - 1
        features: List[List[float]] = []
        labels: List[int] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(f"{path}: line {lineno}: expected {dim + 1} fields")
            try:
                features.append([float(v) for v in row[:dim]])
                labels.append(int(row[dim]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    label_arr = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(label_arr.max()) + 1 if label_arr.size else 0
    return LabeledDataset(np.array(features, dtype=np.float64), label_arr, num_classes)


def save_partition(partition: PartitionAssignment, path: str) -> None:
    """Write the sample-to-client map as CSV: sample_index,client_index."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sample_index", "client_index"])
        for sample, client in enumerate(partition.assignment):
            writer.writerow([sample, int(client)])
