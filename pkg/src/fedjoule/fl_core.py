"""Reference models, local SGD, and federated averaging.

The simulator trains a deliberately small model: multinomial logistic
regression by default, or a one-hidden-layer tanh MLP. Parameters travel
as flat float64 vectors so aggregation, checkpointing, and contribution
probes stay model-agnostic.

Softmax probabilities are computed without log-sum-exp shifting on
purpose: in the sane operating regime the results are identical, and when
training blows up (for example an absurd learning rate) the overflow
surfaces as NaN and trips the per-epoch divergence check instead of being
silently clamped to a huge finite loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data_partition import LabeledDataset

ModelParams = np.ndarray  # flat float64 vector


class NumericDivergenceError(RuntimeError):
    """Weights or loss went NaN/Inf during local training."""


@dataclass(frozen=True)
class TrainConfig:
    """Local SGD hyperparameters for one client round."""

    epochs: int
    lr: float
    batch_size: int
    seed: int

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.lr > 0) or not math.isfinite(self.lr):
            raise ValueError("lr must be finite and > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float  # top-1 fraction in [0, 1]
    loss: float  # mean cross-entropy


@dataclass(frozen=True)
class ReferenceModel:
    """Flat-vector view of a small softmax classifier.

    kind "logistic": params = [W (dim*classes), b (classes)].
    kind "mlp": params = [W1 (dim*hidden), b1, W2 (hidden*classes), b2]
    with a tanh hidden layer.
    """

    kind: str
    dim: int
    classes: int
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dim < 1 or self.classes < 2:
            raise ValueError("need dim >= 1 and classes >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp models need hidden >= 1")

    @classmethod
    def logistic(cls, dim: int, classes: int) -> "ReferenceModel":
        return cls("logistic", dim, classes)

    @classmethod
    def mlp(cls, dim: int, classes: int, hidden: int) -> "ReferenceModel":
        return cls("mlp", dim, classes, hidden)

    @property
    def param_dim(self) -> int:
        if self.kind == "logistic":
            return self.dim * self.classes + self.classes
        return (
            self.dim * self.hidden
            + self.hidden
            + self.hidden * self.classes
            + self.classes
        )

    def init_params(self, seed: int = 0) -> ModelParams:
        """Zero weights for logistic (chance predictions, loss ln(classes));
        small random weights for the MLP to break hidden-unit symmetry."""
        if self.kind == "logistic":
            return np.zeros(self.param_dim, dtype=np.float64)
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((self.dim, self.hidden)) / math.sqrt(self.dim)
        w2 = rng.standard_normal((self.hidden, self.classes)) / math.sqrt(self.hidden)
        return np.concatenate(
            [w1.ravel(), np.zeros(self.hidden), w2.ravel(), np.zeros(self.classes)]
        )

    def _check_params(self, params: ModelParams) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_dim,):
            raise ValueError(
                f"expected flat params of length {self.param_dim}, got {params.shape}"
            )
        return params

    def _unpack(self, params: np.ndarray):
        d, l, h = self.dim, self.classes, self.hidden
        if self.kind == "logistic":
            return params[: d * l].reshape(d, l), params[d * l :]
        o1 = d * h
        o2 = o1 + h
        o3 = o2 + h * l
        return (
            params[:o1].reshape(d, h),
            params[o1:o2],
            params[o2:o3].reshape(h, l),
            params[o3:],
        )

    def logits(self, params: ModelParams, features: np.ndarray) -> np.ndarray:
        params = self._check_params(params)
        if self.kind == "logistic":
            w, b = self._unpack(params)
            return features @ w + b
        w1, b1, w2, b2 = self._unpack(params)
        return np.tanh(features @ w1 + b1) @ w2 + b2

    def predict(self, params: ModelParams, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(params, features), axis=1)

    def loss_and_grad(
        self, params: ModelParams, features: np.ndarray, labels: np.ndarray
    ) -> Tuple[float, np.ndarray]:
        """Mean cross-entropy and its gradient w.r.t. the flat params."""
        params = self._check_params(params)
        n = features.shape[0]
        rows = np.arange(n)
        # overflow here is the divergence signal, not a defect; the NaNs it
        # produces are caught by local_train's per-epoch check
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.kind == "logistic":
                w, b = self._unpack(params)
                z = features @ w + b
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                loss = float(-np.log(p[rows, labels]).mean())
                dz = p
                dz[rows, labels] -= 1.0
                dz /= n
                return loss, np.concatenate([(features.T @ dz).ravel(), dz.sum(axis=0)])
            w1, b1, w2, b2 = self._unpack(params)
            hidden = np.tanh(features @ w1 + b1)
            z = hidden @ w2 + b2
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            loss = float(-np.log(p[rows, labels]).mean())
            dz = p
            dz[rows, labels] -= 1.0
            dz /= n
            dhidden = (dz @ w2.T) * (1.0 - hidden * hidden)
            return loss, np.concatenate(
                [
                    (features.T @ dhidden).ravel(),
                    dhidden.sum(axis=0),
                    (hidden.T @ dz).ravel(),
                    dz.sum(axis=0),
                ]
            )

    def evaluate(self, params: ModelParams, data: LabeledDataset) -> EvalResult:
        """Top-1 accuracy and mean cross-entropy on a dataset."""
        z = self.logits(params, data.features)
        predictions = np.argmax(z, axis=1)
        accuracy = float((predictions == data.labels).mean())
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        loss = float(-np.log(p[np.arange(len(data)), data.labels]).mean())
        return EvalResult(accuracy=accuracy, loss=loss)

    def local_train(
        self, params: ModelParams, data: LabeledDataset, cfg: TrainConfig
    ) -> ModelParams:
        """Run cfg.epochs epochs of minibatch SGD and return new params.

        Epoch k shuffles with seed cfg.seed + k, so a run with e epochs
        equals e chained single-epoch runs seeded cfg.seed, cfg.seed + 1,
        and so on. The input vector is never mutated. NaN or Inf in the
        weights after any epoch raises NumericDivergenceError naming it.
        """
        w = self._check_params(params).copy()
        n = len(data)
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(cfg.seed + epoch).permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                _, grad = self.loss_and_grad(w, data.features[batch], data.labels[batch])
                w -= cfg.lr * grad
            if not np.isfinite(w).all():
                raise NumericDivergenceError(
                    f"non-finite weights after epoch {epoch + 1} of {cfg.epochs}"
                )
        return w


def fedavg_aggregate(updates: Sequence[Tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count-weighted average of client parameter vectors."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    dim = np.asarray(updates[0][0]).shape
    total = 0
    acc = np.zeros(dim, dtype=np.float64)
    for params, count in updates:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != dim:
            raise ValueError("all parameter vectors must share one shape")
        if count < 1:
            raise ValueError("sample counts must be >= 1")
        acc += params * count
        total += count
    return acc / total


CHECKPOINT_HEADER = ("dimension", "workload")


def save_params(params: ModelParams, workload: str, path: str) -> None:
    """Write a flat parameter vector as CSV with a one-line header carrying
    the dimension and workload name."""
    params = np.asarray(params, dtype=np.float64)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([params.size, workload])
        for value in params:
            writer.writerow([repr(float(value))])


def load_params(path: str) -> Tuple[ModelParams, str]:
    """Read a checkpoint written by save_params; validates the dimension."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty checkpoint") from None
        if len(header) != 2:
            raise ValueError(f"{path}: header must be 'dimension,workload'")
        try:
            dim = int(header[0])
        except ValueError:
            raise ValueError(f"{path}: bad dimension {header[0]!r}") from None
        workload = header[1]
        values = [float(row[0]) for row in reader if row]
    if len(values) != dim:
        raise ValueError(f"{path}: header says {dim} values, found {len(values)}")
    return np.array(values, dtype=np.float64), workload
