"""Local objectives with manual gradients, clipping, and data handling.

The global objective is the sum over nodes of the node-local objectives,
where each node-local objective averages the per-sample loss over the node's
partition. Supported families: quadratic consensus (per-sample loss
0.5 * ||x - c||^2 toward a target c), multi-class logistic regression, and a
one-hidden-layer tanh MLP, all with hand-written gradients.
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, DomainError, EmptyPartition, ParseError
from . import rng


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sample matrix plus a balanced assignment of samples to nodes."""

    features: np.ndarray
    labels: np.ndarray
    partition: tuple[np.ndarray, ...]
    n_classes: int | None = None

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=float)
        if feats.ndim != 2:
            raise DimensionMismatch("features must be a 2-d array")
        if labels.shape != (feats.shape[0],):
            raise DimensionMismatch("labels must have one entry per sample")
        if not np.isfinite(feats).all():
            raise DomainError("features must be finite")
        parts = tuple(np.asarray(p, dtype=np.int64) for p in self.partition)
        if not parts:
            raise DomainError("partition must assign samples to at least one node")
        sizes = {p.size for p in parts}
        if len(sizes) != 1:
            raise DomainError("partition must be balanced (equal samples per node)")
        flat = np.concatenate(parts) if parts[0].size else np.array([], dtype=np.int64)
        if flat.size != feats.shape[0] or np.unique(flat).size != flat.size:
            raise DomainError("partition must cover every sample exactly once")
        feats.flags.writeable = False
        labels.flags.writeable = False
        for p in parts:
            p.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "partition", parts)

    @property
    def n_nodes(self) -> int:
        return len(self.partition)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def samples_per_node(self) -> int:
        return self.partition[0].size

    def node_samples(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.partition[node]
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True)
class ObjectiveProfile:
    """Smoothness / gradient-bound / gradient-variance constants for diagnostics."""

    smoothness_l: float
    grad_bound_g: float
    noise_var: float

    def __post_init__(self) -> None:
        if min(self.smoothness_l, self.grad_bound_g, self.noise_var) < 0.0:
            raise DomainError("profile constants must be nonnegative")


@dataclass(frozen=True)
class ClipConfig:
    """Per-coordinate magnitude bound applied to stochastic gradients."""

    bound: float

    def __post_init__(self) -> None:
        if self.bound <= 0.0:
            raise DomainError("clip bound must be positive")


def clip_gradient(g: np.ndarray, cfg: ClipConfig) -> np.ndarray:
    """Clamp each coordinate to [-C, C], leaving already-bounded entries intact."""
    g = np.asarray(g, dtype=float)
    return np.sign(g) * np.minimum(np.abs(g), cfg.bound)


class QuadraticObjective:
    """Per-sample loss 0.5 * ||x - c||^2 with the sample c as the target."""

    id = "quadratic"

    def __init__(self, dim: int):
        self.dim = dim

    def loss_and_grad(self, x: np.ndarray, features: np.ndarray, labels: np.ndarray):
        diffs = x[None, :] - features
        loss = 0.5 * float(np.mean(np.sum(diffs * diffs, axis=1)))
        return loss, diffs.mean(axis=0)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # logsumexp keeps the loss exact (and unbounded) for badly diverged models.
    top = logits.max(axis=1)
    lse = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(labels.size), labels]))


class MulticlassLogistic:
    """Softmax regression; parameters are the flattened (weights, bias)."""

    id = "mlr"

    def __init__(self, n_features: int, n_classes: int):
        self.n_features = n_features
        self.n_classes = n_classes
        self.dim = n_classes * (n_features + 1)

    def _unpack(self, x: np.ndarray):
        k, q = self.n_classes, self.n_features
        return x[: k * q].reshape(k, q), x[k * q :]

    def loss_and_grad(self, x: np.ndarray, features: np.ndarray, labels: np.ndarray):
        w, b = self._unpack(x)
        y = labels.astype(np.int64)
        logits = features @ w.T + b
        loss = _cross_entropy_from_logits(logits, y)
        dz = _softmax_rows(logits)
        dz[np.arange(y.size), y] -= 1.0
        dz /= y.size
        return loss, np.concatenate([(dz.T @ features).ravel(), dz.sum(axis=0)])


class TanhMlp:
    """One hidden tanh layer followed by softmax cross-entropy."""

    id = "mlp"

    def __init__(self, n_features: int, n_classes: int, hidden: int = 16):
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden = hidden
        self.dim = hidden * (n_features + 1) + n_classes * (hidden + 1)

    def _unpack(self, x: np.ndarray):
        q, h, k = self.n_features, self.hidden, self.n_classes
        off = 0
        w1 = x[off : off + h * q].reshape(h, q)
        off += h * q
        b1 = x[off : off + h]
        off += h
        w2 = x[off : off + k * h].reshape(k, h)
        off += k * h
        b2 = x[off :]
        return w1, b1, w2, b2

    def loss_and_grad(self, x: np.ndarray, features: np.ndarray, labels: np.ndarray):
        w1, b1, w2, b2 = self._unpack(x)
        y = labels.astype(np.int64)
        hidden = np.tanh(features @ w1.T + b1)
        logits = hidden @ w2.T + b2
        loss = _cross_entropy_from_logits(logits, y)
        dz = _softmax_rows(logits)
        dz[np.arange(y.size), y] -= 1.0
        dz /= y.size
        dh = (dz @ w2) * (1.0 - hidden * hidden)
        grad = np.concatenate(
            [(dh.T @ features).ravel(), dh.sum(axis=0), (dz.T @ hidden).ravel(), dz.sum(axis=0)]
        )
        return loss, grad


OBJECTIVE_IDS = ("quadratic", "mlr", "mlp")


def make_objective(objective_id: str, dataset: Dataset, hidden: int = 16):
    """Instantiate an objective sized for the dataset."""
    if objective_id == "quadratic":
        return QuadraticObjective(dataset.n_features)
    if dataset.n_classes is None:
        raise DomainError(f"objective {objective_id!r} needs a classification dataset")
    if objective_id == "mlr":
        return MulticlassLogistic(dataset.n_features, dataset.n_classes)
    if objective_id == "mlp":
        return TanhMlp(dataset.n_features, dataset.n_classes, hidden)
    raise DomainError(f"unknown objective {objective_id!r}; expected one of {OBJECTIVE_IDS}")


def batch_size_for(tau: float, m: int) -> int:
    if not 0.0 < tau <= 1.0:
        raise DomainError("tau must lie in (0, 1]")
    return max(1, round(tau * m))


def draw_batch(dataset: Dataset, node: int, tau: float, seed: int, step: int) -> np.ndarray:
    """Uniform without-replacement batch of size max(1, round(tau * m))."""
    idx = dataset.partition[node]
    if idx.size == 0:
        raise EmptyPartition(f"node {node} holds no samples")
    size = batch_size_for(tau, idx.size)
    if size == idx.size:
        return idx
    gen = rng.stream(seed, rng.BATCH, node=node, step=step)
    return idx[gen.choice(idx.size, size=size, replace=False)]


def stochastic_gradient(
    objective,
    x: np.ndarray,
    dataset: Dataset,
    node: int,
    tau: float,
    seed: int,
    step: int,
    clip: ClipConfig | None = None,
) -> np.ndarray:
    """Unbiased gradient of the node-local objective on a fresh batch."""
    batch = draw_batch(dataset, node, tau, seed, step)
    _, grad = objective.loss_and_grad(x, dataset.features[batch], dataset.labels[batch])
    if clip is not None:
        grad = clip_gradient(grad, clip)
    return grad


def global_loss_and_grad(objective, x: np.ndarray, dataset: Dataset):
    """Full-data loss and gradient of the node sum f(x) = sum_i f_i(x)."""
    total_loss = 0.0
    total_grad = np.zeros(objective.dim)
    for node in range(dataset.n_nodes):
        feats, labels = dataset.node_samples(node)
        loss, grad = objective.loss_and_grad(x, feats, labels)
        total_loss += loss
        total_grad += grad
    return total_loss, total_grad


def partition_indices(
    n_samples: int, n_nodes: int, mode: str = "random", seed: int = 0
) -> tuple[np.ndarray, ...]:
    """Balanced split of sample indices across nodes (random or contiguous)."""
    if n_samples % n_nodes != 0:
        raise DomainError(
            f"{n_samples} samples cannot be split evenly across {n_nodes} nodes"
        )
    if mode == "random":
        order = rng.stream(seed, rng.DATASET, node=0, step=1).permutation(n_samples)
    elif mode == "contiguous":
        order = np.arange(n_samples)
    else:
        raise DomainError("partition mode must be 'random' or 'contiguous'")
    return tuple(np.sort(part) for part in np.split(order, n_nodes))


def synth_quadratic(
    n_nodes: int,
    n_features: int,
    seed: int,
    samples_per_node: int = 1,
    scale: float = 1.0,
) -> Dataset:
    """Per-node targets drawn from scale * N(0, I); minimizer is their mean."""
    gen = rng.stream(seed, rng.DATASET, node=0, step=0)
    targets = scale * gen.normal(size=(n_nodes * samples_per_node, n_features))
    parts = partition_indices(targets.shape[0], n_nodes, mode="contiguous")
    return Dataset(targets, np.zeros(targets.shape[0]), parts)


def quadratic_dataset(targets: np.ndarray, n_nodes: int) -> Dataset:
    """Quadratic dataset from explicit targets, split contiguously."""
    targets = np.asarray(targets, dtype=float)
    parts = partition_indices(targets.shape[0], n_nodes, mode="contiguous")
    return Dataset(targets, np.zeros(targets.shape[0]), parts)


def synth_classification(
    n_classes: int,
    n_features: int,
    n_samples: int,
    seed: int,
    n_nodes: int = 1,
    partition: str = "random",
    class_sep: float = 2.0,
) -> Dataset:
    """Gaussian class blobs with round-robin labels; seed-deterministic."""
    gen = rng.stream(seed, rng.DATASET, node=0, step=0)
    means = class_sep * gen.normal(size=(n_classes, n_features)) / np.sqrt(n_features)
    labels = np.arange(n_samples) % n_classes
    feats = means[labels] + gen.normal(size=(n_samples, n_features))
    parts = partition_indices(n_samples, n_nodes, mode=partition, seed=seed)
    return Dataset(feats, labels.astype(float), parts, n_classes=n_classes)


def load_csv(
    path: str | Path, n_nodes: int = 1, partition: str = "contiguous", seed: int = 0
) -> Dataset:
    """Read rows of the form 'label, f1, ..., fq'."""
    csv_path = Path(path)
    labels: list[float] = []
    rows: list[list[float]] = []
    with csv_path.open(newline="") as handle:
        for row_no, row in enumerate(_csv.reader(handle), start=1):
            cells = [c.strip() for c in row if c.strip()]
            if not cells:
                continue
            try:
                values = [float(c) for c in cells]
            except ValueError:
                raise ParseError(f"{csv_path} row {row_no}: non-numeric cell in {row!r}")
            if len(values) < 2:
                raise ParseError(f"{csv_path} row {row_no}: need a label and features")
            if rows and len(values) - 1 != len(rows[0]):
                raise DimensionMismatch(
                    f"{csv_path} row {row_no}: expected {len(rows[0])} features, "
                    f"got {len(values) - 1}"
                )
            labels.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise ParseError(f"{csv_path}: no data rows")
    feats = np.array(rows)
    if not np.isfinite(feats).all():
        raise ParseError(f"{csv_path}: features must be finite")
    label_arr = np.array(labels)
    classes = None
    if np.all(label_arr == np.round(label_arr)) and label_arr.min() >= 0:
        classes = int(label_arr.max()) + 1
    parts = partition_indices(feats.shape[0], n_nodes, mode=partition, seed=seed)
    return Dataset(feats, label_arr, parts, n_classes=classes)


def estimate_profile(
    objective, dataset: Dataset, clip: ClipConfig | None = None, probes: int = 8, seed: int = 0
) -> ObjectiveProfile:
    """Analytic constants where available, probe-based estimates otherwise."""
    if isinstance(objective, QuadraticObjective):
        smoothness = 1.0
    elif isinstance(objective, MulticlassLogistic):
        # Softmax cross-entropy Hessian is bounded by I/2 in logit space.
        augmented = np.sum(dataset.features**2, axis=1) + 1.0
        smoothness = 0.5 * float(augmented.max())
    else:
        gen = rng.stream(seed, rng.DATASET, node=0, step=2)
        smoothness = 0.0
        for _ in range(probes):
            a = gen.normal(size=objective.dim)
            b = a + 1e-3 * gen.normal(size=objective.dim)
            _, ga = objective.loss_and_grad(a, dataset.features, dataset.labels)
            _, gb = objective.loss_and_grad(b, dataset.features, dataset.labels)
            smoothness = max(
                smoothness, float(np.linalg.norm(ga - gb) / np.linalg.norm(a - b))
            )
    if clip is not None:
        grad_bound = float(np.sqrt(objective.dim) * clip.bound)
    elif isinstance(objective, QuadraticObjective):
        grad_bound = float(np.max(np.linalg.norm(dataset.features, axis=1)))
    else:
        grad_bound = float(np.sqrt(objective.dim))
    noise_var = 0.0
    zero = np.zeros(objective.dim)
    for node in range(dataset.n_nodes):
        feats, labels = dataset.node_samples(node)
        if feats.shape[0] < 2:
            continue
        grads = np.stack(
            [objective.loss_and_grad(zero, feats[k : k + 1], labels[k : k + 1])[1]
             for k in range(feats.shape[0])]
        )
        noise_var = max(noise_var, float(np.mean(np.sum((grads - grads.mean(0)) ** 2, axis=1))))
    return ObjectiveProfile(smoothness, grad_bound, noise_var)
