"""Decentralized update engines and their convergence diagnostics.

All variants share one round structure. At iteration t every node applies the
messages released at t-1 to its local copies, evaluates a (clipped, masked)
stochastic gradient at the refreshed state, forms

    y = (1 - theta) x + theta (W x - gamma (g + eta)),    d = y - x,

and releases a compressed version of d. Variants:

* ``sdm_dsgd``   mask the gradient with N(0, sigma2 I), transmit S(d).
* ``dc_dsgd``    the same with theta fixed at 1.
* ``alt_design`` no gradient mask; transmit S(d) + theta * gamma * noise on
                 the active coordinates only.
* ``dsgd``       direct state exchange (theta = 1, no compression); the
                 gradient mask is still available so privacy comparisons can
                 run all variants under one noise level.

Because every node applies the same released message deterministically, a
receiver's reconstruction of a neighbor equals the neighbor's true state
bit-for-bit; the engine can track explicit per-node copies to verify this.

The transmitted differential satisfies d = -theta (grad Lyap + gamma eta)
where Lyap(x) = 0.5 x^T (I - W~) x + gamma * sum_i f_i(x_i) is the penalized
objective whose SGD dynamics the update realizes. Recorded runs can be
replayed against that identity.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ScheduleViolation
from .graph import ConsensusMatrix
from .objectives import ClipConfig, Dataset, clip_gradient, draw_batch
from .sparsifier import SparseVector, SparsifierConfig, sparsify
from . import rng

VARIANTS = ("dsgd", "dc_dsgd", "sdm_dsgd", "alt_design")
SCHEDULES = ("fixed", "recommended")

TRACE_FORMAT = "sdm-dsgd-trace"
TRACE_VERSION = 1


@dataclass(frozen=True)
class AlgorithmConfig:
    variant: str
    theta: float = 1.0
    gamma: float = 0.1
    transmit_prob: float = 1.0
    sigma2: float = 0.0
    tau: float = 1.0
    clip: ClipConfig | None = None
    schedule: str = "fixed"
    schedule_c: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError("theta must lie in (0, 1]")
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")
        if not 0.0 < self.transmit_prob <= 1.0:
            raise ConfigError("transmit_prob must lie in (0, 1]")
        if self.sigma2 < 0.0:
            raise ConfigError("sigma2 must be nonnegative")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.variant == "dsgd" and (self.theta != 1.0 or self.transmit_prob != 1.0):
            raise ConfigError("dsgd requires theta = 1 and transmit_prob = 1")
        if self.variant == "dc_dsgd" and self.theta != 1.0:
            raise ConfigError("dc_dsgd fixes theta = 1")

    def with_schedule(self, theta: float, gamma: float) -> "AlgorithmConfig":
        return replace(self, theta=theta, gamma=gamma, schedule="fixed")


@dataclass
class NodeState:
    """One node's view: local copies and the latest differential."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    neighbor_copies: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Everything one iteration produced (arrays indexed by node)."""

    t: int
    x_at_grad: np.ndarray
    batches: tuple[np.ndarray, ...]
    grads: np.ndarray
    eta: np.ndarray
    masked_grads: np.ndarray
    d: np.ndarray
    transmitted: tuple[SparseVector, ...]


def theta_upper_bound(transmit_prob: float, lambda_min: float, gamma: float, smoothness: float) -> float:
    """Largest theta admitted by the convergence guarantee, 2p / (1 - lambda_n + gamma L).

    Unbounded when the denominator vanishes (a single node with a smooth-free
    objective has nothing to destabilize).
    """
    denominator = 1.0 - lambda_min + gamma * smoothness
    if denominator <= 0.0:
        return math.inf
    return 2.0 * transmit_prob / denominator


class Engine:
    """Barrier-synchronous simulator of one algorithm variant.

    Within a round the per-node updates depend only on the shared state from
    the previous round and on streams keyed by (seed, node, t), so any
    execution order (or parallel execution) yields identical results.
    """

    def __init__(
        self,
        w: ConsensusMatrix,
        objective,
        dataset: Dataset,
        config: AlgorithmConfig,
        seed: int,
        smoothness: float = 0.0,
        track_neighbor_copies: bool = False,
        record_trace: bool = False,
    ):
        if dataset.n_nodes != w.node_count:
            raise ConfigError("dataset partition and consensus matrix disagree on node count")
        self.w = w
        self.objective = objective
        self.dataset = dataset
        self.config = config
        self.seed = seed
        self.n = w.node_count
        self.dim = objective.dim
        self.t = 0
        self.x = np.zeros((self.n, self.dim))
        self._pending: tuple[SparseVector, ...] | None = None
        self._sparsifier = SparsifierConfig(config.transmit_prob, seed)
        self._noise_std = math.sqrt(config.sigma2)
        self._last_y = np.zeros((self.n, self.dim))
        self._last_d = np.zeros((self.n, self.dim))
        self.trace: list[StepRecord] | None = [] if record_trace else None
        self._copies = None
        if track_neighbor_copies:
            self._copies = [np.zeros((self.n, self.dim)) for _ in range(self.n)]
        bound = theta_upper_bound(
            config.transmit_prob, w.spectral.lambda_min, config.gamma, smoothness
        )
        if config.variant in ("sdm_dsgd", "dc_dsgd", "alt_design") and config.theta >= bound:
            warnings.warn(
                f"theta={config.theta} is not below the convergence bound {bound:.4g}; "
                "the run may diverge",
                RuntimeWarning,
                stacklevel=2,
            )

    def _apply_pending(self) -> None:
        if self._pending is None:
            return
        for i, sv in enumerate(self._pending):
            self.x[i] += sv.to_dense()
        if self._copies is not None:
            for copies in self._copies:
                for i, sv in enumerate(self._pending):
                    copies[i] += sv.to_dense()
        self._pending = None

    def _noise(self, node: int, step: int) -> np.ndarray:
        if self._noise_std == 0.0:
            return np.zeros(self.dim)
        return rng.normals(self.seed, rng.NOISE, node, step, self.dim, self._noise_std)

    def step(self) -> StepRecord:
        """Run one full round and return what it computed and released."""
        cfg = self.config
        self.t += 1
        t = self.t
        self._apply_pending()
        x_at = self.x.copy()

        grads = np.zeros((self.n, self.dim))
        eta = np.zeros((self.n, self.dim))
        batches = []
        for i in range(self.n):
            batch = draw_batch(self.dataset, i, cfg.tau, self.seed, t)
            batches.append(batch)
            _, g = self.objective.loss_and_grad(
                self.x[i], self.dataset.features[batch], self.dataset.labels[batch]
            )
            if cfg.clip is not None:
                g = clip_gradient(g, cfg.clip)
            grads[i] = g
            if cfg.variant != "alt_design":
                eta[i] = self._noise(i, t)

        masked = grads + eta
        mixed = self.w.entries @ self.x
        y = (1.0 - cfg.theta) * self.x + cfg.theta * (mixed - cfg.gamma * masked)
        d = y - self.x
        self._last_y = y
        self._last_d = d

        if cfg.variant == "dsgd":
            self.x = y.copy()
            if self._copies is not None:
                for copies in self._copies:
                    copies[:] = y
            transmitted = tuple(
                SparseVector(self.dim, np.arange(self.dim, dtype=np.int64), y[i].copy())
                for i in range(self.n)
            )
        else:
            messages = []
            for i in range(self.n):
                sv = sparsify(d[i], self._sparsifier, node=i, step=t)
                if cfg.variant == "alt_design" and cfg.sigma2 > 0.0:
                    noise = self._noise(i, t)
                    noise_masked = np.zeros(self.dim)
                    noise_masked[sv.active_indices] = noise[sv.active_indices]
                    eta[i] = noise_masked
                    sv = SparseVector(
                        self.dim,
                        sv.active_indices,
                        sv.values + cfg.theta * cfg.gamma * noise[sv.active_indices],
                    )
                messages.append(sv)
            transmitted = tuple(messages)
            self._pending = transmitted

        record = StepRecord(
            t=t,
            x_at_grad=x_at,
            batches=tuple(batches),
            grads=grads,
            eta=eta,
            masked_grads=masked,
            d=d,
            transmitted=transmitted,
        )
        if self.trace is not None:
            self.trace.append(record)
        return record

    def node_state(self, node: int) -> NodeState:
        copies: dict[int, np.ndarray] = {}
        source = self._copies[node] if self._copies is not None else self.x
        for j in np.flatnonzero(self.w.entries[node] > 0):
            if j != node:
                copies[int(j)] = source[int(j)].copy()
        return NodeState(
            x=self.x[node].copy(),
            y=self._last_y[node].copy(),
            d=self._last_d[node].copy(),
            neighbor_copies=copies,
        )

    def neighbor_copy_errors(self) -> float:
        """Max abs difference between tracked copies and true states (0 expected)."""
        if self._copies is None:
            raise ConfigError("engine was not built with track_neighbor_copies")
        return max(
            float(np.max(np.abs(copies - self.x))) for copies in self._copies
        )


def lyapunov_value_and_grad(
    x: np.ndarray,
    w: ConsensusMatrix,
    gamma: float,
    objective,
    dataset: Dataset,
    batches: tuple[np.ndarray, ...] | None = None,
    clip: ClipConfig | None = None,
):
    """Penalized objective 0.5 x^T (I - W~) x + gamma * sum_i f_i and its gradient.

    ``x`` is the (n, d) stack of node states; the Kronecker-lifted mixing
    matrix is applied blockwise. When ``batches`` is given the node losses are
    evaluated on those samples (the stochastic version used by replay).
    """
    x = np.asarray(x, dtype=float)
    n = w.node_count
    if x.ndim == 1:
        x = x.reshape(n, -1)
    if x.shape != (n, objective.dim):
        raise DomainError(f"x must have shape ({n}, {objective.dim})")
    mix_residual = x - w.entries @ x
    value = 0.5 * float(np.sum(x * mix_residual))
    grad = mix_residual.copy()
    for i in range(n):
        if batches is None:
            feats, labels = dataset.node_samples(i)
        else:
            feats = dataset.features[batches[i]]
            labels = dataset.labels[batches[i]]
        loss, g = objective.loss_and_grad(x[i], feats, labels)
        if clip is not None:
            g = clip_gradient(g, clip)
        value += gamma * loss
        grad[i] += gamma * g
    return value, grad


def replay_residuals(
    records,
    w: ConsensusMatrix,
    objective,
    dataset: Dataset,
    theta: float,
    gamma: float,
    clip: ClipConfig | None = None,
) -> np.ndarray:
    """Max-abs residual of d + theta (grad Lyap + gamma eta) per recorded round."""
    residuals = []
    for rec in records:
        _, grad = lyapunov_value_and_grad(
            rec.x_at_grad, w, gamma, objective, dataset, batches=rec.batches, clip=clip
        )
        residual = rec.d + theta * (grad + gamma * rec.eta)
        residuals.append(float(np.max(np.abs(residual))))
    return np.array(residuals)


def save_trace(records, path: str | Path, header_extra: dict | None = None) -> None:
    """Write records as line-delimited JSON with a versioned header line."""
    header = {"format": TRACE_FORMAT, "version": TRACE_VERSION}
    if header_extra:
        header.update(header_extra)
    with Path(path).open("w") as handle:
        handle.write(json.dumps(header) + "\n")
        for rec in records:
            handle.write(
                json.dumps(
                    {
                        "t": rec.t,
                        "x": rec.x_at_grad.tolist(),
                        "batches": [b.tolist() for b in rec.batches],
                        "grads": rec.grads.tolist(),
                        "eta": rec.eta.tolist(),
                        "d": rec.d.tolist(),
                        "active": [sv.active_indices.tolist() for sv in rec.transmitted],
                        "values": [sv.values.tolist() for sv in rec.transmitted],
                    }
                )
                + "\n"
            )


def load_trace(path: str | Path) -> tuple[dict, list[StepRecord]]:
    """Read a trace file back into (header, records)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DomainError(f"{path}: empty trace file")
    header = json.loads(lines[0])
    if header.get("format") != TRACE_FORMAT:
        raise DomainError(f"{path}: not a {TRACE_FORMAT} file")
    if header.get("version") != TRACE_VERSION:
        raise DomainError(f"{path}: unsupported trace version {header.get('version')}")
    records = []
    for line in lines[1:]:
        raw = json.loads(line)
        x = np.array(raw["x"])
        dim = x.shape[1]
        records.append(
            StepRecord(
                t=raw["t"],
                x_at_grad=x,
                batches=tuple(np.array(b, dtype=np.int64) for b in raw["batches"]),
                grads=np.array(raw["grads"]),
                eta=np.array(raw["eta"]),
                masked_grads=np.array(raw["grads"]) + np.array(raw["eta"]),
                d=np.array(raw["d"]),
                transmitted=tuple(
                    SparseVector(dim, np.array(idx, dtype=np.int64), np.array(vals))
                    for idx, vals in zip(raw["active"], raw["values"])
                ),
            )
        )
    return header, records


def recommended_schedule(
    transmit_prob: float,
    lambda_min: float,
    smoothness: float,
    n_nodes: int,
    iterations: int,
    gamma: float | None = None,
    c: float = 1.0,
) -> tuple[float, float]:
    """Step parameters theta = min(p/(1 - lambda_n + gamma L), p/2) and
    gamma = c sqrt(n log T / T)."""
    if iterations < 2:
        raise DomainError("iterations must be at least 2")
    if gamma is None:
        gamma = c * math.sqrt(n_nodes * math.log(iterations) / iterations)
    theta = min(
        transmit_prob / (1.0 - lambda_min + gamma * smoothness), transmit_prob / 2.0
    )
    return theta, gamma


@dataclass(frozen=True)
class ConvergenceBound:
    total: float
    term_i: float
    term_ii: float
    term_iii: float
    term_iv: float


def convergence_bound(
    *,
    c1: float,
    sigma_tilde2: float,
    m: int,
    tau: float,
    sigma2: float,
    n_nodes: int,
    dim: int,
    grad_bound: float,
    beta: float,
    lambda_min: float,
    smoothness: float,
    gamma: float,
    theta: float,
    transmit_prob: float,
    iterations: int,
    form: str = "per_iteration",
) -> ConvergenceBound:
    """Upper bound on min_t ||grad f(xbar_t)||^2, split into its four terms.

    ``form='per_iteration'`` evaluates the stated bound; ``form='sum'``
    evaluates the telescoped total over T rounds (the per-iteration form
    times T, displayed with the theta factors arranged differently).
    Diagnostic only, not a prediction.
    """
    n, p, L, T = n_nodes, transmit_prob, smoothness, iterations
    lipschitz = 1.0 - lambda_min + gamma * L
    denom = 2.0 * p - lipschitz * theta
    if denom <= 0.0:
        raise ScheduleViolation(
            f"theta={theta} must be below 2p/(1 - lambda_n + gamma L) = "
            f"{2.0 * p / lipschitz:.6g}"
        )
    c2 = n * sigma_tilde2 / (m * tau) + n * dim * sigma2
    c3 = (n * grad_bound) ** 2 + (n * dim) ** 2 * sigma2
    drop = 1.0 / p - 1.0
    if form == "per_iteration":
        term_i = 2.0 * c1 / (theta * gamma * T)
        term_ii = (2.0 * L * c3 / n) * (gamma / (1.0 - beta)) ** 2
        term_iii = (2.0 * theta * gamma**2 * L * c2 / (n * (1.0 - beta))) * drop + (
            L * theta * gamma * c2 / (n**2 * p)
        )
        term_iv = (2.0 * gamma * L / (n * (1.0 - beta)) + L / n**2) * drop * (
            2.0 * p * n * c1 / (denom * T) + lipschitz * theta**2 * gamma * c2 / denom
        )
    elif form == "sum":
        term_i = 2.0 * c1 / (theta * gamma)
        term_ii = (2.0 * T * L * c3 / n) * (gamma / (1.0 - beta)) ** 2
        term_iii = (2.0 * T * theta * gamma**2 * L * c2 / (n * (1.0 - beta))) * drop + (
            L * T * theta * gamma * c2 / (n**2 * p)
        )
        term_iv = (2.0 * theta * gamma * L / (n * (1.0 - beta)) + L * theta / n**2) * drop * (
            2.0 * p * n * c1 / (2.0 * p * theta - lipschitz * theta**2)
            + lipschitz * theta * gamma * T * c2 / denom
        )
    else:
        raise DomainError("form must be 'per_iteration' or 'sum'")
    return ConvergenceBound(term_i + term_ii + term_iii + term_iv, term_i, term_ii, term_iii, term_iv)
