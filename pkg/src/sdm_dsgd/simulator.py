"""Full-run orchestration: topology, data, engine, metrics, and accounting.

Reported metrics per recorded iteration (at the gradient-evaluation state
x_t, with xbar the node average):

* loss           training loss (1/n) sum_i f_i(x_i), each node's local
                 objective at its own model; equals the node-averaged loss
                 at xbar when the nodes agree, and blows up when they do not
* grad_norm_sq   || (1/n) sum_i grad f_i(xbar) ||^2
* consensus_err  || x - xbar ||^2 over the full stack
* cum_nnz        cumulative transmitted non-zero entries
* cum_epsilon    privacy spend from the ledger (0 when accounting is off)

A run is declared diverged when the loss becomes non-finite or exceeds
DIVERGENCE_FACTOR times the initial loss. Evaluating the loss at the
per-node models (not only at xbar) is what makes consensus blow-ups
detectable: the exploding deviation modes have zero node-mean, so a loss
evaluated at xbar alone stays moderate while individual nodes overflow.
"""

from __future__ import annotations

import csv as _csv
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .algorithms import AlgorithmConfig, Engine, recommended_schedule
from .errors import ConfigError, DomainError
from .graph import (
    Topology,
    build_consensus_matrix,
    complete_topology,
    generate_erdos_renyi,
    load_edge_list,
    path_topology,
    ring_topology,
)
from .objectives import (
    ClipConfig,
    Dataset,
    estimate_profile,
    global_loss_and_grad,
    load_csv,
    make_objective,
    synth_classification,
    synth_quadratic,
)
from .privacy import PrivacyLedger, PrivacyParams, SIGMA2_FLOOR, per_iteration_rho
from .sparsifier import SparseVector

DIVERGENCE_FACTOR = 1e6
METRICS_HEADER = ("iter", "loss", "grad_norm_sq", "consensus_err", "cum_nnz", "cum_epsilon", "status")

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_ERROR = "error"


@dataclass(frozen=True)
class TopologySpec:
    kind: str
    nodes: int | None = None
    edge_prob: float | None = None
    path: str | None = None

    def build(self, seed: int) -> Topology:
        if self.kind == "erdos_renyi":
            return generate_erdos_renyi(self.nodes, self.edge_prob, seed)
        if self.kind == "ring":
            return ring_topology(self.nodes)
        if self.kind == "path":
            return path_topology(self.nodes)
        if self.kind == "complete":
            return complete_topology(self.nodes)
        if self.kind == "edge_list":
            return load_edge_list(self.path)
        raise ConfigError(f"unknown topology kind {self.kind!r}")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    classes: int | None = None
    features: int | None = None
    samples: int | None = None
    samples_per_node: int = 1
    scale: float = 1.0
    path: str | None = None
    partition: str = "random"

    def build(self, seed: int, n_nodes: int) -> Dataset:
        if self.kind == "classification":
            return synth_classification(
                self.classes, self.features, self.samples, seed,
                n_nodes=n_nodes, partition=self.partition,
            )
        if self.kind == "quadratic":
            return synth_quadratic(
                n_nodes, self.features, seed,
                samples_per_node=self.samples_per_node, scale=self.scale,
            )
        if self.kind == "csv":
            return load_csv(self.path, n_nodes=n_nodes, partition=self.partition, seed=seed)
        raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ObjectiveSpec:
    id: str = "quadratic"
    hidden: int = 16


@dataclass(frozen=True)
class PrivacySpec:
    delta: float
    epsilon_target: float
    sensitivity_g: float | None = None
    accounting: str = "expected"
    alpha_mode: str = "plus"


@dataclass(frozen=True)
class RunConfig:
    topology: TopologySpec
    dataset: DatasetSpec
    objective: ObjectiveSpec
    algorithm: AlgorithmConfig
    iterations: int
    seed: int
    privacy: PrivacySpec | None = None
    metric_stride: int = 1
    comm_counting_mode: str = "per_edge"

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if self.metric_stride < 1:
            raise ConfigError("metric_stride must be at least 1")
        if self.comm_counting_mode not in ("per_edge", "per_broadcast"):
            raise ConfigError("comm_counting_mode must be per_edge or per_broadcast")

    def to_dict(self) -> dict:
        out = asdict(self)
        clip = self.algorithm.clip
        out["algorithm"]["clip"] = None if clip is None else clip.bound
        return out

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        def section(name, cls, required=True):
            sub = raw.get(name)
            if sub is None:
                if required:
                    raise ConfigError(f"missing config section {name!r}")
                return None
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            try:
                return cls(**sub)
            except TypeError as exc:
                raise ConfigError(f"config section {name!r}: {exc}") from exc

        algo_raw = dict(raw.get("algorithm") or {})
        clip = algo_raw.get("clip")
        if clip is not None and not isinstance(clip, ClipConfig):
            algo_raw["clip"] = ClipConfig(float(clip))
        try:
            algorithm = AlgorithmConfig(**algo_raw)
        except TypeError as exc:
            raise ConfigError(f"config section 'algorithm': {exc}") from exc
        known = {
            "topology", "dataset", "objective", "algorithm", "privacy",
            "iterations", "seed", "metric_stride", "comm_counting_mode",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return RunConfig(
            topology=section("topology", TopologySpec),
            dataset=section("dataset", DatasetSpec),
            objective=section("objective", ObjectiveSpec),
            algorithm=algorithm,
            privacy=section("privacy", PrivacySpec, required=False),
            iterations=int(raw.get("iterations", 0)),
            seed=int(raw.get("seed", 0)),
            metric_stride=int(raw.get("metric_stride", 1)),
            comm_counting_mode=raw.get("comm_counting_mode", "per_edge"),
        )


@dataclass
class MetricRecord:
    iteration: int
    loss: float
    grad_norm_sq: float
    consensus_err: float
    cum_nnz: int
    cum_epsilon: float
    status: str
    wall_time: float = 0.0


@dataclass
class RunResult:
    records: list[MetricRecord]
    status: str
    min_grad_norm_sq: float
    final_loss: float
    initial_loss: float
    privacy_valid: bool | None
    wall_time: float
    resolved: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return self.status == STATUS_DIVERGED


def count_transmission(
    transmitted: tuple[SparseVector, ...] | list[SparseVector],
    topology: Topology,
    mode: str = "per_edge",
) -> int:
    """Non-zero entries released this round, unicast (per_edge) or broadcast."""
    if mode == "per_broadcast":
        return sum(sv.nnz for sv in transmitted)
    if mode == "per_edge":
        degrees = topology.degrees()
        return sum(sv.nnz * int(degrees[i]) for i, sv in enumerate(transmitted))
    raise DomainError("mode must be per_edge or per_broadcast")


def _resolve_privacy(config: RunConfig, dataset: Dataset, dim: int) -> PrivacyParams | None:
    spec = config.privacy
    if spec is None:
        return None
    algo = config.algorithm
    if algo.sigma2 <= 0.0:
        raise ConfigError("privacy accounting needs algorithm.sigma2 > 0")
    sensitivity = spec.sensitivity_g
    if sensitivity is None:
        if algo.clip is None:
            raise ConfigError("privacy.sensitivity_g is required when clipping is off")
        sensitivity = float(np.sqrt(dim) * algo.clip.bound)
    return PrivacyParams(
        sigma2=algo.sigma2,
        tau=algo.tau,
        sensitivity_g=sensitivity,
        local_samples_m=dataset.samples_per_node,
        transmit_prob_p=algo.transmit_prob,
        delta=spec.delta,
        epsilon_target=spec.epsilon_target,
        accounting=spec.accounting,
        alpha_mode=spec.alpha_mode,
    )


def run(config: RunConfig) -> RunResult:
    """Execute one configured run and collect its metric records."""
    start = time.perf_counter()
    topology = config.topology.build(config.seed)
    w = build_consensus_matrix(topology)
    dataset = config.dataset.build(config.seed, topology.node_count)
    objective = make_objective(config.objective.id, dataset, hidden=config.objective.hidden)
    profile = estimate_profile(objective, dataset, clip=config.algorithm.clip)

    algo = config.algorithm
    if algo.schedule == "recommended":
        theta, gamma = recommended_schedule(
            algo.transmit_prob,
            w.spectral.lambda_min,
            profile.smoothness_l,
            topology.node_count,
            config.iterations,
            c=algo.schedule_c,
        )
        algo = algo.with_schedule(theta, gamma)

    params = _resolve_privacy(config, dataset, objective.dim)
    ledger = None
    rho_iter = 0.0
    privacy_valid: bool | None = None
    if params is not None:
        privacy_valid = params.sigma2 >= SIGMA2_FLOOR
        if privacy_valid:
            alpha = params.renyi_order()
            ledger = PrivacyLedger(alpha)
            rho_iter = per_iteration_rho(
                params, alpha, reversed_order=(algo.variant == "alt_design")
            )

    engine = Engine(
        w, objective, dataset, algo, config.seed, smoothness=profile.smoothness_l
    )
    n = topology.node_count

    def metrics_at(x: np.ndarray) -> tuple[float, float, float]:
        xbar = x.mean(axis=0)
        _, grad = global_loss_and_grad(objective, xbar, dataset)
        local_loss = 0.0
        for i in range(n):
            feats, labels = dataset.node_samples(i)
            local_loss += objective.loss_and_grad(x[i], feats, labels)[0]
        consensus = float(np.sum((x - xbar[None, :]) ** 2))
        avg_grad = grad / n
        return local_loss / n, float(avg_grad @ avg_grad), consensus

    initial_loss, _, _ = metrics_at(np.zeros((n, objective.dim)))
    divergence_cap = DIVERGENCE_FACTOR * max(abs(initial_loss), 1.0)

    records: list[MetricRecord] = []
    status = STATUS_OK
    cum_nnz = 0
    min_grad = float("inf")
    final_loss = initial_loss

    with np.errstate(all="ignore"):
        for t in range(1, config.iterations + 1):
            step = engine.step()
            cum_nnz += count_transmission(step.transmitted, topology, config.comm_counting_mode)
            if ledger is not None:
                ledger.compose(rho_iter)
            if t % config.metric_stride == 0 or t == config.iterations:
                loss, grad_norm_sq, consensus = metrics_at(step.x_at_grad)
                diverged = not np.isfinite(loss) or loss > divergence_cap
                cum_eps = ledger.epsilon(params.delta) if ledger is not None else 0.0
                records.append(
                    MetricRecord(
                        iteration=t,
                        loss=loss,
                        grad_norm_sq=grad_norm_sq,
                        consensus_err=consensus,
                        cum_nnz=cum_nnz,
                        cum_epsilon=cum_eps,
                        status=STATUS_DIVERGED if diverged else STATUS_OK,
                        wall_time=time.perf_counter() - start,
                    )
                )
                final_loss = loss
                if np.isfinite(grad_norm_sq):
                    min_grad = min(min_grad, grad_norm_sq)
                if diverged:
                    status = STATUS_DIVERGED
                    break

    return RunResult(
        records=records,
        status=status,
        min_grad_norm_sq=min_grad,
        final_loss=final_loss,
        initial_loss=initial_loss,
        privacy_valid=privacy_valid,
        wall_time=time.perf_counter() - start,
        resolved={
            "theta": algo.theta,
            "gamma": algo.gamma,
            "transmit_prob": algo.transmit_prob,
            "sigma2": algo.sigma2,
            "tau": algo.tau,
            "variant": algo.variant,
            "nodes": n,
            "dim": objective.dim,
            "samples_per_node": dataset.samples_per_node,
            "smoothness": profile.smoothness_l,
        },
    )


def sweep(configs: list[tuple[str, RunConfig]]) -> list[tuple[str, RunResult | None, str | None]]:
    """Run each (id, config); failures are recorded and the sweep continues."""
    out: list[tuple[str, RunResult | None, str | None]] = []
    for config_id, config in configs:
        try:
            out.append((config_id, run(config), None))
        except Exception as exc:  # noqa: BLE001 - sweep must survive bad entries
            out.append((config_id, None, f"{type(exc).__name__}: {exc}"))
    return out


def record_at_budget(
    records: list[MetricRecord],
    nnz_budget: int | None = None,
    epsilon_budget: float | None = None,
) -> MetricRecord | None:
    """Last record whose cumulative counters fit within the given budgets."""
    chosen = None
    for rec in records:
        if nnz_budget is not None and rec.cum_nnz > nnz_budget:
            break
        if epsilon_budget is not None and rec.cum_epsilon > epsilon_budget:
            break
        chosen = rec
    return chosen


def write_metrics_csv(records: list[MetricRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(METRICS_HEADER)
        for rec in records:
            writer.writerow(
                [
                    rec.iteration,
                    repr(rec.loss),
                    repr(rec.grad_norm_sq),
                    repr(rec.consensus_err),
                    rec.cum_nnz,
                    repr(rec.cum_epsilon),
                    rec.status,
                ]
            )


def write_sweep_csv(results: list[tuple[str, RunResult | None, str | None]], path: str | Path) -> None:
    """Long-format CSV: one row per (config, recorded iteration)."""
    with Path(path).open("w", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(("config_id",) + METRICS_HEADER)
        for config_id, result, error in results:
            if result is None:
                writer.writerow([config_id, 0, "", "", "", 0, "", f"{STATUS_ERROR}: {error}"])
                continue
            for rec in result.records:
                writer.writerow(
                    [
                        config_id,
                        rec.iteration,
                        repr(rec.loss),
                        repr(rec.grad_norm_sq),
                        repr(rec.consensus_err),
                        rec.cum_nnz,
                        repr(rec.cum_epsilon),
                        rec.status,
                    ]
                )
