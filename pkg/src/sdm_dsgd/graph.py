"""Network topologies and the consensus matrix with spectral diagnostics.

The consensus matrix is built from the graph Laplacian as
``W = I - (2 / (3 * lambda_max(L))) * L``. Under this rule W is symmetric,
doubly stochastic, has the sparsity pattern of the graph (plus a positive
diagonal), and every eigenvalue lies in [1/3, 1] with exactly one eigenvalue
equal to 1 on a connected graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConnectivityFailure, DomainError, ParseError
from . import rng

DOUBLY_STOCHASTIC_TOL = 1e-10

Edge = tuple[int, int]


@dataclass(frozen=True, eq=False)
class Topology:
    """Undirected, connected graph on nodes 0..node_count-1."""

    node_count: int
    edges: frozenset[Edge]
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        if self.node_count < 2:
            raise DomainError("topology needs at least 2 nodes")
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.shape != (self.node_count, self.node_count):
            raise DomainError("adjacency shape does not match node count")
        if adj.diagonal().any():
            raise DomainError("self-loops are not allowed")
        if not np.array_equal(adj, adj.T):
            raise DomainError("adjacency must be symmetric")
        if not _is_connected(adj):
            raise DomainError("topology must be connected")
        adj.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    def neighbors(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[node])


@dataclass(frozen=True, eq=False)
class SpectralProfile:
    """Eigenvalues of a consensus matrix, sorted descending."""

    eigenvalues: np.ndarray
    beta: float
    lambda_min: float

    def __post_init__(self) -> None:
        ev = np.asarray(self.eigenvalues, dtype=float)
        ev.flags.writeable = False
        object.__setattr__(self, "eigenvalues", ev)


@dataclass(frozen=True, eq=False)
class ConsensusMatrix:
    """Symmetric doubly stochastic mixing matrix plus its spectral profile."""

    entries: np.ndarray
    spectral: SpectralProfile

    def __post_init__(self) -> None:
        w = np.asarray(self.entries, dtype=float)
        w.flags.writeable = False
        object.__setattr__(self, "entries", w)

    @property
    def node_count(self) -> int:
        return self.entries.shape[0]


def _is_connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    return bool(seen.all())


def _adjacency_from_edges(n: int, edges: set[Edge]) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    for i, j in edges:
        adj[i, j] = True
        adj[j, i] = True
    return adj


def topology_from_edges(node_count: int, edges) -> Topology:
    """Build a topology from an iterable of node pairs (either orientation)."""
    normalized: set[Edge] = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i == j:
            raise DomainError(f"self-loop ({i},{j}) not allowed")
        if not (0 <= i < node_count and 0 <= j < node_count):
            raise DomainError(f"edge ({i},{j}) out of range for {node_count} nodes")
        normalized.add((min(i, j), max(i, j)))
    adj = _adjacency_from_edges(node_count, normalized)
    return Topology(node_count, frozenset(normalized), adj)


def generate_erdos_renyi(
    n: int, edge_prob: float, seed: int, max_attempts: int = 1000
) -> Topology:
    """Sample a connected Erdos-Renyi graph, resampling until connected.

    Each attempt uses a sub-stream derived from (seed, attempt), so the
    result is deterministic in (n, edge_prob, seed).
    """
    if n < 2:
        raise DomainError("n must be at least 2")
    if not 0.0 < edge_prob <= 1.0:
        raise DomainError("edge_prob must lie in (0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    for attempt in range(max_attempts):
        gen = rng.stream(seed, rng.GRAPH, node=0, step=attempt)
        mask = gen.random(iu.size) < edge_prob
        edges = {(int(i), int(j)) for i, j in zip(iu[mask], ju[mask])}
        adj = _adjacency_from_edges(n, edges)
        if _is_connected(adj):
            return Topology(n, frozenset(edges), adj)
    raise ConnectivityFailure(
        f"no connected graph after {max_attempts} attempts "
        f"(n={n}, edge_prob={edge_prob}); increase edge_prob"
    )


def ring_topology(n: int) -> Topology:
    return topology_from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def path_topology(n: int) -> Topology:
    return topology_from_edges(n, [(i, i + 1) for i in range(n - 1)])


def complete_topology(n: int) -> Topology:
    return topology_from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def laplacian(topology: Topology) -> np.ndarray:
    adj = topology.adjacency.astype(float)
    return np.diag(adj.sum(axis=1)) - adj


def _spectral_profile(entries: np.ndarray) -> SpectralProfile:
    eigenvalues = np.linalg.eigvalsh(entries)[::-1]  # descending
    beta = float(max(abs(eigenvalues[1]), abs(eigenvalues[-1])))
    return SpectralProfile(eigenvalues, beta, float(eigenvalues[-1]))


def validate_consensus_matrix(
    entries: np.ndarray,
    topology: Topology | None = None,
    tol: float = DOUBLY_STOCHASTIC_TOL,
) -> None:
    """Raise DomainError unless the matrix satisfies the mixing-matrix contract."""
    w = np.asarray(entries, dtype=float)
    n = w.shape[0]
    if w.shape != (n, n):
        raise DomainError("consensus matrix must be square")
    if not np.array_equal(w, w.T):
        raise DomainError("consensus matrix must be exactly symmetric")
    if np.abs(w.sum(axis=0) - 1.0).max() > tol or np.abs(w.sum(axis=1) - 1.0).max() > tol:
        raise DomainError(f"rows/columns must sum to 1 within {tol}")
    eigenvalues = np.linalg.eigvalsh(w)
    if eigenvalues[0] <= -1.0 + tol or eigenvalues[-1] > 1.0 + tol:
        raise DomainError("eigenvalues must lie in (-1, 1]")
    if int((eigenvalues > 1.0 - 1e-8).sum()) != 1:
        raise DomainError("eigenvalue 1 must have multiplicity exactly 1")
    if topology is not None:
        off = ~np.eye(n, dtype=bool)
        pattern = w > 0
        if not np.array_equal(pattern & off, topology.adjacency):
            raise DomainError("off-diagonal sparsity must match the topology")


def build_consensus_matrix(topology: Topology) -> ConsensusMatrix:
    """Consensus matrix from the Laplacian rule, with full validation."""
    lap = laplacian(topology)
    lap_eigenvalues = np.linalg.eigvalsh(lap)
    lam_max = float(lap_eigenvalues[-1])
    w = np.eye(topology.node_count) - (2.0 / (3.0 * lam_max)) * lap
    validate_consensus_matrix(w, topology)
    return ConsensusMatrix(w, _spectral_profile(w))


def consensus_from_matrix(entries: np.ndarray) -> ConsensusMatrix:
    """Wrap a directly supplied mixing matrix after validating the contract."""
    w = np.array(entries, dtype=float)
    validate_consensus_matrix(w)
    return ConsensusMatrix(w, _spectral_profile(w))


def mixed_matrix(w: ConsensusMatrix, theta: float) -> ConsensusMatrix:
    """Interpolated matrix (1-theta) I + theta W.

    Its eigenvalues are the affine images (1-theta) + theta * lambda of the
    originals, so the profile is recomputed by that map rather than a fresh
    decomposition.
    """
    if not 0.0 < theta <= 1.0:
        raise DomainError("theta must lie in (0, 1]")
    n = w.node_count
    entries = (1.0 - theta) * np.eye(n) + theta * w.entries
    eigenvalues = (1.0 - theta) + theta * w.spectral.eigenvalues
    beta = float(max(abs(eigenvalues[1]), abs(eigenvalues[-1])))
    profile = SpectralProfile(eigenvalues, beta, float(eigenvalues[-1]))
    return ConsensusMatrix(entries, profile)


def save_edge_list(topology: Topology, path: str | Path) -> None:
    """Write the edge-list text format: first line N, then one 'i j' per line."""
    lines = [str(topology.node_count)]
    lines += [f"{i} {j}" for i, j in sorted(topology.edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_edge_list(path: str | Path) -> Topology:
    """Read the edge-list text format written by save_edge_list."""
    text_path = Path(path)
    raw = text_path.read_text().splitlines()
    rows = [(k, line.strip()) for k, line in enumerate(raw, start=1) if line.strip()]
    if not rows:
        raise ParseError(f"{text_path}: empty graph file")
    first_row, header = rows[0]
    try:
        n = int(header)
    except ValueError:
        raise ParseError(f"{text_path} row {first_row}: expected node count, got {header!r}")
    edges = []
    for row, line in rows[1:]:
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{text_path} row {row}: expected 'i j', got {line!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ParseError(f"{text_path} row {row}: non-integer node id in {line!r}")
    try:
        return topology_from_edges(n, edges)
    except DomainError as exc:
        raise ParseError(f"{text_path}: {exc}") from exc
