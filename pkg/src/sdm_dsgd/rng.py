"""Counter-based random streams keyed by (run seed, purpose, node, iteration).

Every random draw in a simulation is made from a stream derived purely from
its key, so results are reproducible regardless of execution order or
parallelism. Streams use the Philox bit generator: the 128-bit key carries
(seed, purpose | node) and the iteration index is placed in the highest word
of the 256-bit counter, which spaces consecutive iterations 2**192 blocks
apart (no overlap for any realistic draw size).
"""

from __future__ import annotations

import threading

import numpy as np

# Stream purposes. Values must stay stable; they are part of the
# reproducibility contract.
GRAPH = 0
DATASET = 1
BATCH = 2
NOISE = 3
SPARSIFIER = 4
SWEEP = 5

_MASK64 = (1 << 64) - 1
_MAX_NODE = 1 << 48

_local = threading.local()


def _key_counter(seed: int, purpose: int, node: int, step: int):
    if not 0 <= node < _MAX_NODE:
        raise ValueError(f"node id {node} out of range for stream keying")
    return (
        (seed & _MASK64, ((purpose & 0xFFFF) << 48) | node),
        (0, 0, 0, step & _MASK64),
    )


def stream(seed: int, purpose: int, node: int = 0, step: int = 0) -> np.random.Generator:
    """Return a fresh generator for one (seed, purpose, node, step) key."""
    key, counter = _key_counter(seed, purpose, node, step)
    return np.random.Generator(
        np.random.Philox(
            key=np.array(key, dtype=np.uint64), counter=np.array(counter, dtype=np.uint64)
        )
    )


def _borrowed(seed: int, purpose: int, node: int, step: int) -> np.random.Generator:
    """Thread-local generator rewound to the requested key.

    Only for immediate, fully consumed draws inside this module's helpers;
    the handle must never escape (the next borrow rewrites its state).
    """
    try:
        bit_gen, gen, state = _local.philox
    except AttributeError:
        bit_gen = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        gen = np.random.Generator(bit_gen)
        state = bit_gen.state
        _local.philox = (bit_gen, gen, state)
    key, counter = _key_counter(seed, purpose, node, step)
    state["state"]["key"][:] = key
    state["state"]["counter"][:] = counter
    state["buffer_pos"] = 4
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bit_gen.state = state
    return gen


def uniforms(seed: int, purpose: int, node: int, step: int, size: int) -> np.ndarray:
    """Uniform [0,1) draws, identical to stream(...).random(size)."""
    return _borrowed(seed, purpose, node, step).random(size)


def normals(seed: int, purpose: int, node: int, step: int, size: int, scale: float) -> np.ndarray:
    """Gaussian draws, identical to stream(...).normal(0, scale, size)."""
    return _borrowed(seed, purpose, node, step).normal(0.0, scale, size)
