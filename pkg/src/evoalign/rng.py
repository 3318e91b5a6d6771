"""Seed derivation and portable random streams.

Weight streams are generated with splitmix64 so that any implementation
using the same constants reproduces them bit for bit. Everything else
(evolutionary draws, stimulus noise) uses numpy's PCG64, seeded through
``derive_seed`` so labels never collide.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_C1 = 0xBF58476D1CE4E5B9
MIX_C2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 finalizer on a Python int (wrapped to 64 bits)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX_C1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_C2) & MASK64
    return z ^ (z >> 31)


def weight_stream_seed(seed: int, genome_id: int, layer_index: int, trial_index: int = 0) -> int:
    """Seed for the weight stream of one layer of one genome."""
    return mix64(
        (seed & MASK64) ^ mix64(genome_id) ^ mix64(layer_index) ^ mix64(trial_index)
    )


def splitmix64_block(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of a splitmix64 generator started at ``seed``.

    Output ``i`` (0-based) is ``mix(seed + (i + 1) * GOLDEN_GAMMA)``, which is
    what the sequential generator yields; computed vectorized in uint64.
    """
    with np.errstate(over="ignore"):
        z = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        z += np.uint64(seed & MASK64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_C1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_C2)
        z ^= z >> np.uint64(31)
    return z


def uniform_block(seed: int, count: int) -> np.ndarray:
    """``count`` float64 draws on [0, 1) from the top 53 bits of splitmix64."""
    bits = splitmix64_block(seed, count) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(master_seed: int, *labels: int | str) -> int:
    """Fold integer or string labels into a 64-bit seed."""
    s = mix64(master_seed & MASK64)
    for label in labels:
        if isinstance(label, str):
            v = 0
            for byte in label.encode("utf-8"):
                v = mix64(v ^ byte)
            label = v
        s = mix64(s ^ mix64(label & MASK64))
    return s


def make_rng(master_seed: int, *labels: int | str) -> np.random.Generator:
    """A PCG64 generator for a labelled sub-stream of ``master_seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *labels)))


def draw_id(rng: np.random.Generator) -> int:
    """A fresh 64-bit genome identifier."""
    return int(rng.integers(0, 1 << 64, dtype=np.uint64))
