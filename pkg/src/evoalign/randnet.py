"""Random-weight forward passes.

Conv weights are Kaiming-uniform with ReLU gain, ``U(-b, b)`` with
``b = sqrt(2) * sqrt(3 / fan_in)``, biases are zero. Every layer draws from
its own splitmix64 stream keyed by (seed, genome id, layer index), so
truncating a genome leaves the weights of the kept layers untouched.

Convolution is valid cross-correlation computed in float64; each layer's
output is stored as float32 and fed to the next layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .genome import Genome, LayerGene, output_shape
from .rng import uniform_block, weight_stream_seed

# Stimuli are pushed through the network in fixed-size blocks; the block size
# never changes so per-stimulus results do not depend on the batch.
BLOCK = 16
PATCH_BUDGET = 1 << 22
ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class ConvWeights:
    weight: np.ndarray  # (filters, in_channels, k, k) float64
    bias: np.ndarray  # (filters,)
    bound: float


@dataclass(frozen=True)
class WeightSet:
    seed: int
    genome_id: int
    in_channels: int
    layers: dict[int, ConvWeights]


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray  # (stimuli, features) float32
    layer: int
    genome_id: int
    seed: int


def kaiming_bound(fan_in: int) -> float:
    return math.sqrt(2.0) * math.sqrt(3.0 / fan_in)


def init_weights(genome: Genome, seed: int, in_channels: int = 3, trial_index: int = 0) -> WeightSet:
    layers = {}
    channels = in_channels
    for i, gene in enumerate(genome.layers):
        if not gene.is_conv:
            continue
        fan_in = channels * gene.kernel**2
        b = kaiming_bound(fan_in)
        n = gene.filters * fan_in
        u = uniform_block(weight_stream_seed(seed, genome.id, i, trial_index), n)
        w = ((2.0 * u - 1.0) * b).reshape(gene.filters, channels, gene.kernel, gene.kernel)
        layers[i] = ConvWeights(w, np.zeros(gene.filters), b)
        channels = gene.filters
    return WeightSet(seed, genome.id, in_channels, layers)


def conv2d(x: np.ndarray, cw: ConvWeights, stride: int) -> np.ndarray:
    """Valid cross-correlation of ``x`` (b, c, h, w) plus bias; float64 out.

    im2col over bands of output rows so the patch buffer stays below
    ``PATCH_BUDGET`` doubles; every output element is one dot product over
    (channel, row, col), independent of the banding.
    """
    f, c, k, _ = cw.weight.shape
    b, xc, h, w = x.shape
    if xc != c:
        raise ShapeMismatch(f"conv expects {c} input channels, got {xc}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    x = np.asarray(x, dtype=np.float64)
    wmat = cw.weight.reshape(f, c * k * k).T
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.empty((b, oh, ow, f))
    per_image = oh * ow * c * k * k
    if b * per_image <= PATCH_BUDGET:
        patch = windows.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)
        out[:] = (patch @ wmat).reshape(b, oh, ow, f)
    else:
        rows = max(1, PATCH_BUDGET // max(1, ow * c * k * k))
        for s in range(b):
            for r in range(0, oh, rows):
                patch = windows[s, :, r:r + rows].transpose(1, 2, 0, 3, 4).reshape(-1, c * k * k)
                out[s, r:r + rows] = (patch @ wmat).reshape(-1, ow, f)
    out += cw.bias
    return out.transpose(0, 3, 1, 2)


def maxpool2d(x: np.ndarray, kernel: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh, ow = h // kernel, w // kernel
    x = x[:, :, : oh * kernel, : ow * kernel]
    return x.reshape(b, c, oh, kernel, ow, kernel).max(axis=(3, 5))


def _apply(gene: LayerGene, cw: ConvWeights | None, x: np.ndarray, activation: str) -> np.ndarray:
    if gene.is_conv:
        y = conv2d(x, cw, gene.stride)
        if activation == "relu":
            np.maximum(y, 0.0, out=y)
        return y
    return maxpool2d(x, gene.kernel)


def _check(genome: Genome, weights: WeightSet, stimuli: np.ndarray, activation: str):
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    if stimuli.ndim != 4:
        raise ShapeMismatch(f"stimuli must be (n, C, H, W), got shape {stimuli.shape}")
    if stimuli.shape[1] != weights.in_channels:
        raise ShapeMismatch(f"stimuli have {stimuli.shape[1]} channels, weights expect {weights.in_channels}")
    if weights.genome_id != genome.id:
        raise ShapeMismatch(f"weights belong to genome {weights.genome_id}, not {genome.id}")
    trace = output_shape(genome, stimuli.shape[1:])
    for i, (_, h, w) in enumerate(trace.shapes):
        if h < 1 or w < 1:
            raise ShapeMismatch(f"layer {i} output collapses to {h}x{w} for input {stimuli.shape[1:]}")
    return trace


def forward(
    genome: Genome,
    weights: WeightSet,
    stimuli: np.ndarray,
    layers: Iterable[int] | None = None,
    activation: str = "relu",
) -> dict[int, FeatureMatrix]:
    """Flattened (channel, row, col) features for each requested layer.

    ``layers`` defaults to the genome's readout layer.
    """
    wanted = sorted(set([genome.readout] if layers is None else layers))
    if not wanted:
        return {}
    if wanted[0] < 0 or wanted[-1] >= genome.depth:
        raise ShapeMismatch(f"requested layers {wanted} outside genome depth {genome.depth}")
    trace = _check(genome, weights, stimuli, activation)
    n = stimuli.shape[0]
    out = {i: np.empty((n, trace.feature_lengths[i]), dtype=np.float32) for i in wanted}
    last = wanted[-1]
    for start in range(0, n, BLOCK):
        x = stimuli[start:start + BLOCK]
        for i in range(last + 1):
            gene = genome.layers[i]
            x = _apply(gene, weights.layers.get(i), x, activation).astype(np.float32)
            if i in out:
                out[i][start:start + x.shape[0]] = x.reshape(x.shape[0], -1)
    return {i: FeatureMatrix(out[i], i, genome.id, weights.seed) for i in wanted}


def extract_features(genome: Genome, seed: int, dataset, layer: int | None = None,
                     activation: str = "relu") -> FeatureMatrix:
    """init_weights + forward for a single layer (defaults to the readout).

    ``dataset`` may be a Dataset or a bare (n, C, H, W) stimulus array.
    """
    stimuli = getattr(dataset, "stimuli", dataset)
    weights = init_weights(genome, seed, in_channels=stimuli.shape[1])
    layer = genome.readout if layer is None else layer
    return forward(genome, weights, stimuli, [layer], activation)[layer]
