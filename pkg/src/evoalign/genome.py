"""Architecture genomes: a plain stack of convolution and max-pooling layers.

Shapes follow valid (unpadded) convolution arithmetic,
``out = (in - kernel) // stride + 1``; pooling windows do not overlap
(stride equals kernel). A genome is valid for an input shape when every
gene is in range, Conv filter counts never decrease, the readout index
points at a layer, and every layer leaves a spatial map of at least 2x2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ParseError, SamplingExhausted
from .rng import draw_id

CONV = "Conv"
MAXPOOL = "MaxPool"
KINDS = (CONV, MAXPOOL)

CONV_KERNEL = (3, 11)
CONV_STRIDE = (1, 4)
CONV_FILTERS = (64, 512)
POOL_KERNEL = (2, 3)
MAX_DEPTH = 12
MIN_SIDE = 2
SAMPLING_ATTEMPTS = 1000

Shape = tuple[int, int, int]


@dataclass(frozen=True)
class LayerGene:
    kind: str
    kernel: int
    stride: int
    filters: int = 0

    @classmethod
    def conv(cls, kernel: int, stride: int, filters: int) -> "LayerGene":
        return cls(CONV, kernel, stride, filters)

    @classmethod
    def pool(cls, kernel: int) -> "LayerGene":
        return cls(MAXPOOL, kernel, kernel, 0)

    @property
    def is_conv(self) -> bool:
        return self.kind == CONV

    def range_problems(self) -> list[tuple[str, str]]:
        """(rule, message) pairs for every out-of-range field."""
        out = []
        if self.kind == CONV:
            for name, value, (lo, hi) in (
                ("kernel", self.kernel, CONV_KERNEL),
                ("stride", self.stride, CONV_STRIDE),
                ("filters", self.filters, CONV_FILTERS),
            ):
                if not lo <= value <= hi:
                    out.append(("range", f"Conv {name}={value} outside [{lo}, {hi}]"))
        elif self.kind == MAXPOOL:
            lo, hi = POOL_KERNEL
            if not lo <= self.kernel <= hi:
                out.append(("range", f"MaxPool kernel={self.kernel} outside [{lo}, {hi}]"))
            if self.stride != self.kernel:
                out.append(("pool_stride", f"MaxPool stride={self.stride} != kernel={self.kernel}"))
            if self.filters != 0:
                out.append(("pool_filters", f"MaxPool filters={self.filters} must be 0"))
        else:
            out.append(("kind", f"unknown layer kind {self.kind!r}"))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride, "filters": self.filters}

    def short(self) -> str:
        if self.kind == CONV:
            return f"C{self.kernel}s{self.stride}f{self.filters}"
        return f"P{self.kernel}"


@dataclass(frozen=True)
class Lineage:
    parents: tuple[int, ...] = ()
    operator: str = "random"

    def to_dict(self) -> dict[str, Any]:
        return {"parents": list(self.parents), "operator": self.operator}


@dataclass(frozen=True)
class Genome:
    """Immutable architecture description; ``readout`` selects the feature layer."""

    layers: tuple[LayerGene, ...]
    readout: int
    id: int
    lineage: Lineage | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.layers, tuple):
            object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def conv_filters(self) -> list[int]:
        return [g.filters for g in self.layers if g.is_conv]

    def describe(self) -> str:
        return "-".join(g.short() for g in self.layers) + f"@{self.readout}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "readout": self.readout,
            "lineage": None if self.lineage is None else self.lineage.to_dict(),
            "layers": [g.to_dict() for g in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Any, where: str = "genome") -> "Genome":
        return _genome_from_dict(d, where)


@dataclass(frozen=True)
class Violation:
    layer: int | None
    rule: str
    message: str

    def __str__(self) -> str:
        at = "genome" if self.layer is None else f"layer {self.layer}"
        return f"{at}: {self.rule}: {self.message}"


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}


@dataclass(frozen=True)
class ShapeTrace:
    input_shape: Shape
    shapes: tuple[Shape, ...]
    readout: int
    feature_lengths: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature_lengths", tuple(c * h * w for c, h, w in self.shapes))

    @property
    def readout_length(self) -> int:
        return self.feature_lengths[self.readout]


def layer_output(gene: LayerGene, shape: Shape) -> Shape:
    c, h, w = shape
    oh = (h - gene.kernel) // gene.stride + 1
    ow = (w - gene.kernel) // gene.stride + 1
    # A window larger than the map yields nothing.
    oh, ow = max(oh, 0), max(ow, 0)
    return (gene.filters if gene.is_conv else c, oh, ow)


def output_shape(genome: Genome, input_shape: Sequence[int]) -> ShapeTrace:
    shape: Shape = tuple(int(v) for v in input_shape)  # type: ignore[assignment]
    shapes = []
    for gene in genome.layers:
        shape = layer_output(gene, shape)
        shapes.append(shape)
    return ShapeTrace(tuple(input_shape), tuple(shapes), genome.readout)  # type: ignore[arg-type]


def validate(genome: Genome, input_shape: Sequence[int], max_depth: int = MAX_DEPTH) -> ValidationResult:
    """Check every structural rule; violations are returned, never raised."""
    out: list[Violation] = []
    if genome.depth < 1:
        out.append(Violation(None, "min_depth", "genome has no layers"))
    if genome.depth > max_depth:
        out.append(Violation(None, "max_depth", f"depth {genome.depth} exceeds {max_depth}"))
    if not 0 <= genome.readout < max(genome.depth, 1):
        out.append(Violation(None, "readout", f"readout {genome.readout} outside [0, {genome.depth})"))

    running = 0
    for i, gene in enumerate(genome.layers):
        out.extend(Violation(i, rule, msg) for rule, msg in gene.range_problems())
        if gene.is_conv:
            if gene.filters < running:
                out.append(Violation(i, "monotonic_filters", f"filters decrease from {running} to {gene.filters}"))
            running = max(running, gene.filters)

    if not any(v.rule == "kind" for v in out):
        shape = tuple(input_shape)
        for i, gene in enumerate(genome.layers):
            shape = layer_output(gene, shape)  # type: ignore[arg-type]
            if min(shape[1], shape[2]) < MIN_SIDE:
                out.append(Violation(i, "output_size", f"spatial output {shape[1]}x{shape[2]} smaller than {MIN_SIDE}x{MIN_SIDE}"))
                break
    return ValidationResult(tuple(out))


def truncate(genome: Genome, layer_index: int) -> Genome:
    """Prefix sub-network ending at ``layer_index``; keeps id and lineage."""
    if not 0 <= layer_index < genome.depth:
        raise IndexError(f"layer index {layer_index} outside [0, {genome.depth})")
    return Genome(genome.layers[: layer_index + 1], layer_index, genome.id, genome.lineage)


def param_count(genome: Genome, input_shape: Sequence[int]) -> int:
    channels = int(input_shape[0])
    total = 0
    for gene in genome.layers:
        if gene.is_conv:
            total += gene.filters * channels * gene.kernel**2 + gene.filters
            channels = gene.filters
    return total


def _sample_gene(rng: np.random.Generator, running: int, conv_prob: float,
                 first_filters: tuple[int, int], growth: float) -> LayerGene:
    if rng.random() < conv_prob:
        kernel = int(rng.integers(CONV_KERNEL[0], CONV_KERNEL[1] + 1))
        stride = int(rng.integers(CONV_STRIDE[0], CONV_STRIDE[1] + 1))
        if running == 0:
            lo, hi = first_filters
        else:
            lo, hi = running, min(CONV_FILTERS[1], max(running, int(running * growth)))
        filters = int(rng.integers(lo, hi + 1))
        return LayerGene.conv(kernel, stride, filters)
    return LayerGene.pool(int(rng.integers(POOL_KERNEL[0], POOL_KERNEL[1] + 1)))


def random_genome(
    rng: np.random.Generator,
    depth_range: tuple[int, int],
    input_shape: Sequence[int],
    *,
    max_depth: int = MAX_DEPTH,
    conv_prob: float = 0.6,
    first_filters: tuple[int, int] = (64, 128),
    growth: float = 2.0,
    layer_tries: int = 20,
) -> Genome:
    """Sample a valid genome layer by layer.

    Each layer is resampled up to ``layer_tries`` times until its output map
    stays at least 2x2; Conv filter counts are drawn upward from the running
    maximum so the stack is monotone by construction. Whole-genome attempts
    are capped at ``SAMPLING_ATTEMPTS``.

    Raises:
        SamplingExhausted: the input shape cannot host the requested depth.
    """
    lo, hi = depth_range
    if not 1 <= lo <= hi <= max_depth:
        raise ValueError(f"depth_range {depth_range} not within [1, {max_depth}]")
    if not CONV_FILTERS[0] <= first_filters[0] <= first_filters[1] <= CONV_FILTERS[1]:
        raise ValueError(f"first_filters {first_filters} outside {CONV_FILTERS}")
    input_shape = tuple(int(v) for v in input_shape)

    for _ in range(SAMPLING_ATTEMPTS):
        depth = int(rng.integers(lo, hi + 1))
        layers: list[LayerGene] = []
        shape = input_shape
        running = 0
        for _ in range(depth):
            for _ in range(layer_tries):
                gene = _sample_gene(rng, running, conv_prob, first_filters, growth)
                out = layer_output(gene, shape)  # type: ignore[arg-type]
                if min(out[1], out[2]) >= MIN_SIDE:
                    break
            else:
                break
            layers.append(gene)
            shape = out
            if gene.is_conv:
                running = gene.filters
        if len(layers) == depth:
            return Genome(tuple(layers), depth - 1, draw_id(rng), Lineage((), "random"))
    raise SamplingExhausted(
        f"no valid genome with depth in {depth_range} for input {input_shape} after {SAMPLING_ATTEMPTS} attempts"
    )


def repair_filters(layers: Iterable[LayerGene]) -> tuple[LayerGene, ...]:
    """Raise Conv filter counts that dip below the running maximum."""
    out = []
    running = 0
    for gene in layers:
        if gene.is_conv:
            if gene.filters < running:
                gene = LayerGene.conv(gene.kernel, gene.stride, min(running, CONV_FILTERS[1]))
            running = max(running, gene.filters)
        out.append(gene)
    return tuple(out)


# -- serialization -----------------------------------------------------------

def serialize(genome: Genome) -> str:
    return json.dumps(genome.to_dict(), separators=(",", ":"))


def deserialize(text: str) -> Genome:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return _genome_from_dict(d, "genome")


def _int_field(d: dict, key: str, where: str) -> int:
    if key not in d:
        raise ParseError(f"{where}: missing field {key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{where}.{key}: expected integer, got {v!r}")
    return v


def _genome_from_dict(d: Any, where: str) -> Genome:
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    extra = set(d) - {"id", "readout", "lineage", "layers"}
    if extra:
        raise ParseError(f"{where}: unknown field(s) {sorted(extra)}")
    gid = _int_field(d, "id", where)
    if not 0 <= gid < 1 << 64:
        raise ParseError(f"{where}.id: {gid} is not a 64-bit unsigned integer")
    readout = _int_field(d, "readout", where)

    if "lineage" not in d:
        raise ParseError(f"{where}: missing field 'lineage'")
    lin = d["lineage"]
    lineage = None
    if lin is not None:
        if not isinstance(lin, dict) or not isinstance(lin.get("operator"), str) \
                or not isinstance(lin.get("parents"), list):
            raise ParseError(f"{where}.lineage: expected {{parents: [...], operator: str}}")
        parents = []
        for p in lin["parents"]:
            if isinstance(p, bool) or not isinstance(p, int):
                raise ParseError(f"{where}.lineage.parents: expected integers, got {p!r}")
            parents.append(p)
        lineage = Lineage(tuple(parents), lin["operator"])

    raw_layers = d.get("layers")
    if not isinstance(raw_layers, list):
        raise ParseError(f"{where}: field 'layers' must be an array")
    if not raw_layers:
        raise ParseError(f"{where}.layers: at least one layer required")
    layers = []
    for i, item in enumerate(raw_layers):
        at = f"{where}.layers[{i}]"
        if not isinstance(item, dict):
            raise ParseError(f"{at}: expected an object")
        kind = item.get("kind")
        if kind not in KINDS:
            raise ParseError(f"{at}.kind: expected one of {KINDS}, got {kind!r}")
        gene = LayerGene(kind, _int_field(item, "kernel", at), _int_field(item, "stride", at),
                         _int_field(item, "filters", at))
        problems = gene.range_problems()
        if problems:
            raise ParseError(f"{at}: {problems[0][1]}")
        layers.append(gene)
    if not 0 <= readout < len(layers):
        raise ParseError(f"{where}.readout: {readout} outside [0, {len(layers)})")
    return Genome(tuple(layers), readout, gid, lineage)


def load_genome(path) -> Genome:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return deserialize(text)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def save_genome(genome: Genome, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(genome.to_dict(), indent=2) + "\n")
