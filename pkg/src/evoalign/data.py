"""Datasets on disk and the synthetic teacher-network generator.

``.evot`` tensor files::

    offset  size  field
    0       4     magic b"EVOT"
    4       1     version (1)
    5       1     dtype code (1 = float32)
    6       1     rank
    7       7     reserved, zero
    14      8*r   dims, u64 little-endian
    ...           payload, row-major little-endian

A dataset directory holds ``stimuli.evot`` (n, C, H, W),
``subjects/<id>/<region>.evot`` (n, repeats, voxels) and ``meta.json``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, FormatError, MissingRegion
from .genome import Genome, LayerGene, validate
from .randnet import forward, init_weights
from .rng import make_rng

MAGIC = b"EVOT"
VERSION = 1
DTYPES = {1: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("<f4"): 1}
HEADER = struct.Struct("<4sBBB7s")
MIN_STIMULI = 10
META_VERSION = 1


# -- tensor files --------------------------------------------------------------

def encode_tensor(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f4")
    a = np.ascontiguousarray(a) if a.ndim else a  # ascontiguousarray promotes 0-d to 1-d
    head = HEADER.pack(MAGIC, VERSION, DTYPE_CODES[a.dtype], a.ndim, bytes(7))
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + dims + a.tobytes(order="C")


def decode_tensor(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError(f"{name}: truncated header ({len(buf)} bytes)")
    magic, version, code, rank, reserved = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    if reserved != bytes(7):
        raise FormatError(f"{name}: reserved header bytes are not zero")
    dims_end = HEADER.size + 8 * rank
    if len(buf) < dims_end:
        raise FormatError(f"{name}: truncated dimension block")
    shape = struct.unpack_from(f"<{rank}Q", buf, HEADER.size)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - dims_end != expected:
        raise FormatError(f"{name}: payload is {len(buf) - dims_end} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(shape).astype(np.float32)


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    return decode_tensor(buf, str(path))


# -- datasets --------------------------------------------------------------------

@dataclass(frozen=True)
class Subject:
    id: str
    regions: dict[str, np.ndarray]  # region -> (stimuli, repeats, voxels)


@dataclass(frozen=True)
class Dataset:
    stimuli: np.ndarray  # (n, C, H, W) float32
    subjects: tuple[Subject, ...]
    regions: tuple[str, ...]
    provenance: dict[str, Any] = field(default_factory=lambda: {"kind": "real"})

    def __post_init__(self) -> None:
        check_dataset(self)

    @property
    def n_stimuli(self) -> int:
        return self.stimuli.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.stimuli.shape[1:])  # type: ignore[return-value]

    def responses(self, subject: int | str, region: str) -> np.ndarray:
        subj = self.subjects[subject] if isinstance(subject, int) else \
            next(s for s in self.subjects if s.id == subject)
        if region not in subj.regions:
            raise MissingRegion(f"subject {subj.id!r} has no region {region!r}")
        return subj.regions[region]


def check_dataset(ds: Dataset) -> None:
    if ds.stimuli.ndim != 4:
        raise DimensionMismatch(f"stimuli: expected rank 4 (n, C, H, W), got shape {ds.stimuli.shape}")
    n = ds.stimuli.shape[0]
    if n < MIN_STIMULI:
        raise DimensionMismatch(f"stimuli: {n} stimuli, need at least {MIN_STIMULI}")
    if not np.all(np.isfinite(ds.stimuli)):
        raise FormatError("stimuli: non-finite values")
    for subj in ds.subjects:
        missing = [r for r in ds.regions if r not in subj.regions]
        if missing:
            raise MissingRegion(f"subject {subj.id!r} lacks region(s) {missing}")
        extra = [r for r in subj.regions if r not in ds.regions]
        if extra:
            raise DimensionMismatch(f"subject {subj.id!r} has undeclared region(s) {extra}")
        for reg, y in subj.regions.items():
            where = f"subjects/{subj.id}/{reg}"
            if y.ndim != 3:
                raise DimensionMismatch(f"{where}: expected rank 3 (stimuli, repeats, voxels), got {y.shape}")
            if y.shape[0] != n:
                raise DimensionMismatch(f"{where}: axis 0 has {y.shape[0]} rows, stimuli has {n}")
            if y.shape[2] < 1:
                raise DimensionMismatch(f"{where}: axis 2 has no voxels")
            if not np.all(np.isfinite(y)):
                raise FormatError(f"{where}: non-finite values")


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.regions != b.regions or a.provenance != b.provenance:
        return False
    if a.stimuli.shape != b.stimuli.shape or a.stimuli.tobytes() != b.stimuli.tobytes():
        return False
    if [s.id for s in a.subjects] != [s.id for s in b.subjects]:
        return False
    for sa, sb in zip(a.subjects, b.subjects):
        for reg in a.regions:
            ya, yb = sa.regions[reg], sb.regions[reg]
            if ya.shape != yb.shape or ya.tobytes() != yb.tobytes():
                return False
    return True


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_tensor(root / "stimuli.evot", ds.stimuli)
    for subj in ds.subjects:
        sdir = root / "subjects" / subj.id
        sdir.mkdir(parents=True, exist_ok=True)
        for reg in ds.regions:
            write_tensor(sdir / f"{reg}.evot", subj.regions[reg])
    meta = {
        "format_version": META_VERSION,
        "regions": list(ds.regions),
        "subjects": [s.id for s in ds.subjects],
        "provenance": ds.provenance,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{meta_path}: not found")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key, kind in (("regions", list), ("subjects", list), ("provenance", dict)):
        if not isinstance(meta.get(key), kind):
            raise FormatError(f"{meta_path}: field {key!r} missing or not a {kind.__name__}")
    if meta.get("format_version") != META_VERSION:
        raise FormatError(f"{meta_path}: unsupported format_version {meta.get('format_version')!r}")

    stimuli = read_tensor(root / "stimuli.evot")
    if stimuli.ndim != 4:
        raise DimensionMismatch(f"{root / 'stimuli.evot'}: rank {stimuli.ndim}, expected 4")
    regions = tuple(meta["regions"])
    subjects = []
    for sid in meta["subjects"]:
        regs = {}
        for reg in regions:
            f = root / "subjects" / str(sid) / f"{reg}.evot"
            if not f.is_file():
                raise MissingRegion(f"{f}: region {reg!r} missing for subject {sid!r}")
            y = read_tensor(f)
            if y.ndim != 3:
                raise DimensionMismatch(f"{f}: rank {y.ndim}, expected 3 (stimuli, repeats, voxels)")
            if y.shape[0] != stimuli.shape[0]:
                raise DimensionMismatch(
                    f"{f}: axis 0 (stimuli) has {y.shape[0]} rows, stimuli.evot has {stimuli.shape[0]}")
            regs[reg] = y
        subjects.append(Subject(str(sid), regs))
    return Dataset(stimuli, tuple(subjects), regions, meta["provenance"])


# -- synthetic data ------------------------------------------------------------------

def default_teacher() -> Genome:
    """Six-layer teacher that fits a 32x32 input (maps 30, 15, 13, 6, 4, 2)."""
    layers = (
        LayerGene.conv(3, 1, 64),
        LayerGene.pool(2),
        LayerGene.conv(3, 1, 64),
        LayerGene.pool(2),
        LayerGene.conv(3, 1, 128),
        LayerGene.pool(2),
    )
    return Genome(layers, len(layers) - 1, 0x7EAC4E5)


@dataclass(frozen=True)
class TeacherSpec:
    """How synthetic responses are produced from a known genome.

    Region order matters: taps must increase strictly from the first
    (earliest) region to the last. The teacher's weights are the ordinary
    per-layer streams at ``weight_seed``, so scoring the teacher genome with
    that seed reproduces the ground-truth features exactly.
    """

    teacher: Genome = field(default_factory=default_teacher)
    taps: tuple[tuple[str, int], ...] = (("V2", 0), ("V4", 3), ("IT", 5))
    voxels: int = 200
    projection_seed: int = 0
    weight_seed: int = 1000
    spectral_power: float = 2.0
    noise_sigma: float = 1.0
    repeats: int = 3
    n_subjects: int = 3
    jitter: float = 0.1
    cutoff: float = 0.15

    def __post_init__(self) -> None:
        object.__setattr__(self, "taps", tuple((str(r), int(i)) for r, i in self.taps))
        layers = [i for _, i in self.taps]
        if not self.taps:
            raise ValueError("at least one region tap is required")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError(f"tap layers must increase strictly in region order, got {layers}")
        if layers[0] < 0 or layers[-1] >= self.teacher.depth:
            raise ValueError(f"tap layers {layers} outside teacher depth {self.teacher.depth}")
        if self.spectral_power < 0:
            raise ValueError("spectral_power must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.repeats < 2:
            raise ValueError("repeats must be >= 2")
        if self.voxels < 1 or self.n_subjects < 1:
            raise ValueError("voxels and n_subjects must be positive")

    @property
    def regions(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.taps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "teacher": self.teacher.to_dict(),
            "taps": [[r, i] for r, i in self.taps],
            "voxels": self.voxels,
            "projection_seed": self.projection_seed,
            "weight_seed": self.weight_seed,
            "spectral_power": self.spectral_power,
            "noise_sigma": self.noise_sigma,
            "repeats": self.repeats,
            "n_subjects": self.n_subjects,
            "jitter": self.jitter,
            "cutoff": self.cutoff,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TeacherSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown teacher spec key(s): {sorted(extra)}")
        kw = dict(d)
        if "teacher" in kw:
            kw["teacher"] = Genome.from_dict(kw["teacher"], "teacher")
        if "taps" in kw:
            kw["taps"] = tuple(tuple(t) for t in kw["taps"])
        return cls(**kw)


def smooth_noise_images(rng: np.random.Generator, n: int, shape: Sequence[int], cutoff: float) -> np.ndarray:
    """Gaussian low-pass filtered white noise, standardized per image."""
    c, h, w = shape
    white = rng.standard_normal((n, c, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    gain = np.exp(-(fy**2 + fx**2) / (2.0 * cutoff**2))
    img = np.fft.ifft2(np.fft.fft2(white) * gain).real
    img -= img.mean(axis=(1, 2, 3), keepdims=True)
    img /= img.std(axis=(1, 2, 3), keepdims=True)
    return img.astype(np.float32)


def _zscore_columns(a: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=0)
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return a / sd


def _principal_axes(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and singular values of the centered features,
    via the n x n Gram matrix; near-null directions are dropped."""
    F = np.asarray(F, dtype=np.float64)
    F = F - F.mean(axis=0)
    w, U = linalg.eigh(F @ F.T)
    w, U = w[::-1], U[:, ::-1]
    keep = w > max(w[0], 0.0) * 1e-12 if w.size else w > 0
    return U[:, keep], np.sqrt(w[keep])


def generate_synthetic(spec: TeacherSpec, n_stimuli: int = 300, input_shape: Sequence[int] = (3, 32, 32),
                       master_seed: int = 0) -> Dataset:
    """Responses that are noisy random projections of teacher features.

    Each region reads the teacher at its tap layer through a fixed random
    projection taken in the principal basis of the centered features, with
    component k weighted by ``(s_k / s_1) ** spectral_power``. Power 1 is
    distributed exactly like a plain Gaussian projection of the features;
    larger powers concentrate the signal on the dominant components. Each
    subject perturbs the projection by ``jitter`` and every repeat adds
    independent Gaussian noise of std ``noise_sigma`` to the z-scored signal.
    """
    input_shape = tuple(int(v) for v in input_shape)
    check = validate(spec.teacher, input_shape)
    if not check.ok:
        raise ValueError(f"teacher genome invalid for input {input_shape}: {check.violations[0]}")
    stimuli = smooth_noise_images(make_rng(master_seed, "stimuli"), n_stimuli, input_shape, spec.cutoff)

    weights = init_weights(spec.teacher, spec.weight_seed, in_channels=input_shape[0])
    feats = forward(spec.teacher, weights, stimuli, [i for _, i in spec.taps])

    subjects: list[dict[str, np.ndarray]] = [{} for _ in range(spec.n_subjects)]
    for region, tap in spec.taps:
        U, s = _principal_axes(feats[tap].data)
        k = len(s)
        scale = (s / s[0]) ** spec.spectral_power if k else s
        G = make_rng(spec.projection_seed, "projection", region).standard_normal((k, spec.voxels))
        for si in range(spec.n_subjects):
            srng = make_rng(spec.projection_seed, "subject", si, region)
            Gs = G + spec.jitter * srng.standard_normal((k, spec.voxels))
            signal = _zscore_columns(U @ (scale[:, None] * Gs))
            noise = make_rng(master_seed, "noise", si, region).standard_normal(
                (n_stimuli, spec.repeats, spec.voxels))
            subjects[si][region] = (signal[:, None, :] + spec.noise_sigma * noise).astype(np.float32)

    provenance = {
        "kind": "synthetic",
        "teacher_spec": spec.to_dict(),
        "master_seed": master_seed,
        "n_stimuli": n_stimuli,
        "input_shape": list(input_shape),
    }
    subs = tuple(Subject(f"s{s + 1}", subjects[s]) for s in range(spec.n_subjects))
    return Dataset(stimuli, subs, spec.regions, provenance)

