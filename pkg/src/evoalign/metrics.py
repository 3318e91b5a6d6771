"""Alignment scoring: ridge encoding models, RSA, and noise ceilings."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from .errors import (
    DegenerateRDM,
    LengthMismatch,
    MissingRegion,
    RepeatAxisMissing,
    ShapeMismatch,
    TooFewStimuli,
)
from .genome import Genome
from .randnet import forward, init_weights

NC_METHOD = "variance_partition"
NC_EPS = 0.01
LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
# A column is dropped when its training-split std is below this fraction of the
# median nonzero std of the layer. Sparse ReLU units that fire on one or two
# training stimuli otherwise blow up into huge z-scores on the test rows.
CONST_TOL = 0.1
COLUMN_CHUNK = 8192


# -- correlation ---------------------------------------------------------------

def pearson(x, y) -> float:
    """Centered correlation; 0.0 when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise LengthMismatch(f"pearson: lengths {x.size} and {y.size} differ")
    if x.size < 2:
        raise LengthMismatch("pearson: need at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def spearman(a, b) -> float:
    """Pearson correlation of average (fractional) ranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"spearman: lengths {a.size} and {b.size} differ")
    return pearson(rankdata(a), rankdata(b))


def columnwise_pearson(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-column correlation of two (n, v) arrays with the zero-variance rule."""
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    num = np.einsum("ij,ij->j", pc, tc)
    den = np.sqrt(np.einsum("ij,ij->j", pc, pc) * np.einsum("ij,ij->j", tc, tc))
    r = np.zeros(pred.shape[1])
    ok = den > 0
    r[ok] = num[ok] / den[ok]
    return np.clip(r, -1.0, 1.0)


# -- ridge regression --------------------------------------------------------------

@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray  # (p, v)
    intercept: np.ndarray  # (v,)
    lam: float
    form: str
    rank_deficient: bool = False


def ridge_fit(X, Y, lam: float = 1.0, form: str = "auto") -> RidgeModel:
    """Minimize ||Y - XW - 1b'||^2 + lam ||W||^2.

    The intercept is handled by centering, so it is never penalized. ``form``
    picks the primal (p x p) or dual (n x n) system; ``auto`` uses the
    smaller one. At ``lam == 0`` with a rank-deficient design the minimum-norm
    least-squares solution is returned and ``rank_deficient`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"ridge_fit: X {X.shape} and Y {Y.shape} disagree on rows")
    if X.shape[0] < 2:
        raise TooFewStimuli("ridge_fit: need at least 2 rows")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    n, p = X.shape
    if form == "auto":
        form = "primal" if p <= n else "dual"
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean

    deficient = False
    if form == "primal":
        A = Xc.T @ Xc
        A[np.diag_indices_from(A)] += lam
        W, deficient = _solve_psd(A, Xc.T @ Yc, lam)
    elif form == "dual":
        K = Xc @ Xc.T
        K[np.diag_indices_from(K)] += lam
        if lam > 0:
            alpha, deficient = _solve_psd(K, Yc, lam)
            W = Xc.T @ alpha
        else:
            W = np.linalg.pinv(Xc) @ Yc
            deficient = np.linalg.matrix_rank(Xc) < min(n - 1, p)
    else:
        raise ValueError(f"form must be auto, primal or dual, got {form!r}")
    b = y_mean - x_mean @ W
    if squeeze:
        W, b = W[:, 0], b[0]
    return RidgeModel(W, b, float(lam), form, bool(deficient))


def _solve_psd(A: np.ndarray, B: np.ndarray, lam: float) -> tuple[np.ndarray, bool]:
    if lam > 0:
        try:
            return linalg.solve(A, B, assume_a="pos"), False
        except (linalg.LinAlgError, ValueError):
            pass
    sol, _, rank, _ = linalg.lstsq(A, B)
    return sol, rank < A.shape[0]


def ridge_predict(model: RidgeModel, X_test) -> np.ndarray:
    X_test = np.asarray(X_test, dtype=np.float64)
    p = model.weights.shape[0]
    if X_test.ndim != 2 or X_test.shape[1] != p:
        raise ShapeMismatch(f"ridge_predict: model expects {p} columns, got {X_test.shape}")
    return X_test @ model.weights + model.intercept


# -- encoding models ---------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_fraction: float = 0.8

    def indices(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        n_test = n - int(round(n * self.train_fraction))
        if n_test < 2 or n - n_test < 2:
            raise TooFewStimuli(f"split of {n} stimuli leaves {n - n_test} train / {n_test} test")
        perm = np.random.Generator(np.random.PCG64(self.seed)).permutation(n)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])


class EncodingDesign:
    """One feature matrix under one split, reduced to the ridge kernels.

    Columns are z-scored with training-row statistics and near-constant
    columns (see ``CONST_TOL``) are dropped. Ridge is then solved in kernel form, which is exact for any
    column count and lets several response sets share one factorization.
    """

    def __init__(self, features, split: SplitSpec):
        X = np.asarray(getattr(features, "data", features))
        if X.ndim != 2:
            raise ShapeMismatch(f"features must be 2-D, got {X.shape}")
        n = X.shape[0]
        self.train, self.test = split.indices(n)
        self.n = n
        chunks = range(0, X.shape[1], COLUMN_CHUNK)
        stats = []
        for start in chunks:
            tr = np.asarray(X[self.train, start:start + COLUMN_CHUNK], dtype=np.float64)
            stats.append((tr.mean(axis=0), tr.std(axis=0)))
        sds = np.concatenate([sd for _, sd in stats]) if stats else np.zeros(0)
        live = sds[sds > 0]
        floor = CONST_TOL * float(np.median(live)) if live.size else np.inf
        k_tr = np.zeros((len(self.train), len(self.train)))
        k_te = np.zeros((len(self.test), len(self.train)))
        kept = 0
        for start, (mu, sd) in zip(chunks, stats):
            keep = sd > floor
            if not keep.any():
                continue
            block = np.asarray(X[:, start:start + COLUMN_CHUNK], dtype=np.float64)
            z = (block[:, keep] - mu[keep]) / sd[keep]
            ztr = z[self.train]
            k_tr += ztr @ ztr.T
            k_te += z[self.test] @ ztr.T
            kept += int(keep.sum())
        self.n_features = kept
        self.k_train = k_tr
        self.k_test = k_te
        self._eig = None

    def _eigh(self):
        if self._eig is None:
            w, V = linalg.eigh(self.k_train)
            self._eig = (np.clip(w, 0.0, None), V)
        return self._eig

    def _fit_predict(self, k_in, k_out, y_in, lam):
        y_mean = y_in.mean(axis=0)
        A = k_in.copy()
        A[np.diag_indices_from(A)] += lam
        alpha, _ = _solve_psd(A, y_in - y_mean, lam)
        return k_out @ alpha + y_mean

    def predict(self, Y, lam: float) -> np.ndarray:
        """Test-row predictions from a ridge fit on the training rows of ``Y``."""
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape[0] != self.n:
            raise ShapeMismatch(f"responses have {Y.shape[0]} rows, features {self.n}")
        if self.n_features == 0:
            return np.broadcast_to(Y[self.train].mean(axis=0), (len(self.test), Y.shape[1])).copy()
        if lam > 0:
            w, V = self._eigh()
            y_tr = Y[self.train]
            y_mean = y_tr.mean(axis=0)
            alpha = V @ ((V.T @ (y_tr - y_mean)) / (w + lam)[:, None])
            return self.k_test @ alpha + y_mean
        return self._fit_predict(self.k_train, self.k_test, Y[self.train], lam)

    def select_lambda(self, Y, grid: Sequence[float] = LAMBDA_GRID, folds: int = 5) -> float:
        """Lambda maximizing mean voxel correlation under k-fold CV on the
        training rows only."""
        Y = np.asarray(Y, dtype=np.float64)[self.train]
        m = len(self.train)
        fold_of = np.arange(m) % folds
        best, best_score = grid[0], -np.inf
        for lam in grid:
            scores = []
            for f in range(folds):
                out = fold_of == f
                inn = ~out
                pred = self._fit_predict(self.k_train[np.ix_(inn, inn)], self.k_train[np.ix_(out, inn)], Y[inn], lam)
                scores.append(columnwise_pearson(pred, Y[out]).mean())
            s = float(np.mean(scores))
            if s > best_score:
                best, best_score = lam, s
        return float(best)

    def score(self, Y, lam: float) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64)
        return columnwise_pearson(self.predict(Y, lam), Y[self.test])


@dataclass(frozen=True)
class EncodingResult:
    r: np.ndarray
    mean: float
    lam: float


def _response_means(responses) -> np.ndarray:
    Y = np.asarray(responses, dtype=np.float64)
    if Y.ndim == 3:
        Y = Y.mean(axis=1)
    if Y.ndim != 2:
        raise ShapeMismatch(f"responses must be (n, v) or (n, repeats, v), got {Y.shape}")
    return Y


def encoding_score(features, responses, split: SplitSpec | None = None, lam: float | None = 1.0,
                   lambda_grid: Sequence[float] | None = None) -> EncodingResult:
    """Fit ridge on training rows, correlate predictions with held-out rows.

    Pass ``lambda_grid`` (and ``lam=None``) to choose lambda by CV.
    """
    split = split or SplitSpec()
    Y = _response_means(responses)
    design = EncodingDesign(features, split)
    if lambda_grid:
        lam = design.select_lambda(Y, lambda_grid)
    r = design.score(Y, lam)
    return EncodingResult(r, float(r.mean()), float(lam))


# -- noise ceilings ---------------------------------------------------------------

def encoding_noise_ceiling(responses) -> np.ndarray:
    """Per-voxel fraction of repeat-mean variance attributable to signal.

    noise = mean over stimuli of the across-repeat variance; total = variance
    over stimuli of the repeat means; signal = max(total - noise/R, 0);
    NC = signal / (signal + noise/R).
    """
    Y = np.asarray(responses, dtype=np.float64)
    if Y.ndim != 3 or Y.shape[1] < 2:
        raise RepeatAxisMissing(f"need (stimuli, repeats >= 2, voxels), got shape {Y.shape}")
    R = Y.shape[1]
    noise = Y.var(axis=1, ddof=1).mean(axis=0)
    total = Y.mean(axis=1).var(axis=0, ddof=1)
    signal = np.maximum(total - noise / R, 0.0)
    denom = signal + noise / R
    nc = np.zeros_like(denom)
    ok = denom > 0
    nc[ok] = signal[ok] / denom[ok]
    return np.clip(nc, 0.0, 1.0)


def normalized_encoding_score(r, nc, eps: float = NC_EPS) -> float:
    """100 x mean over live voxels (NC > eps) of max(r, 0)^2 / NC."""
    r = np.asarray(r, dtype=np.float64)
    nc = np.asarray(nc, dtype=np.float64)
    if r.shape != nc.shape:
        raise LengthMismatch(f"{r.size} correlations vs {nc.size} noise ceilings")
    live = nc > eps
    if not live.any():
        return float("nan")
    return float(100.0 * np.mean(np.maximum(r[live], 0.0) ** 2 / nc[live]))


# -- RSA ---------------------------------------------------------------------

@dataclass(frozen=True)
class RDM:
    matrix: np.ndarray
    metric: str = "correlation"

    @property
    def side(self) -> int:
        return self.matrix.shape[0]

    def upper(self) -> np.ndarray:
        return upper_triangle(self.matrix)


def upper_triangle(m) -> np.ndarray:
    m = np.asarray(getattr(m, "matrix", m))
    return m[np.triu_indices(m.shape[0], k=1)]


def compute_rdm(patterns) -> RDM:
    """Correlation-distance RDM, 1 - pearson(row_i, row_j)."""
    P = np.asarray(getattr(patterns, "data", patterns), dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ShapeMismatch(f"patterns must be (stimuli >= 2, units), got {P.shape}")
    Pc = P - P.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", Pc, Pc))
    safe = np.where(norms > 0, norms, 1.0)
    U = Pc / safe[:, None]
    U[norms == 0] = 0.0
    C = U @ U.T
    D = np.clip(1.0 - C, 0.0, 2.0)
    D = (D + D.T) / 2.0
    np.fill_diagonal(D, 0.0)
    return RDM(D)


@dataclass(frozen=True)
class RSAScore:
    raw: float
    ceiling: float
    normalized: float
    per_subject: tuple[float, ...]


def _rdm_vectors(rdms) -> list[np.ndarray]:
    out = []
    for m in rdms:
        v = upper_triangle(m)
        if np.ptp(v) == 0:
            raise DegenerateRDM("RDM upper triangle has zero variance")
        out.append(v)
    return out


def _corr(method: str):
    if method == "spearman":
        return spearman
    if method == "pearson":
        return pearson
    raise ValueError(f"unknown RDM comparison {method!r}")


def rsa_lower_ceiling(subject_rdms, method: str = "spearman") -> float:
    """Mean over subjects of corr(subject, mean of the other subjects)."""
    vecs = _rdm_vectors(subject_rdms)
    if len(vecs) < 2:
        return float("nan")
    corr = _corr(method)
    total = np.sum(vecs, axis=0)
    vals = [corr(v, (total - v) / (len(vecs) - 1)) for v in vecs]
    return math.fsum(vals) / len(vals)


def rsa_score(model_rdm, subject_rdms, method: str = "spearman", ceiling: float | None = None) -> RSAScore:
    sides = {np.asarray(getattr(m, "matrix", m)).shape for m in [model_rdm, *subject_rdms]}
    if len(sides) != 1:
        raise ShapeMismatch(f"RDMs differ in shape: {sorted(sides)}")
    corr = _corr(method)
    mv = _rdm_vectors([model_rdm])[0]
    vecs = _rdm_vectors(subject_rdms)
    per = tuple(corr(mv, v) for v in vecs)
    raw = math.fsum(per) / len(per)
    if ceiling is None:
        ceiling = rsa_lower_ceiling(subject_rdms, method)
    normalized = 100.0 * raw / ceiling if ceiling and np.isfinite(ceiling) else float("nan")
    return RSAScore(raw, float(ceiling), normalized, per)


# -- fitness -----------------------------------------------------------------

@dataclass(frozen=True)
class ScoreSettings:
    """Everything besides the genome and data that fixes a score."""

    n_seeds: int = 10
    master_seed: int = 0
    split_seed: int = 0
    train_fraction: float = 0.8
    lam: float = 1.0
    lambda_grid: tuple[float, ...] | None = None
    activation: str = "relu"
    rsa_method: str = "spearman"

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.master_seed + t for t in range(self.n_seeds))

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.split_seed, self.train_fraction)


@dataclass(frozen=True)
class FitnessRecord:
    genome_id: int
    region: str
    layer: int
    subjects: tuple[str, ...]
    seeds: tuple[int, ...]
    r_bar: np.ndarray  # (subjects, seeds)
    voxel_r: np.ndarray = field(repr=False)  # (subjects, seeds, voxels)
    normalized: float | None = None

    @property
    def aggregate(self) -> float:
        return aggregate_fitness(self.r_bar)


def aggregate_fitness(r_bar) -> float:
    """Mean over subjects of the mean over seeds; order-independent sums."""
    r_bar = np.asarray(r_bar, dtype=np.float64)
    per_subject = [math.fsum(row) / len(row) for row in r_bar]
    return math.fsum(per_subject) / len(per_subject)


def _region_responses(dataset, region: str) -> list[np.ndarray]:
    out = []
    for subject in dataset.subjects:
        if region not in subject.regions:
            raise MissingRegion(f"subject {subject.id!r} has no region {region!r}")
        out.append(subject.regions[region])
    return out


def evaluate_layers(
    genome: Genome,
    dataset,
    regions: Iterable[str],
    layers: Iterable[int] | None = None,
    settings: ScoreSettings = ScoreSettings(),
) -> dict[tuple[str, int], FitnessRecord]:
    """Encoding fitness for every (region, layer) pair.

    One forward pass per seed serves every layer; one kernel per (seed,
    layer) serves every subject and region.
    """
    regions = list(regions)
    layers = sorted(set(range(genome.depth) if layers is None else layers))
    responses = {reg: [_response_means(y) for y in _region_responses(dataset, reg)] for reg in regions}
    nc = {reg: [_try_nc(y) for y in _region_responses(dataset, reg)] for reg in regions}
    subjects = tuple(s.id for s in dataset.subjects)
    seeds = settings.seeds
    split = settings.split

    voxel_r = {(reg, li): [[None] * len(seeds) for _ in subjects] for reg in regions for li in layers}
    for t, seed in enumerate(seeds):
        weights = init_weights(genome, seed, in_channels=dataset.stimuli.shape[1])
        feats = forward(genome, weights, dataset.stimuli, layers, settings.activation)
        for li in layers:
            design = EncodingDesign(feats.pop(li), split)
            for reg in regions:
                for s, Y in enumerate(responses[reg]):
                    lam = design.select_lambda(Y, settings.lambda_grid) if settings.lambda_grid else settings.lam
                    voxel_r[(reg, li)][s][t] = design.score(Y, lam)

    out = {}
    for (reg, li), per_subject in voxel_r.items():
        vr = np.array(per_subject)
        r_bar = vr.mean(axis=2)
        norm = None
        if all(c is not None for c in nc[reg]):
            vals = [normalized_encoding_score(vr[s, t], nc[reg][s])
                    for s in range(len(subjects)) for t in range(len(seeds))]
            norm = float(np.mean(vals))
        out[(reg, li)] = FitnessRecord(genome.id, reg, li, subjects, seeds, r_bar, vr, norm)
    return out


def _try_nc(Y) -> np.ndarray | None:
    try:
        return encoding_noise_ceiling(Y)
    except RepeatAxisMissing:
        return None


def fitness(genome: Genome, dataset, region: str, n_seeds: int | None = None, layer: int | None = None,
            settings: ScoreSettings = ScoreSettings()) -> FitnessRecord:
    if n_seeds is not None:
        settings = replace(settings, n_seeds=n_seeds)
    layer = genome.readout if layer is None else layer
    return evaluate_layers(genome, dataset, [region], [layer], settings)[(region, layer)]


@dataclass(frozen=True)
class LayerProfile:
    regions: tuple[str, ...]
    table: np.ndarray  # (layers, regions) aggregate fitness
    records: dict[tuple[str, int], FitnessRecord] = field(repr=False)

    def argmax(self) -> dict[str, int]:
        return {reg: int(np.argmax(self.table[:, j])) for j, reg in enumerate(self.regions)}


def layer_profile(genome: Genome, dataset, regions: Iterable[str] | None = None,
                  settings: ScoreSettings = ScoreSettings()) -> LayerProfile:
    regions = tuple(dataset.regions if regions is None else regions)
    recs = evaluate_layers(genome, dataset, regions, None, settings)
    table = np.array([[recs[(reg, li)].aggregate for reg in regions] for li in range(genome.depth)])
    return LayerProfile(regions, table, recs)


# -- reports -----------------------------------------------------------------

REPORT_COLUMNS = ("model", "region", "genome_id", "layer", "metric", "raw", "normalized", "nc_method")


@dataclass(frozen=True)
class ReportRow:
    model: str
    region: str
    genome_id: int
    layer: int
    metric: str
    raw: float
    normalized: float
    nc_method: str

    def as_list(self) -> list[str]:
        return [self.model, self.region, str(self.genome_id), str(self.layer), self.metric,
                _fmt(self.raw), _fmt(self.normalized), self.nc_method]


def _fmt(v: float | None) -> str:
    if v is None or not np.isfinite(v):
        return "nan"
    return repr(float(v))


def rsa_layer_scores(genome: Genome, dataset, region: str, layers: Iterable[int] | None = None,
                     settings: ScoreSettings = ScoreSettings()) -> dict[int, RSAScore]:
    """RSA of each layer against the subjects' repeat-mean RDMs, averaged over seeds."""
    layers = sorted(set(range(genome.depth) if layers is None else layers))
    subj = [compute_rdm(_response_means(y)) for y in _region_responses(dataset, region)]
    ceiling = rsa_lower_ceiling(subj, settings.rsa_method)
    raws: dict[int, list[float]] = {li: [] for li in layers}
    for seed in settings.seeds:
        weights = init_weights(genome, seed, in_channels=dataset.stimuli.shape[1])
        feats = forward(genome, weights, dataset.stimuli, layers, settings.activation)
        for li in layers:
            try:
                raws[li].append(rsa_score(compute_rdm(feats.pop(li)), subj, settings.rsa_method, ceiling).raw)
            except DegenerateRDM:
                raws[li].append(0.0)
    out = {}
    for li, vals in raws.items():
        raw = math.fsum(vals) / len(vals)
        norm = 100.0 * raw / ceiling if np.isfinite(ceiling) and ceiling else float("nan")
        out[li] = RSAScore(raw, ceiling, norm, tuple(vals))
    return out


def score_report(genome: Genome, dataset, regions: Iterable[str] | None = None,
                 metrics: Iterable[str] = ("reg", "rsa"), model: str = "model",
                 settings: ScoreSettings = ScoreSettings()) -> list[ReportRow]:
    """Best-layer scores per (region, metric), as in a brain-alignment table."""
    regions = list(dataset.regions if regions is None else regions)
    metrics = list(metrics)
    for reg in regions:
        if reg not in dataset.regions:
            raise MissingRegion(f"dataset has no region {reg!r}; available: {list(dataset.regions)}")
    rows = []
    enc = evaluate_layers(genome, dataset, regions, None, settings) if "reg" in metrics else {}
    for reg in regions:
        for metric in metrics:
            if metric == "reg":
                recs = [enc[(reg, li)] for li in range(genome.depth)]
                best = max(recs, key=lambda r: (_key(r.normalized, r.aggregate), -r.layer))
                rows.append(ReportRow(model, reg, genome.id, best.layer, "reg", best.aggregate,
                                      best.normalized if best.normalized is not None else float("nan"), NC_METHOD))
            elif metric == "rsa":
                scores = rsa_layer_scores(genome, dataset, reg, None, settings)
                li = max(scores, key=lambda k: (scores[k].raw, -k))
                rows.append(ReportRow(model, reg, genome.id, li, "rsa", scores[li].raw,
                                      scores[li].normalized, "leave_one_subject_out"))
            else:
                raise ValueError(f"unknown metric {metric!r}; expected reg or rsa")
    return rows


def _key(normalized, aggregate) -> float:
    if normalized is not None and np.isfinite(normalized):
        return normalized
    return aggregate


def report_csv(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow(row.as_list())
    return buf.getvalue()
