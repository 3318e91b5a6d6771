"""Command-line entry point: search, generate, eval, profile, report.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 dataset
error. Messages go to standard error; CSV tables go to standard output unless
a file is named.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

from .data import TeacherSpec, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DatasetError, EvoAlignError, MissingRegion, ParseError
from .evolve import SearchConfig, read_logs, run_search
from .genome import load_genome
from .metrics import ScoreSettings, layer_profile, report_csv, score_report

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3

LOCK_NAME = "run.lock"
METRICS = ("reg", "rsa")

log = logging.getLogger("evoalign")


# -- configuration -------------------------------------------------------------

SEARCH_KEYS = tuple(f.name for f in fields(SearchConfig))
RUN_KEYS = ("dataset", "run_dir", "report_regions", "report_metrics")
GENERATE_KEYS = ("n_stimuli", "input_shape", "master_seed")


@dataclass(frozen=True)
class RunConfig:
    search: SearchConfig
    dataset: Path
    run_dir: Path
    report_regions: tuple[str, ...] | None = None
    report_metrics: tuple[str, ...] = METRICS

    def to_dict(self) -> dict[str, Any]:
        d = self.search.to_dict()
        d["dataset"] = str(self.dataset)
        d["run_dir"] = str(self.run_dir)
        d["report_regions"] = None if self.report_regions is None else list(self.report_regions)
        d["report_metrics"] = list(self.report_metrics)
        return d


def _read_json(path: str | os.PathLike, what: str) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def _reject_unknown(d: dict[str, Any], allowed: Sequence[str], path) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown config key {unknown[0]!r}" + (f" (and {len(unknown) - 1} more)" if len(unknown) > 1 else ""))


def parse_run_config(d: dict[str, Any], base: Path, path="config") -> RunConfig:
    _reject_unknown(d, SEARCH_KEYS + RUN_KEYS, path)
    for key in ("dataset", "run_dir"):
        if key not in d:
            raise ConfigError(f"{path}: missing required key {key!r}")
        if not isinstance(d[key], str):
            raise ConfigError(f"{path}: {key!r} must be a string path")
    search_kw = {k: d[k] for k in SEARCH_KEYS if k in d}
    types = {f.name: f.type for f in fields(SearchConfig)}
    for k, v in search_kw.items():
        expected = types[k]
        if k == "depth_range":
            if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) for x in v)):
                raise ConfigError(f"{path}: 'depth_range' must be a two-integer list")
        elif k == "region":
            if not isinstance(v, str):
                raise ConfigError(f"{path}: 'region' must be a string")
        elif "float" in str(expected):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}: {k!r} must be a number")
        elif k == "threads":
            if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{path}: 'threads' must be an integer or null")
        elif isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}: {k!r} must be an integer")
    search = SearchConfig(**search_kw)

    regions = d.get("report_regions")
    if regions is not None and not (isinstance(regions, list) and all(isinstance(r, str) for r in regions)):
        raise ConfigError(f"{path}: 'report_regions' must be a list of strings")
    metrics = d.get("report_metrics", list(METRICS))
    if not (isinstance(metrics, list) and metrics and all(m in METRICS for m in metrics)):
        raise ConfigError(f"{path}: 'report_metrics' must be a non-empty subset of {list(METRICS)}")
    return RunConfig(
        search,
        (base / d["dataset"]).resolve(),
        (base / d["run_dir"]).resolve(),
        None if regions is None else tuple(regions),
        tuple(metrics),
    )


def load_run_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    return parse_run_config(_read_json(path, "config"), path.parent, path)


def parse_generate_spec(d: dict[str, Any], path="spec") -> tuple[TeacherSpec, dict[str, Any]]:
    teacher_keys = tuple(TeacherSpec.__dataclass_fields__)
    _reject_unknown(d, teacher_keys + GENERATE_KEYS, path)
    opts = {
        "n_stimuli": int(d.get("n_stimuli", 300)),
        "input_shape": tuple(int(v) for v in d.get("input_shape", (3, 32, 32))),
        "master_seed": int(d.get("master_seed", 0)),
    }
    try:
        spec = TeacherSpec.from_dict({k: d[k] for k in teacher_keys if k in d})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return spec, opts


# -- run directory lock ---------------------------------------------------------

class RunLock:
    """Exclusive marker file; a second process on the same run dir fails."""

    def __init__(self, run_dir: Path) -> None:
        self.path = run_dir / LOCK_NAME
        self.fd: int | None = None

    def __enter__(self) -> "RunLock":
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise EvoAlignError(f"run directory {self.path.parent} is locked by {self.path}") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


# -- commands ------------------------------------------------------------------

def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_search(args) -> int:
    cfg = load_run_config(args.config)
    dataset = load_dataset(cfg.dataset)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(cfg.run_dir):
        _write_json(cfg.run_dir / "resolved_config.json", cfg.to_dict())

        def progress(entry):
            log.info("generation %d best %.4f mean %.4f", entry.generation, entry.best_fitness, entry.mean_fitness)

        result = run_search(cfg.search, dataset, cfg.run_dir, None if args.quiet else progress)
    log.info("best genome %s fitness %.4f", result.best.describe(), result.best_fitness)
    return EXIT_OK


def cmd_generate(args) -> int:
    d = _read_json(args.spec, "spec") if args.spec else {}
    if args.noise_sigma is not None:
        d["noise_sigma"] = args.noise_sigma
    spec, opts = parse_generate_spec(d, args.spec or "spec")
    ds = generate_synthetic(spec, opts["n_stimuli"], opts["input_shape"], opts["master_seed"])
    save_dataset(ds, args.out_dir)
    return EXIT_OK


def _settings(args) -> ScoreSettings:
    return ScoreSettings(n_seeds=args.n_seeds, master_seed=args.master_seed)


def _split_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    genome = load_genome(args.genome)
    dataset = load_dataset(args.dataset)
    metrics = _split_list(args.metrics) or list(METRICS)
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metric {bad[0]!r}; expected one of {list(METRICS)}")
    rows = score_report(genome, dataset, _split_list(args.regions), metrics, args.model, _settings(args))
    _emit(report_csv(rows), args.out)
    return EXIT_OK


def profile_csv(profile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("layer", "region", "fitness", "argmax"))
    best = profile.argmax()
    for li, row in enumerate(profile.table):
        for reg, v in zip(profile.regions, row):
            w.writerow((li, reg, repr(float(v)), int(best[reg] == li)))
    return buf.getvalue()


def cmd_profile(args) -> int:
    genome = load_genome(args.genome)
    dataset = load_dataset(args.dataset)
    regions = _split_list(args.regions)
    if regions:
        missing = [r for r in regions if r not in dataset.regions]
        if missing:
            raise MissingRegion(f"dataset has no region {missing[0]!r}; available: {list(dataset.regions)}")
    prof = layer_profile(genome, dataset, regions, _settings(args))
    _emit(profile_csv(prof), args.out)
    return EXIT_OK


def curves_csv(logs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("generation", "best", "mean", "evaluations"))
    for entry in logs:
        w.writerow((entry.generation, repr(entry.best_fitness), repr(entry.mean_fitness), entry.evaluations))
    return buf.getvalue()


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    log_path = run_dir / "generations.jsonl"
    if not log_path.is_file():
        raise ConfigError(f"{run_dir} has no generations.jsonl")
    logs = read_logs(log_path)
    (run_dir / "curves.csv").write_text(curves_csv(logs), encoding="utf-8")
    cfg = parse_run_config(_read_json(run_dir / "resolved_config.json", "config"), run_dir,
                           run_dir / "resolved_config.json")
    dataset = load_dataset(cfg.dataset)
    genome = load_genome(run_dir / "best_genome.json")
    settings = cfg.search.settings if args.n_seeds is None else ScoreSettings(
        n_seeds=args.n_seeds, master_seed=cfg.search.master_seed,
        split_seed=cfg.search.split_seed, train_fraction=cfg.search.train_fraction, lam=cfg.search.lam)
    rows = score_report(genome, dataset, cfg.report_regions, cfg.report_metrics, args.model, settings)
    (run_dir / "report.csv").write_text(report_csv(rows), encoding="utf-8")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evoalign", description="Evolve CNN genomes for random-weight brain alignment.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run an evolutionary search from a JSON config")
    s.add_argument("config")
    s.add_argument("-q", "--quiet", action="store_true", help="no per-generation progress")
    s.set_defaults(func=cmd_search)

    g = sub.add_parser("generate", help="write a synthetic teacher dataset")
    g.add_argument("out_dir")
    g.add_argument("--spec", help="JSON teacher spec (defaults used when omitted)")
    g.add_argument("--noise-sigma", type=float, help="override the spec's noise_sigma")
    g.set_defaults(func=cmd_generate)

    for name, func, helptext in (("eval", cmd_eval, "score a genome (best layer per region and metric)"),
                                 ("profile", cmd_profile, "score every layer of a genome for every region")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("genome")
        e.add_argument("dataset")
        e.add_argument("--regions", help="comma-separated region names (default: all)")
        e.add_argument("--n-seeds", type=int, default=10)
        e.add_argument("--master-seed", type=int, default=0)
        e.add_argument("-o", "--out", help="write CSV here instead of stdout")
        if name == "eval":
            e.add_argument("--metrics", help="comma-separated subset of reg,rsa")
            e.add_argument("--model", default="model", help="label for the model column")
        e.set_defaults(func=func)

    r = sub.add_parser("report", help="write curves.csv and report.csv for a finished run")
    r.add_argument("run_dir")
    r.add_argument("--n-seeds", type=int, help="override the run's n_seeds for the report")
    r.add_argument("--model", default="best")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (EvoAlignError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
