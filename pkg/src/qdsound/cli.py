"""Command line front end.

Subcommands map onto the package's workflow: ingest a reference corpus
into a store, run or resume a search, analyze a finished run or a
store, benchmark the render backends, and bounce a single archived
elite back out as a WAV file.

Exit codes: 0 on success, 1 for usage errors (bad flags, bad
arguments), 2 for runtime failures (missing files, aborted runs).
"""

import argparse
import difflib
import json
import logging
import os
import re
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import genome as G
from .analysis import (
    RANK_LAMBDA,
    dataset_projection_coverage,
    plot_density,
    plot_grid,
    plot_metrics,
    rank_features,
    read_metrics,
    remap_to_manual,
    write_ranking_csv,
)
from .engine import (
    RunAborted,
    RunConfig,
    config_from_dict,
    resume as engine_resume,
    run as engine_run,
)
from .features import SPECTRAL_NAMES, read_features_csv
from .projection import ManualProjector
from .refdb import ingest, load_store, save_store
from .render import available_backends, render_debug, write_wav

OUT_ROOT_ENV = "QDSOUND_OUT_ROOT"

_KNOWN_TOKENS: set = set()


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 on usage errors and typo hints."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        hint = _suggest(message)
        if hint:
            sys.stderr.write(f"hint: did you mean {hint!r}?\n")
        raise SystemExit(1)


def _suggest(message: str) -> str:
    candidates = re.findall(r"--[\w-]+", message)
    m = re.search(r"invalid choice: '([^']+)'", message)
    if m:
        candidates.append(m.group(1))
    for token in candidates:
        close = difflib.get_close_matches(token, _KNOWN_TOKENS, n=1, cutoff=0.6)
        if close and close[0] != token:
            return close[0]
    return ""


def _collect_tokens(parser):
    for action in parser._actions:
        _KNOWN_TOKENS.update(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            _KNOWN_TOKENS.update(action.choices)
            for sub in action.choices.values():
                _collect_tokens(sub)


# ---------------------------------------------------------------------------
# config files


def parse_config_file(path) -> dict:
    """Parse a ``key = value`` config file into a nested dict.

    Blank lines and ``#`` comments are skipped. Dotted keys nest
    (``fitness.regime = multi_ref``). Values are read as JSON when they
    parse as such (numbers, booleans, null, quoted strings) and as
    plain strings otherwise.
    """
    doc: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"{path}:{lineno}: {key!r} nests under a scalar")
        node[parts[-1]] = parsed
    return doc


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    doc = parse_config_file(p)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"{p}: unknown config key(s): {', '.join(unknown)}")
    return config_from_dict(doc)


def _resolve_out_dir(out_dir: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    p = Path(out_dir)
    if root and not p.is_absolute():
        return str(Path(root) / p)
    return str(p)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out:
        cfg.out_dir = args.out
    if args.workers:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.out_dir = _resolve_out_dir(cfg.out_dir)
    return cfg


def _print_report(rep) -> None:
    print(f"generations: {rep.generations}")
    print(f"evaluations: {rep.evaluations}")
    print(f"coverage: {rep.coverage:.4f}")
    print(f"diversity: {rep.diversity:.4f}")
    print(f"grid_mean_fitness: {rep.grid_mean_fitness:.4f}")
    print(f"qd_score: {rep.qd_score:.4f}")
    print(f"goal_switches: {rep.goal_switches}")
    print(f"invalid: {rep.invalid_total}")
    if rep.retrain_generations:
        gens = ", ".join(str(g) for g in rep.retrain_generations)
        print(f"retrains at: {gens}")
    print(f"wall_seconds: {rep.wall_seconds:.1f}")
    print(f"out_dir: {rep.out_dir}")


def _parse_bd(value: str):
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 2 or not all(parts):
        raise ValueError(f"--bd expects 'feature_x,feature_y', got {value!r}")
    for name in parts:
        if name not in SPECTRAL_NAMES:
            raise ValueError(
                f"unknown spectral feature {name!r}; choose from "
                + ", ".join(SPECTRAL_NAMES)
            )
    return parts


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_refdb_ingest(args) -> int:
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus}")
    store, report = ingest(corpus, force_hnsw=args.force_hnsw)
    for path, reason in report.skipped:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    save_store(store, args.out)
    kind = type(store.index).__name__
    print(f"ingested {report.ingested} sounds ({len(report.skipped)} skipped)")
    print(f"index: {kind}")
    print(f"store: {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rep = engine_run(cfg)
    _print_report(rep)
    return 0


def cmd_resume(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    cfg = _apply_overrides(load_config(args.config), args)
    if not args.out:
        # A checkpoint lives in <run_dir>/checkpoints/; resume in place.
        cfg.out_dir = str(ckpt.parent.parent)
    rep = engine_resume(ckpt, cfg)
    _print_report(rep)
    return 0


def cmd_analyze_metrics(args) -> int:
    run_dir = Path(args.run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise FileNotFoundError(f"no metrics.csv under {run_dir}")
    cols = read_metrics(metrics)
    last = {name: cols[name][-1] for name in cols}
    print(f"generations: {int(last['generation']) + 1}")
    print(f"evaluations: {int(last['evaluations'])}")
    print(f"coverage: {last['coverage']:.4f}")
    print(f"diversity: {last['diversity']:.4f}")
    print(f"grid_mean_fitness: {last['grid_mean_fitness']:.4f}")
    print(f"qd_score: {last['qd_score']:.4f}")
    print(f"goal_switches: {int(last['goal_switches'])}")
    out = plot_metrics(run_dir)
    print(f"plot: {out}")
    snaps = sorted((run_dir / "snapshots").glob("gen_*.csv"))
    if snaps:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        grid_png = plot_grid(
            snaps[-1], manifest["config"]["grid_size"], run_dir / "grid.png"
        )
        print(f"grid plot: {grid_png}")
    return 0


def cmd_analyze_remap(args) -> int:
    run_dir = Path(args.run_dir)
    table = run_dir / "elites_features.csv"
    if not table.is_file():
        raise FileNotFoundError(f"no elites_features.csv under {run_dir}")
    fx, fy = _parse_bd(args.bd)
    ids, mat, names = read_features_csv(table)
    missing = [n for n in SPECTRAL_NAMES if n not in names]
    if missing:
        raise ValueError(
            f"{table} has no spectral columns; rerun the search to regenerate it"
        )
    rows = mat[:, [names.index(n) for n in SPECTRAL_NAMES]]
    projector = ManualProjector(fx, fy)
    projector.calibrate(rows)
    grid, cov = remap_to_manual(rows, projector=projector, grid_size=args.grid)
    print(f"elites: {len(ids)}")
    print(f"manual space: {fx} x {fy}, grid {args.grid}")
    print(f"coverage: {cov:.4f}")
    out = plot_density(
        grid, run_dir / f"remap_{fx}_{fy}.png", xlabel=fx, ylabel=fy
    )
    print(f"plot: {out}")
    return 0


def cmd_analyze_rank(args) -> int:
    store = load_store(args.store)
    if store.spectral is None:
        raise ValueError("store has no spectral features; re-ingest the corpus")
    ranked = rank_features(store.spectral, lam=args.lam)
    out = Path(args.out) if args.out else Path(args.store) / "feature_ranking.csv"
    write_ranking_csv(ranked, out, lam=args.lam)
    print(f"ranked {len(ranked)} features over {len(store)} sounds (lambda={args.lam})")
    for pos, row in enumerate(ranked[:5], start=1):
        print(
            f"{pos}. {row['name']}: key={row['key']:.4f} "
            f"(variance={row['variance']:.4f}, "
            f"max|corr|={row['max_abs_correlation']:.4f})"
        )
    print(f"ranking: {out}")
    return 0


def cmd_analyze_dataset_coverage(args) -> int:
    store = load_store(args.store)
    fx, fy = _parse_bd(args.bd)
    grid, cov = dataset_projection_coverage(store, fx, fy, grid_size=args.grid)
    print(f"sounds: {len(store)}")
    print(f"manual space: {fx} x {fy}, grid {args.grid}")
    print(f"occupied cells: {int((grid > 0).sum())}")
    print(f"coverage: {cov:.4f}")
    out = plot_density(
        grid,
        Path(args.store) / f"dataset_{fx}_{fy}.png",
        xlabel=fx,
        ylabel=fy,
    )
    print(f"plot: {out}")
    return 0


def cmd_bench_render(args) -> int:
    rng = np.random.default_rng(args.seed)
    genomes = []
    for i in range(args.count):
        g = G.minimal_genome(args.seed + i)
        for _ in range(10):
            g = G.mutate(g, rng)
        genomes.append(g)
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"rendering {args.count} genomes x {args.duration}s at 16 kHz")
    outputs = {}
    timings = {}
    for backend in backends:
        render_debug(genomes[0], duration_s=args.duration, backend=backend)
        t0 = time.perf_counter()
        bufs = [
            render_debug(g, duration_s=args.duration, backend=backend)[0]
            for g in genomes
        ]
        elapsed = time.perf_counter() - t0
        timings[backend] = elapsed
        outputs[backend] = bufs
        audio = args.count * args.duration
        print(
            f"  {backend}: {elapsed:.3f}s total, "
            f"{1000 * elapsed / args.count:.1f} ms/render, "
            f"{audio / elapsed:.1f}x realtime"
        )
    if len(backends) == 2:
        a, b = backends
        slow, fast = (a, b) if timings[a] > timings[b] else (b, a)
        print(f"speedup: {fast} is {timings[slow] / timings[fast]:.2f}x {slow}")
        identical = all(
            np.array_equal(x.samples, y.samples)
            for x, y in zip(outputs[a], outputs[b])
        )
        print(f"outputs bit-identical: {'yes' if identical else 'NO'}")
        if not identical:
            return 2
    return 0


def cmd_render_genome(args) -> int:
    run_dir = Path(args.run_dir)
    table = run_dir / "elites_genomes.json"
    if not table.is_file():
        raise FileNotFoundError(f"no elites_genomes.json under {run_dir}")
    doc = json.loads(table.read_text())
    key = ",".join(p.strip() for p in args.cell.split(","))
    if key not in doc:
        sample = ", ".join(sorted(doc)[:8])
        raise ValueError(f"no elite in cell {key!r}; occupied cells include {sample}")
    genome = G.deserialize(doc[key].encode())

    duration, rate, pitch = args.duration, args.rate, args.pitch
    manifest_path = run_dir / "manifest.json"
    if manifest_path.is_file():
        render_cfg = json.loads(manifest_path.read_text())["config"]["render"]
        duration = duration if duration is not None else render_cfg["duration_s"]
        rate = rate if rate is not None else render_cfg["sample_rate"]
        pitch = pitch if pitch is not None else render_cfg["pitch_hz"]
    duration = duration if duration is not None else 4.0
    rate = rate if rate is not None else 16000
    pitch = pitch if pitch is not None else 220.0

    buf, info = render_debug(
        genome, duration_s=duration, sample_rate=rate, pitch_hz=pitch
    )
    out = Path(args.out) if args.out else Path(f"elite_{key.replace(',', '_')}.wav")
    write_wav(out, buf)
    print(f"cell: {key}")
    print(f"duration: {duration}s at {rate} Hz (pitch {pitch} Hz)")
    print(f"peak: {info.peak:.3f}{' (normalized)' if info.normalized else ''}")
    print(f"wav: {out}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _add_run_overrides(sub) -> None:
    sub.add_argument("--out", help="output directory (overrides the config)")
    sub.add_argument("--workers", type=int, help="evaluation worker processes")
    sub.add_argument("--seed", type=int, help="run seed (overrides the config)")


def build_parser() -> _Parser:
    parser = _Parser(
        prog="qdsound",
        description="Quality-diversity search over evolved synthesizer sounds.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress details"
    )
    subs = parser.add_subparsers(dest="command", metavar="command")

    refdb = subs.add_parser("refdb", help="reference corpus tooling")
    refdb_subs = refdb.add_subparsers(dest="refdb_command", metavar="action")
    p = refdb_subs.add_parser("ingest", help="build a reference store from WAVs")
    p.add_argument("corpus", help="directory of WAV files")
    p.add_argument("--out", required=True, help="store output directory")
    p.add_argument(
        "--force-hnsw",
        action="store_true",
        help="use the graph index even for small corpora",
    )
    p.set_defaults(func=cmd_refdb_ingest)

    p = subs.add_parser("run", help="start a search run")
    p.add_argument("--config", required=True, help="run config file")
    _add_run_overrides(p)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("resume", help="continue a run from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint JSON written by a previous run")
    p.add_argument("--config", required=True, help="the same config the run used")
    _add_run_overrides(p)
    p.set_defaults(func=cmd_resume)

    analyze = subs.add_parser("analyze", help="post-hoc analyses")
    analyze_subs = analyze.add_subparsers(dest="analyze_command", metavar="what")

    p = analyze_subs.add_parser("metrics", help="summarize and plot a run")
    p.add_argument("run_dir", help="run output directory")
    p.set_defaults(func=cmd_analyze_metrics)

    p = analyze_subs.add_parser(
        "remap", help="project a run's elites into a manual behaviour space"
    )
    p.add_argument("run_dir", help="run output directory")
    p.add_argument(
        "--bd",
        default="slope,rolloff",
        help="comma-separated spectral feature pair (default slope,rolloff)",
    )
    p.add_argument("--grid", type=int, default=100, help="grid size (default 100)")
    p.set_defaults(func=cmd_analyze_remap)

    p = analyze_subs.add_parser(
        "rank-features", help="rank spectral features over a reference store"
    )
    p.add_argument("store", help="reference store directory")
    p.add_argument(
        "--lam",
        type=float,
        default=RANK_LAMBDA,
        help=f"correlation penalty weight (default {RANK_LAMBDA})",
    )
    p.add_argument("--out", help="ranking CSV path (default inside the store)")
    p.set_defaults(func=cmd_analyze_rank)

    p = analyze_subs.add_parser(
        "dataset-coverage", help="project a reference corpus through a manual grid"
    )
    p.add_argument("store", help="reference store directory")
    p.add_argument(
        "--bd",
        default="slope,rolloff",
        help="comma-separated spectral feature pair (default slope,rolloff)",
    )
    p.add_argument("--grid", type=int, default=100, help="grid size (default 100)")
    p.set_defaults(func=cmd_analyze_dataset_coverage)

    p = subs.add_parser("bench-render", help="time the render backends")
    p.add_argument("--count", type=int, default=32, help="genomes to render")
    p.add_argument(
        "--duration", type=float, default=4.0, help="seconds per render"
    )
    p.add_argument("--seed", type=int, default=0, help="genome generation seed")
    p.set_defaults(func=cmd_bench_render)

    p = subs.add_parser("render-genome", help="render one archived elite to WAV")
    p.add_argument("run_dir", help="run output directory")
    p.add_argument("--cell", required=True, help="grid cell as 'row,col'")
    p.add_argument("--out", help="output WAV path")
    p.add_argument("--duration", type=float, help="override render duration")
    p.add_argument("--rate", type=int, help="override sample rate")
    p.add_argument("--pitch", type=float, help="override base pitch")
    p.set_defaults(func=cmd_render_genome)

    _collect_tokens(parser)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not hasattr(args, "func"):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except (RunAborted, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
