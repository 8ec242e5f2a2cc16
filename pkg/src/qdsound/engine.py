"""Run orchestration: seeding, the generational loop, retraining, checkpoints.

A run proceeds in two phases. The seed phase evaluates a fixed number
of random minimal-genome mutants, fits the feature normalization (when
no reference store supplies one) and the initial projector on their
features, then places them batch by batch. The loop phase then repeats:
select parents uniformly from occupied cells, mutate, evaluate the
batch on the worker pool, commit results in batch order, and at
schedule generations (dynamic regimes only) retrain the projector and
remap the archive.

Everything that influences search state flows through two seeded RNG
streams (variation and selection), so two runs with the same config
produce byte-identical metrics and snapshots regardless of worker
count: workers only evaluate, and evaluation is deterministic.
Checkpoints capture both streams plus the archive, projector, and
output-file byte offsets; resuming truncates the output files to those
offsets and continues as if never interrupted.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, genome as G
from .analysis import METRICS_COLUMNS, diversity
from .archive import REJECTED, Archive, Elite, write_snapshot_csv
from .features import NormStats, apply_norm, extract_all, fit_norm, write_features_csv
from .fitness import q_multi_ref, q_ref_free, q_single_ref
from .projection import (
    BehaviourCoord,
    ManualProjector,
    RetrainSchedule,
    fit_autoencoder,
    fit_pca,
    projector_from_dict,
)
from .refdb import load_store
from .render import active_backend, render_debug

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

PROJECTION_REGIMES = ("manual", "pca_static", "pca_dynamic", "ae_static", "ae_dynamic")
FITNESS_REGIMES = ("single_ref", "multi_ref", "ref_free")

INVALID_ABORT_FRACTION = 0.5


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class RunAborted(RuntimeError):
    pass


@dataclass
class FitnessSettings:
    regime: str = "ref_free"
    reference_id: Optional[str] = None  # single_ref target; default first entry
    k: int = 15
    power: float = 1.0

    def validate(self) -> None:
        if self.regime not in FITNESS_REGIMES:
            raise ValueError(f"unknown fitness regime {self.regime!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.power > 0:
            raise ValueError("power must be positive")


@dataclass
class RenderSettings:
    duration_s: float = 4.0
    sample_rate: int = 16000
    pitch_hz: float = 220.0


@dataclass
class RunConfig:
    seed: int = 0
    budget: int = 300000
    seed_iterations: int = 512
    batch_size: int = 64
    grid_size: int = 100
    projection: str = "pca_dynamic"
    fitness: FitnessSettings = field(default_factory=FitnessSettings)
    render: RenderSettings = field(default_factory=RenderSettings)
    rates: G.MutationRates = field(default_factory=G.MutationRates)
    store_path: Optional[str] = None
    out_dir: str = "run_out"
    workers: int = 1
    seed_mutations: int = 2
    retrain_increment: int = 50
    checkpoint_every: int = 500
    manual_x: str = "slope"
    manual_y: str = "rolloff"

    def validate(self) -> None:
        if self.budget < self.seed_iterations:
            raise ValueError("budget must cover the seed iterations")
        if self.seed_iterations < 1 or self.batch_size < 1:
            raise ValueError("seed_iterations and batch_size must be positive")
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if self.projection not in PROJECTION_REGIMES:
            raise ValueError(f"unknown projection regime {self.projection!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        self.fitness.validate()
        if self.fitness.regime in ("single_ref", "multi_ref") and not self.store_path:
            raise ValueError(f"{self.fitness.regime} requires a reference store")

    def is_dynamic(self) -> bool:
        return self.projection.endswith("_dynamic")

    def seed_generations(self) -> int:
        return _ceil_div(self.seed_iterations, self.batch_size)

    def total_generations(self) -> int:
        """Generations a full run will execute, seed batches included."""
        loop_evals = self.budget - self.seed_iterations
        return self.seed_generations() + _ceil_div(loop_evals, self.batch_size)

    def semantic_dict(self) -> dict:
        """Fields that define the run's results. Worker count and the
        output location are excluded: they must not change outcomes."""
        doc = asdict(self)
        doc.pop("out_dir")
        doc.pop("workers")
        return doc

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    if "fitness" in doc:
        doc["fitness"] = FitnessSettings(**doc["fitness"])
    if "render" in doc:
        doc["render"] = RenderSettings(**doc["render"])
    if "rates" in doc:
        doc["rates"] = G.MutationRates(**doc["rates"])
    return RunConfig(**doc)


@dataclass
class EvalResult:
    raw96: Optional[np.ndarray]
    spectral: Optional[np.ndarray]
    fitness: float
    flagged: bool = False
    error: Optional[str] = None

    @property
    def valid(self) -> bool:
        return self.error is None


@dataclass
class RunReport:
    generations: int
    loop_generations: int
    evaluations: int
    coverage: float
    diversity: float
    grid_mean_fitness: float
    qd_score: float
    goal_switches: int
    invalid_total: int
    retrain_generations: list
    wall_seconds: float
    out_dir: str


# ---------------------------------------------------------------------------
# worker-side evaluation
#
# Workers hold the render and fitness settings (plus the reference
# store, loaded once) in module state. They receive serialized genome
# bytes, never live objects, so the same code path serves the inline
# single-process mode and the multiprocessing pool.

_worker_ctx: dict = {}


def _worker_init(render_cfg: dict, fitness_cfg: dict, store_path, backend):
    ctx = {
        "render": render_cfg,
        "fitness": fitness_cfg,
        "backend": backend,
        "store": None,
        "ref": None,
    }
    if store_path is not None:
        store = load_store(store_path)
        ctx["store"] = store
        if fitness_cfg["regime"] == "single_ref":
            rid = fitness_cfg["reference_id"] or store.ids[0]
            pos = store.ids.index(rid)
            ctx["ref"] = store.normalized[pos]
    _worker_ctx.clear()
    _worker_ctx.update(ctx)


def _evaluate_genome(genome_bytes: bytes) -> EvalResult:
    ctx = _worker_ctx
    rcfg = ctx["render"]
    fcfg = ctx["fitness"]
    try:
        g = G.deserialize(genome_bytes)
        buf, info = render_debug(
            g,
            duration_s=rcfg["duration_s"],
            sample_rate=rcfg["sample_rate"],
            pitch_hz=rcfg["pitch_hz"],
            backend=ctx["backend"],
        )
        raw96, spec = extract_all(buf)
        regime = fcfg["regime"]
        if regime == "ref_free":
            fit = q_ref_free(buf)
        else:
            z = apply_norm(raw96, ctx["store"].norm)
            if regime == "single_ref":
                fit = q_single_ref(z, ctx["ref"], p=fcfg["power"])
            else:
                k = min(fcfg["k"], len(ctx["store"]))
                fit = q_multi_ref(z, ctx["store"], k=k, p=fcfg["power"])
        return EvalResult(raw96, spec.as_array(), float(fit), info.flagged)
    except Exception as exc:  # noqa: BLE001 - any failure invalidates the candidate
        return EvalResult(None, None, 0.0, error=f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# the run itself


class Run:
    """One QD run bound to an output directory.

    ``evaluate_batch``, ``make_seed`` and ``mutate`` are injection
    points: protocol-level tests replace them with cheap stand-ins to
    drive the full generational loop at scale without real synthesis.
    """

    def __init__(
        self,
        config: RunConfig,
        evaluate_batch=None,
        make_seed=None,
        mutate=None,
    ):
        config.validate()
        self.config = config
        self.out = Path(config.out_dir)
        self._evaluate_batch = evaluate_batch or self._evaluate_real
        self._make_seed = make_seed or self._default_seed
        self._mutate = mutate or self._default_mutate
        self._pool = None
        self._ctx_ready = False

        self.store = load_store(config.store_path) if config.store_path else None
        if self.store is not None and config.fitness.regime == "single_ref":
            rid = config.fitness.reference_id
            if rid is not None and rid not in self.store.ids:
                raise ValueError(f"reference id {rid!r} not in store")
        self.norm: Optional[NormStats] = self.store.norm if self.store else None
        self.projector = None
        self.schedule = RetrainSchedule(increment=config.retrain_increment)
        self.archive = Archive(config.grid_size)
        self.genomes: dict = {}  # genome_id -> Genome, live elites and recent extras
        self.spectrals: dict = {}  # genome_id -> 10-dim spectral vector
        self.generation = 0
        self.evaluations = 0
        self.goal_switches = 0
        self.invalid_total = 0
        self.retrain_generations: list = []
        var_ss, sel_ss = np.random.SeedSequence(config.seed).spawn(2)
        self.rng_var = np.random.Generator(np.random.PCG64(var_ss))
        self.rng_sel = np.random.Generator(np.random.PCG64(sel_ss))

        self._metrics_fh = None
        self._events_fh = None

    # -- variation defaults -------------------------------------------

    def _default_seed(self, index: int) -> G.Genome:
        g = G.minimal_genome(int(self.rng_var.integers(0, 2**63)))
        for _ in range(self.config.seed_mutations):
            g = G.mutate(g, self.rng_var, self.config.rates)
        return g

    def _default_mutate(self, parent: G.Genome) -> G.Genome:
        return G.mutate(parent, self.rng_var, self.config.rates)

    # -- evaluation ----------------------------------------------------

    def _worker_args(self):
        return (
            asdict(self.config.render),
            asdict(self.config.fitness),
            self.config.store_path,
            active_backend(),
        )

    def _ensure_pool(self):
        if self._pool is None and self.config.workers > 1:
            self._pool = Pool(
                self.config.workers,
                initializer=_worker_init,
                initargs=self._worker_args(),
            )
        return self._pool

    def _evaluate_real(self, genomes: list) -> list:
        payloads = [G.serialize(g) for g in genomes]
        pool = self._ensure_pool()
        if pool is not None:
            return pool.map(_evaluate_genome, payloads, chunksize=1)
        if not self._ctx_ready:
            _worker_init(*self._worker_args())
            self._ctx_ready = True
        return [_evaluate_genome(p) for p in payloads]

    # -- projection helpers --------------------------------------------

    def _projector_input(self, z: np.ndarray, spectral) -> np.ndarray:
        if self.config.projection == "manual":
            return spectral
        return z

    def _fit_initial_projector(self, z_rows: np.ndarray, spectral_rows: np.ndarray):
        cfg = self.config
        if cfg.projection == "manual":
            proj = ManualProjector(cfg.manual_x, cfg.manual_y)
            proj.calibrate(spectral_rows)
        elif cfg.projection.startswith("pca"):
            proj = fit_pca(z_rows)
        else:
            proj = fit_autoencoder(z_rows, seed=cfg.seed)
        self.projector = proj
        self._write_projector(0)

    def _retrain(self) -> None:
        cfg = self.config
        elites = [self.archive.cells[c] for c in self.archive.occupied_cells()]
        training = np.asarray([e.features for e in elites])
        gen = self.generation
        try:
            if cfg.projection == "pca_dynamic":
                self.projector = fit_pca(training, generation=gen)
            else:
                self.projector = fit_autoencoder(
                    training,
                    prior=self.projector,
                    seed=cfg.seed + len(self.retrain_generations) + 1,
                    generation=gen,
                )
        except ValueError as exc:
            # A degenerate elite population cannot define a new space;
            # keep the old projector and try again at the next event.
            logger.warning("retrain at generation %d skipped: %s", gen, exc)
            return
        self.archive.remap(self.projector, gen)
        self.retrain_generations.append(gen)
        self._write_projector(gen)

    # -- output plumbing -------------------------------------------------

    def _open_outputs(self, resuming: bool = False):
        self.out.mkdir(parents=True, exist_ok=True)
        for sub in ("snapshots", "checkpoints", "projectors"):
            (self.out / sub).mkdir(exist_ok=True)
        metrics = self.out / "metrics.csv"
        events = self.out / "events.jsonl"
        if not resuming:
            metrics.write_text(",".join(METRICS_COLUMNS) + "\n")
            events.write_text("")
            self._write_manifest()
        self._metrics_fh = open(metrics, "a")
        self._events_fh = open(events, "a")

    def _write_manifest(self):
        manifest = {
            "artifact_version": __version__,
            "config": asdict(self.config),
            "config_hash": self.config.config_hash(),
            "backend": active_backend(),
            "created_unix": time.time(),
            "store_digest": self._store_digest(),
        }
        (self.out / "manifest.json").write_text(
            json.dumps(manifest, indent=1, sort_keys=True)
        )

    def _store_digest(self) -> Optional[str]:
        if not self.config.store_path:
            return None
        root = Path(self.config.store_path)
        h = hashlib.sha256()
        for name in ("manifest.json", "features.bin"):
            h.update((root / name).read_bytes())
        return h.hexdigest()

    def _write_projector(self, gen: int):
        path = self.out / "projectors" / f"gen_{gen:06d}.json"
        path.write_text(json.dumps(self.projector.to_dict(), sort_keys=True))

    def _flush_events(self):
        for ev in self.archive.events:
            self._events_fh.write(json.dumps(ev, sort_keys=True) + "\n")
        self.archive.events.clear()
        self._events_fh.flush()

    def _metrics_row(self):
        elites = [self.archive.cells[c] for c in self.archive.occupied_cells()]
        if elites:
            fits = np.array([e.fitness for e in elites])
            div = diversity(np.asarray([e.features for e in elites]))
            mean_fit = float(fits.mean())
            qd = float(fits.sum())
        else:
            div = mean_fit = qd = 0.0
        row = (
            str(self.generation - 1),
            str(self.evaluations),
            repr(float(self.archive.coverage())),
            repr(float(div)),
            repr(mean_fit),
            repr(qd),
            str(self.goal_switches),
        )
        self._metrics_fh.write(",".join(row) + "\n")
        self._metrics_fh.flush()

    def _write_snapshot(self):
        write_snapshot_csv(
            self.archive, self.out / "snapshots" / f"gen_{self.generation:06d}.csv"
        )

    # -- commits ----------------------------------------------------------

    def _commit(self, child: G.Genome, result: EvalResult, parent_cell, gen: int):
        if not result.valid:
            self.invalid_total += 1
            return
        z = apply_norm(result.raw96, self.norm)
        coord = self.projector.project(
            self._projector_input(z, result.spectral), self.config.grid_size
        )
        elite = Elite(
            genome_id=child.lineage_id,
            fitness=result.fitness,
            features=z,
            coord=coord,
            generation=gen,
            parent_cell=parent_cell,
        )
        if self.archive.try_place(elite, gen) == REJECTED:
            return
        self.genomes[child.lineage_id] = child
        if result.spectral is not None:
            self.spectrals[child.lineage_id] = result.spectral
        if parent_cell is not None and parent_cell != coord.cell:
            self.goal_switches += 1

    def _prune_side_tables(self):
        live = {e.genome_id for e in self.archive.cells.values()}
        if len(self.genomes) > 2 * len(live):
            self.genomes = {g: v for g, v in self.genomes.items() if g in live}
            self.spectrals = {g: v for g, v in self.spectrals.items() if g in live}

    # -- phases -----------------------------------------------------------

    def _seed_phase(self):
        cfg = self.config
        seeds = [self._make_seed(i) for i in range(cfg.seed_iterations)]
        results = []
        for start in range(0, len(seeds), cfg.batch_size):
            batch_results = self._evaluate_batch(seeds[start : start + cfg.batch_size])
            self._abort_check(batch_results)
            results.extend(batch_results)

        valid = [r for r in results if r.valid]
        if not valid:
            raise RunAborted("seed phase produced no valid candidates")
        raw_rows = np.asarray([r.raw96 for r in valid])
        spectral_rows = np.asarray([r.spectral for r in valid])
        if self.norm is None:
            self.norm = fit_norm(raw_rows)
        self._fit_initial_projector(apply_norm(raw_rows, self.norm), spectral_rows)

        for start in range(0, len(seeds), cfg.batch_size):
            gen = self.generation
            batch = seeds[start : start + cfg.batch_size]
            for g, r in zip(batch, results[start : start + cfg.batch_size]):
                self._commit(g, r, None, gen)
            self.evaluations += len(batch)
            self.generation += 1
            self._flush_events()
            self._metrics_row()
        self._prune_side_tables()

    def _abort_check(self, results):
        bad = sum(1 for r in results if not r.valid)
        if bad > len(results) * INVALID_ABORT_FRACTION:
            examples = [r.error for r in results if not r.valid][:3]
            raise RunAborted(
                f"{bad}/{len(results)} candidates invalid in one batch; "
                f"first errors: {examples}"
            )

    def _loop_generation(self):
        cfg = self.config
        n = min(cfg.batch_size, cfg.budget - self.evaluations)
        cells = self.archive.occupied_cells()
        if not cells:
            raise RunAborted("archive is empty; nothing to select from")
        picks = self.rng_sel.integers(0, len(cells), size=n)
        parent_cells = [cells[int(i)] for i in picks]
        children = [
            self._mutate(self.genomes[self.archive.cells[cell].genome_id])
            for cell in parent_cells
        ]
        results = self._evaluate_batch(children)
        self._abort_check(results)
        gen = self.generation
        for child, result, pcell in zip(children, results, parent_cells):
            self._commit(child, result, pcell, gen)
        self.evaluations += n
        self.generation += 1
        if cfg.is_dynamic() and self.schedule.due(self.generation):
            self._retrain()
            self.schedule.advance()
        self._flush_events()
        self._metrics_row()
        self._prune_side_tables()
        if self.generation % cfg.checkpoint_every == 0:
            self._write_snapshot()
            self.checkpoint()

    # -- checkpointing ------------------------------------------------------

    def checkpoint(self) -> Path:
        cells = []
        for cell, e in sorted(self.archive.cells.items()):
            spec = self.spectrals.get(e.genome_id)
            cells.append(
                {
                    "cell": list(cell),
                    "genome_id": e.genome_id,
                    "fitness": e.fitness,
                    "features": e.features.tolist(),
                    "spectral": spec.tolist() if spec is not None else None,
                    "x": e.coord.x,
                    "y": e.coord.y,
                    "clamped": e.coord.clamped,
                    "generation": e.generation,
                    "parent_cell": list(e.parent_cell) if e.parent_cell else None,
                    "protection_until": e.protection_until,
                }
            )
        state = {
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config.config_hash(),
            "generation": self.generation,
            "evaluations": self.evaluations,
            "goal_switches": self.goal_switches,
            "invalid_total": self.invalid_total,
            "retrain_generations": self.retrain_generations,
            "schedule_n": self.schedule.n,
            "rng_var": self.rng_var.bit_generator.state,
            "rng_sel": self.rng_sel.bit_generator.state,
            "norm": self.norm.to_dict() if self.norm is not None else None,
            "projector": self.projector.to_dict(),
            "remap_epochs": self.archive.remap_epochs,
            "cells": cells,
            "genomes": {
                e.genome_id: G.serialize(self.genomes[e.genome_id]).decode()
                for e in self.archive.cells.values()
            },
            "metrics_offset": self._metrics_fh.tell(),
            "events_offset": self._events_fh.tell(),
        }
        path = self.out / "checkpoints" / f"gen_{self.generation:06d}.json"
        path.write_text(json.dumps(state, sort_keys=True))
        return path

    def _restore(self, state: dict):
        if state["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {state['version']} not supported")
        if state["config_hash"] != self.config.config_hash():
            raise ValueError("checkpoint belongs to a different configuration")
        self.generation = state["generation"]
        self.evaluations = state["evaluations"]
        self.goal_switches = state["goal_switches"]
        self.invalid_total = state["invalid_total"]
        self.retrain_generations = list(state["retrain_generations"])
        self.schedule = RetrainSchedule(
            increment=self.config.retrain_increment, n=state["schedule_n"]
        )
        self.rng_var.bit_generator.state = state["rng_var"]
        self.rng_sel.bit_generator.state = state["rng_sel"]
        self.norm = NormStats.from_dict(state["norm"]) if state["norm"] else None
        self.projector = projector_from_dict(state["projector"])
        self.archive = Archive(self.config.grid_size)
        self.archive.remap_epochs = state["remap_epochs"]
        self.spectrals = {}
        for doc in state["cells"]:
            cell = tuple(doc["cell"])
            coord = BehaviourCoord(doc["x"], doc["y"], cell, doc["clamped"])
            parent = tuple(doc["parent_cell"]) if doc["parent_cell"] else None
            self.archive.cells[cell] = Elite(
                doc["genome_id"],
                doc["fitness"],
                np.asarray(doc["features"], dtype=np.float64),
                coord,
                doc["generation"],
                parent,
                doc["protection_until"],
            )
            if doc["spectral"] is not None:
                self.spectrals[doc["genome_id"]] = np.asarray(
                    doc["spectral"], dtype=np.float64
                )
        self.genomes = {
            gid: G.deserialize(text.encode()) for gid, text in state["genomes"].items()
        }

    # -- top-level entry points ----------------------------------------------

    def run(self) -> RunReport:
        t0 = time.monotonic()
        self._open_outputs()
        try:
            self._seed_phase()
            while self.evaluations < self.config.budget:
                self._loop_generation()
            return self._finalize(t0)
        finally:
            self._close()

    def resume_from(self, checkpoint_path) -> RunReport:
        t0 = time.monotonic()
        state = json.loads(Path(checkpoint_path).read_text())
        self._restore(state)
        with open(self.out / "metrics.csv", "r+") as fh:
            fh.truncate(state["metrics_offset"])
        with open(self.out / "events.jsonl", "r+") as fh:
            fh.truncate(state["events_offset"])
        self._open_outputs(resuming=True)
        try:
            while self.evaluations < self.config.budget:
                self._loop_generation()
            return self._finalize(t0)
        finally:
            self._close()

    def _finalize(self, t0: float) -> RunReport:
        self._flush_events()
        self._write_snapshot()
        self.checkpoint()
        self._write_elites()
        elites = [self.archive.cells[c] for c in self.archive.occupied_cells()]
        fits = np.array([e.fitness for e in elites]) if elites else np.zeros(0)
        report = RunReport(
            generations=self.generation,
            loop_generations=self.generation - self.config.seed_generations(),
            evaluations=self.evaluations,
            coverage=self.archive.coverage(),
            diversity=diversity(np.asarray([e.features for e in elites]))
            if elites
            else 0.0,
            grid_mean_fitness=float(fits.mean()) if len(fits) else 0.0,
            qd_score=float(fits.sum()),
            goal_switches=self.goal_switches,
            invalid_total=self.invalid_total,
            retrain_generations=self.retrain_generations,
            wall_seconds=time.monotonic() - t0,
            out_dir=str(self.out),
        )
        (self.out / "report.json").write_text(
            json.dumps(asdict(report), indent=1, sort_keys=True)
        )
        return report

    def _write_elites(self):
        """Final elite genomes plus their feature table for later analysis."""
        cells = self.archive.occupied_cells()
        genomes_doc = {
            f"{r},{c}": G.serialize(
                self.genomes[self.archive.cells[(r, c)].genome_id]
            ).decode()
            for r, c in cells
        }
        (self.out / "elites_genomes.json").write_text(
            json.dumps(genomes_doc, sort_keys=True)
        )
        if not cells:
            return
        ids = [f"{r},{c}" for r, c in cells]
        vectors = np.asarray([self.archive.cells[c].features for c in cells])
        spec_rows = [self.spectrals.get(self.archive.cells[c].genome_id) for c in cells]
        spectral = (
            np.asarray(spec_rows) if all(s is not None for s in spec_rows) else None
        )
        write_features_csv(self.out / "elites_features.csv", ids, vectors, spectral)

    def _close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None
        for fh in (self._metrics_fh, self._events_fh):
            if fh is not None:
                fh.close()
        self._metrics_fh = self._events_fh = None


def run(config: RunConfig, **kwargs) -> RunReport:
    return Run(config, **kwargs).run()


def resume(checkpoint_path, config: RunConfig, **kwargs) -> RunReport:
    return Run(config, **kwargs).resume_from(checkpoint_path)
