"""Run metrics and post-hoc analyses over run artifacts.

Everything here is read-only over what a run (or a reference store)
already wrote: diversity and coverage summaries, remapping elites into
a manually defined behaviour space, ranking candidate features for
manual axes, and projecting a reference corpus through a manual grid.
Plot exports use the Agg backend so they work headless.
"""

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .features import SPECTRAL_NAMES
from .projection import GRID_SIZE, ManualProjector, coords_to_cell

logger = logging.getLogger(__name__)

RANK_LAMBDA = 0.5  # correlation penalty weight in the feature ranking key

METRICS_COLUMNS = (
    "generation",
    "evaluations",
    "coverage",
    "diversity",
    "grid_mean_fitness",
    "qd_score",
    "goal_switches",
)


def diversity(vectors) -> float:
    """Mean pairwise cosine distance over the set.

    Zero vectors carry no direction, so they are dropped (with a
    warning) before pairing; fewer than two usable vectors gives 0.
    Computed through the identity
    sum_{i<j} u_i . u_j = (|sum u|^2 - n) / 2 on unit rows, which is
    O(n d) instead of O(n^2 d) and lets the per-generation metrics
    stay cheap at full archive sizes.
    """
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        mat = np.atleast_2d(mat)
    norms = np.sqrt((mat * mat).sum(axis=1))
    zero = norms == 0.0
    if zero.any():
        logger.warning("diversity: excluding %d zero vector(s)", int(zero.sum()))
        mat = mat[~zero]
        norms = norms[~zero]
    n = mat.shape[0]
    if n < 2:
        return 0.0
    unit = mat / norms[:, None]
    s = unit.sum(axis=0)
    mean_sim = (float(s @ s) - n) / (n * (n - 1))
    return 1.0 - mean_sim


def coverage(archive) -> float:
    return len(archive.cells) / (archive.grid_size * archive.grid_size)


# ---------------------------------------------------------------------------
# metrics files


def read_metrics(path) -> dict:
    """Load metrics.csv into column arrays keyed by header name."""
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    if tuple(header) != METRICS_COLUMNS:
        raise ValueError(f"unexpected metrics header {header}")
    mat = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: mat[:, i] for i, name in enumerate(header)}


def plot_metrics(run_dir, out_path=None) -> Path:
    """Line charts of the four per-generation metrics."""
    run_dir = Path(run_dir)
    cols = read_metrics(run_dir / "metrics.csv")
    out_path = Path(out_path) if out_path else run_dir / "metrics.png"
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    panels = (
        ("coverage", "Coverage"),
        ("diversity", "Diversity"),
        ("grid_mean_fitness", "Grid mean fitness"),
        ("qd_score", "QD score"),
    )
    for ax, (key, label) in zip(axes.ravel(), panels):
        ax.plot(cols["generation"], cols[key], linewidth=1.0)
        ax.set_title(label)
        ax.set_xlabel("generation")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_grid(snapshot_path, grid_size, out_path) -> Path:
    """Fitness heatmap of a grid snapshot CSV."""
    grid = np.full((grid_size, grid_size), np.nan)
    with open(snapshot_path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            grid[int(row["row"]), int(row["col"])] = float(row["fitness"])
    fig, ax = plt.subplots(figsize=(6, 5))
    shown = ax.imshow(grid.T, origin="lower", cmap="viridis", vmin=0.0, vmax=1.0)
    fig.colorbar(shown, ax=ax, label="fitness")
    ax.set_xlabel("behaviour x cell")
    ax.set_ylabel("behaviour y cell")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)


# ---------------------------------------------------------------------------
# remapping into a manual behaviour space


def remap_to_manual(spectral_rows, projector=None, grid_size: int = GRID_SIZE):
    """Project elite spectral features through a manual behaviour space.

    When no calibrated projector is passed, a default slope/rolloff
    projector is calibrated on the rows themselves (min-max over the
    set). Returns the occupancy count grid and its coverage.
    """
    rows = np.asarray(spectral_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("need at least one spectral feature row")
    if projector is None:
        projector = ManualProjector()
        projector.calibrate(rows)
    grid = np.zeros((grid_size, grid_size), dtype=np.int64)
    for row in rows:
        coord = projector.project(row, grid_size)
        grid[coord.cell] += 1
    cov = float((grid > 0).sum()) / (grid_size * grid_size)
    return grid, cov


# ---------------------------------------------------------------------------
# feature ranking


def rank_features(spectral_rows, lam: float = RANK_LAMBDA) -> list:
    """Rank spectral features by information content for manual axes.

    Variance is measured over min-max normalized values so features
    with different physical units compete fairly; a feature highly
    correlated (either sign) with another is down-ranked. Sort key:
    variance - lam * max|corr|, descending, names breaking ties.
    """
    rows = np.asarray(spectral_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("need at least 2 sounds to rank features")
    if rows.shape[1] != len(SPECTRAL_NAMES):
        raise ValueError(f"expected {len(SPECTRAL_NAMES)} feature columns")
    lo = rows.min(axis=0)
    hi = rows.max(axis=0)
    span = hi - lo
    unit = np.where(span > 0.0, (rows - lo) / np.where(span == 0.0, 1.0, span), 0.0)
    var = unit.var(axis=0)
    n_feat = rows.shape[1]
    max_corr = np.zeros(n_feat)
    std = unit.std(axis=0)
    centered = unit - unit.mean(axis=0)
    for i in range(n_feat):
        for j in range(n_feat):
            if i == j or std[i] == 0.0 or std[j] == 0.0:
                continue
            corr = float(centered[:, i] @ centered[:, j]) / (
                rows.shape[0] * std[i] * std[j]
            )
            max_corr[i] = max(max_corr[i], abs(corr))
    ranked = [
        {
            "name": SPECTRAL_NAMES[i],
            "variance": float(var[i]),
            "max_abs_correlation": float(max_corr[i]),
            "key": float(var[i] - lam * max_corr[i]),
        }
        for i in range(n_feat)
    ]
    ranked.sort(key=lambda r: (-r["key"], r["name"]))
    return ranked


def write_ranking_csv(ranked, path, lam: float = RANK_LAMBDA) -> None:
    with open(path, "w") as fh:
        fh.write(f"# key = variance - {repr(float(lam))} * max_abs_correlation\n")
        fh.write("rank,name,variance,max_abs_correlation,key\n")
        for pos, row in enumerate(ranked, start=1):
            fh.write(
                f"{pos},{row['name']},{repr(row['variance'])},"
                f"{repr(row['max_abs_correlation'])},{repr(row['key'])}\n"
            )


# ---------------------------------------------------------------------------
# dataset projection coverage


def dataset_projection_coverage(store, fx: str, fy: str, grid_size: int = GRID_SIZE):
    """Project a reference corpus into an (fx, fy) manual grid.

    Calibration is min-max over the corpus itself; a degenerate axis
    (all sounds identical on it) collapses to coordinate 0 rather than
    erroring, since a corpus is whatever the user ingested.
    """
    if store.spectral is None:
        raise ValueError("store has no spectral features; re-ingest the corpus")
    for name in (fx, fy):
        if name not in SPECTRAL_NAMES:
            raise ValueError(f"unknown spectral feature {name!r}")
    ix = SPECTRAL_NAMES.index(fx)
    iy = SPECTRAL_NAMES.index(fy)
    cols = store.spectral[:, (ix, iy)]
    lo = cols.min(axis=0)
    hi = cols.max(axis=0)
    span = hi - lo
    grid = np.zeros((grid_size, grid_size), dtype=np.int64)
    for row in cols:
        u = np.where(span > 0.0, (row - lo) / np.where(span == 0.0, 1.0, span), 0.0)
        grid[coords_to_cell(float(u[0]), float(u[1]), grid_size)] += 1
    cov = float((grid > 0).sum()) / (grid_size * grid_size)
    return grid, cov


def plot_density(grid, out_path, xlabel: str = "x", ylabel: str = "y") -> Path:
    """Log-scaled density heatmap of an occupancy count grid."""
    counts = np.asarray(grid, dtype=np.float64)
    shown_vals = np.log1p(counts)
    fig, ax = plt.subplots(figsize=(6, 5))
    shown = ax.imshow(shown_vals.T, origin="lower", cmap="magma")
    fig.colorbar(shown, ax=ax, label="log(1 + count)")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)


# ---------------------------------------------------------------------------
# goal switches from a run's event log


def read_event_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
