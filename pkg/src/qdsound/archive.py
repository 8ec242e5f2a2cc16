"""MAP-Elites container with novelty protection and remapping.

The archive is a sparse grid holding at most one elite per cell. A
freshly settled elite is protected for the next 10 generations: while
protected it only yields to a challenger at least 10% fitter. After a
projector retrain the whole population is re-projected through the new
behaviour space (``remap``), survivors of cell collisions keeping their
spot by fitness.

Every settlement and eviction is appended to an event log. The log is
complete: replaying it from scratch reproduces the archive's occupancy
state exactly, which the tests use as an event-sourcing check.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .projection import GRID_SIZE, BehaviourCoord

PROTECTION_GENERATIONS = 10
PROTECTION_FACTOR = 1.1

PLACED_NEW = "placed_new"
REPLACED = "replaced"
REJECTED = "rejected"


@dataclass
class Elite:
    genome_id: str
    fitness: float
    features: np.ndarray
    coord: BehaviourCoord
    generation: int  # generation of the most recent settlement
    parent_cell: Optional[tuple] = None
    protection_until: int = 0


@dataclass
class GoalSwitchStats:
    settlements: int = 0
    cross_cell: int = 0


# Events intentionally carry scalars only (no feature vectors), so the
# log stays light enough to stream to disk at full run scale. Replay
# therefore reproduces the archive's identity state: cell -> (genome id,
# fitness, coords, generation, parent cell, protection).
@dataclass(frozen=True)
class EliteState:
    genome_id: str
    fitness: float
    x: float
    y: float
    generation: int
    parent_cell: Optional[tuple]
    protection_until: int


def _payload(ev: dict) -> EliteState:
    parent = ev["parent_cell"]
    return EliteState(
        ev["genome_id"],
        ev["fitness"],
        ev["x"],
        ev["y"],
        ev["gen"],
        tuple(parent) if parent is not None else None,
        ev["protection_until"],
    )


class Archive:
    def __init__(self, grid_size: int = GRID_SIZE):
        if grid_size < 1:
            raise ValueError("grid size must be positive")
        self.grid_size = grid_size
        self.cells: dict = {}
        self.events: list = []
        self.remap_epochs = 0

    def __len__(self) -> int:
        return len(self.cells)

    def occupied_cells(self) -> list:
        return sorted(self.cells)

    def coverage(self) -> float:
        return len(self.cells) / (self.grid_size * self.grid_size)

    def _check_cell(self, cell) -> None:
        row, col = cell
        if not (0 <= row < self.grid_size and 0 <= col < self.grid_size):
            raise ValueError(f"cell {cell} outside {self.grid_size}x{self.grid_size} grid")

    def _settle(self, kind: str, elite: Elite, cell, current_gen: int, **extra) -> None:
        elite.generation = current_gen
        elite.protection_until = current_gen + PROTECTION_GENERATIONS
        self.cells[cell] = elite
        self.events.append(
            {
                "type": kind,
                "gen": current_gen,
                "cell": list(cell),
                "genome_id": elite.genome_id,
                "fitness": elite.fitness,
                "x": elite.coord.x,
                "y": elite.coord.y,
                "parent_cell": list(elite.parent_cell) if elite.parent_cell else None,
                "protection_until": elite.protection_until,
                **extra,
            }
        )

    def try_place(self, candidate: Elite, current_gen: int) -> str:
        """Offer a candidate to its cell and report what happened.

        Empty cell: the candidate settles. Occupied: a protected
        occupant only yields to a candidate at least 10% fitter, an
        unprotected one to any strictly fitter candidate. Ties keep
        the incumbent.
        """
        cell = candidate.coord.cell
        self._check_cell(cell)
        occupant = self.cells.get(cell)
        if occupant is None:
            self._settle("place", candidate, cell, current_gen)
            return PLACED_NEW
        if current_gen < occupant.protection_until:
            wins = candidate.fitness >= occupant.fitness * PROTECTION_FACTOR
        else:
            wins = candidate.fitness > occupant.fitness
        if not wins:
            return REJECTED
        self._settle(
            "replace", candidate, cell, current_gen, displaced_id=occupant.genome_id
        )
        return REPLACED

    def remap(self, projector, current_gen: int) -> dict:
        """Re-project every elite through a freshly fitted projector.

        Elites are processed in descending fitness order (ties broken
        by genome id), so when several land in the same cell the
        fittest settles first and the rest are dropped. Every survivor
        is logged, same-cell or not, which keeps the event log
        sufficient to rebuild the archive.
        """
        order = sorted(self.cells.values(), key=lambda e: (-e.fitness, e.genome_id))
        epoch = self.remap_epochs
        self.remap_epochs += 1
        old_cells = {e.genome_id: cell for cell, e in self.cells.items()}
        self.cells = {}
        moved = dropped = 0
        for elite in order:
            coord = projector.project(elite.features, self.grid_size)
            source = old_cells[elite.genome_id]
            if coord.cell in self.cells:
                dropped += 1
                self.events.append(
                    {
                        "type": "remap_drop",
                        "gen": current_gen,
                        "epoch": epoch,
                        "cell": list(coord.cell),
                        "from_cell": list(source),
                        "genome_id": elite.genome_id,
                        "fitness": elite.fitness,
                    }
                )
                continue
            elite.coord = coord
            if coord.cell != source:
                moved += 1
            self._settle(
                "remap_move",
                elite,
                coord.cell,
                current_gen,
                epoch=epoch,
                from_cell=list(source),
            )
        return {"survivors": len(self.cells), "moved": moved, "dropped": dropped}

    def identity_state(self) -> dict:
        return {
            cell: EliteState(
                e.genome_id,
                e.fitness,
                e.coord.x,
                e.coord.y,
                e.generation,
                e.parent_cell,
                e.protection_until,
            )
            for cell, e in self.cells.items()
        }


def replay_events(events, grid_size: int = GRID_SIZE) -> dict:
    """Fold the event log into the final occupancy state.

    Ordinary placements apply one at a time. A remap block (contiguous
    events sharing an epoch) replaces the whole state with its
    survivors, because remapping rewrites every cell at once.
    """
    state: dict = {}
    i = 0
    n = len(events)
    while i < n:
        ev = events[i]
        kind = ev["type"]
        if kind in ("place", "replace"):
            cell = tuple(ev["cell"])
            state[cell] = _payload(ev)
            i += 1
        elif kind in ("remap_move", "remap_drop"):
            epoch = ev["epoch"]
            survivors: dict = {}
            while (
                i < n
                and events[i]["type"] in ("remap_move", "remap_drop")
                and events[i]["epoch"] == epoch
            ):
                if events[i]["type"] == "remap_move":
                    survivors[tuple(events[i]["cell"])] = _payload(events[i])
                i += 1
            state = survivors
        else:
            raise ValueError(f"unknown event type {kind!r}")
    return state


def goal_switch_stats(events) -> dict:
    """Per-cell settlement counts and cross-cell descendant counts.

    Only mutation-derived settlements participate: a child landing in
    a cell other than its parent's counts as a goal switch, while
    remap moves are bookkeeping and are excluded.
    """
    stats: dict = {}
    for ev in events:
        if ev["type"] not in ("place", "replace"):
            continue
        cell = tuple(ev["cell"])
        entry = stats.setdefault(cell, GoalSwitchStats())
        entry.settlements += 1
        parent = ev["parent_cell"]
        if parent is not None and tuple(parent) != cell:
            entry.cross_cell += 1
    return stats


def snapshot_rows(archive: Archive) -> list:
    """Grid occupancy as (row, col, fitness, genome id, generation)."""
    rows = []
    for (row, col) in sorted(archive.cells):
        e = archive.cells[(row, col)]
        rows.append((row, col, e.fitness, e.genome_id, e.generation))
    return rows


def write_snapshot_csv(archive: Archive, path) -> None:
    with open(path, "w") as fh:
        fh.write("row,col,fitness,genome_id,generation\n")
        for row, col, fitness, gid, gen in snapshot_rows(archive):
            fh.write(f"{row},{col},{repr(float(fitness))},{gid},{gen}\n")
