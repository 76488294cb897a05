"""Fixed-resolution 2D grid archive over xy descriptors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterator

import numpy as np

Cell = tuple[int, int]


def fmt(x: float | None) -> str:
    """Lossless decimal text for a float (17 significant digits)."""
    if x is None:
        return ""
    return format(float(x), ".17g")


def parse_float(s: str) -> float | None:
    return None if s == "" else float(s)


@dataclass
class Elite:
    occupant_id: Hashable
    objective: float
    achieved: tuple[float, float] | None = None
    # descriptor the occupant was supposed to hit; defaults to the cell center
    target: tuple[float, float] | None = None


@dataclass(frozen=True)
class QdMetrics:
    qd_score: float
    coverage: float
    best: float | None
    dem: float | None
    qd_score_offset: float = 0.0
    offset: float = 0.0
    occupied: int = 0
    total: int = 0


class GridArchive:
    def __init__(self, resolution: tuple[int, int], bounds: tuple[tuple[float, float], tuple[float, float]]):
        nx, ny = (int(v) for v in resolution)
        if nx < 1 or ny < 1:
            raise ValueError("archive resolution must be positive")
        (x_lo, x_hi), (y_lo, y_hi) = bounds
        if not (x_lo < x_hi and y_lo < y_hi):
            raise ValueError("archive bounds must be increasing")
        self.resolution = (nx, ny)
        self.bounds = ((float(x_lo), float(x_hi)), (float(y_lo), float(y_hi)))
        self.cell_size = ((x_hi - x_lo) / nx, (y_hi - y_lo) / ny)
        self._cells: dict[Cell, Elite] = {}

    @classmethod
    def for_maze(cls, maze, resolution: tuple[int, int]) -> "GridArchive":
        return cls(resolution, maze.bounds)

    def empty_like(self) -> "GridArchive":
        return GridArchive(self.resolution, self.bounds)

    @property
    def n_cells(self) -> int:
        return self.resolution[0] * self.resolution[1]

    def cell_of(self, descriptor, with_flag: bool = False):
        """Uniform binning; out-of-bounds descriptors land in the nearest edge cell.

        The upper bound itself belongs to the last bin. With ``with_flag`` the
        result is ``(cell, out_of_bounds)``.
        """
        out = False
        idx = []
        for d, (lo, hi), n in zip(descriptor, self.bounds, self.resolution):
            d = float(d)
            if d < lo or d > hi or math.isnan(d):
                out = True
            k = int(math.floor((d - lo) / (hi - lo) * n)) if not math.isnan(d) else 0
            idx.append(min(max(k, 0), n - 1))
        cell = (idx[0], idx[1])
        return (cell, out) if with_flag else cell

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        i, j = cell
        nx, ny = self.resolution
        if not (0 <= i < nx and 0 <= j < ny):
            raise IndexError(f"cell {cell} outside {self.resolution} archive")
        (x_lo, _), (y_lo, _) = self.bounds
        return (x_lo + (i + 0.5) * self.cell_size[0], y_lo + (j + 0.5) * self.cell_size[1])

    def cells(self) -> Iterator[Cell]:
        nx, ny = self.resolution
        for i in range(nx):
            for j in range(ny):
                yield (i, j)

    def insert(
        self,
        occupant_id: Hashable,
        objective: float,
        descriptor,
        *,
        target=None,
        cell: Cell | None = None,
    ) -> bool:
        """Insert an elite; returns True when it took the cell.

        An incumbent is replaced only by a strictly better objective.
        """
        if cell is None:
            cell = self.cell_of(descriptor)
        current = self._cells.get(cell)
        if current is not None and not objective > current.objective:
            return False
        achieved = None if descriptor is None else (float(descriptor[0]), float(descriptor[1]))
        tgt = None if target is None else (float(target[0]), float(target[1]))
        self._cells[cell] = Elite(occupant_id, float(objective), achieved, tgt)
        return True

    def __getitem__(self, cell: Cell) -> Elite | None:
        return self._cells.get(cell)

    def __contains__(self, cell: Cell) -> bool:
        return cell in self._cells

    def __len__(self) -> int:
        return len(self._cells)

    def items(self) -> list[tuple[Cell, Elite]]:
        return sorted(self._cells.items())

    def elites(self) -> list[Elite]:
        return [e for _, e in self.items()]

    def metrics(self, offset: float = 0.0) -> QdMetrics:
        """QD-score, coverage, best objective and descriptor error mean.

        ``offset`` is a lower bound on any objective; ``qd_score_offset`` sums
        ``objective - offset`` so empty cells never beat occupied ones.
        """
        items = self.items()
        occupied = len(items)
        if not items:
            return QdMetrics(0.0, 0.0, None, None, 0.0, offset, 0, self.n_cells)
        objs = [e.objective for _, e in items]
        errors = []
        for cell, e in items:
            if e.achieved is None:
                continue
            tx, ty = e.target if e.target is not None else self.cell_center(cell)
            errors.append(math.hypot(e.achieved[0] - tx, e.achieved[1] - ty))
        return QdMetrics(
            qd_score=float(sum(objs)),
            coverage=occupied / self.n_cells,
            best=float(max(objs)),
            dem=float(np.mean(errors)) if errors else None,
            qd_score_offset=float(sum(o - offset for o in objs)),
            offset=float(offset),
            occupied=occupied,
            total=self.n_cells,
        )

    def objective_grid(self) -> np.ndarray:
        grid = np.full(self.resolution, np.nan)
        for (i, j), e in self._cells.items():
            grid[i, j] = e.objective
        return grid

    def occupancy_grid(self) -> np.ndarray:
        grid = np.zeros(self.resolution, dtype=bool)
        for i, j in self._cells:
            grid[i, j] = True
        return grid


ARCHIVE_COLUMNS = ("i", "j", "objective", "achieved_x", "achieved_y", "target_x", "target_y", "occupant_id")


def write_archive_csv(archive: GridArchive, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ARCHIVE_COLUMNS)
        for (i, j), e in archive.items():
            ax, ay = e.achieved if e.achieved is not None else (None, None)
            tx, ty = e.target if e.target is not None else (None, None)
            w.writerow([i, j, fmt(e.objective), fmt(ax), fmt(ay), fmt(tx), fmt(ty), e.occupant_id])
    return path


def read_archive_csv(path: str | Path, resolution, bounds) -> GridArchive:
    archive = GridArchive(resolution, bounds)
    with Path(path).open(newline="") as f:
        for row in csv.DictReader(f):
            ax, ay = parse_float(row["achieved_x"]), parse_float(row["achieved_y"])
            tx, ty = parse_float(row.get("target_x", "")), parse_float(row.get("target_y", ""))
            occ = row["occupant_id"]
            occ = int(occ) if occ.lstrip("-").isdigit() else occ
            archive.insert(
                occ,
                float(row["objective"]),
                None if ax is None else (ax, ay),
                target=None if tx is None else (tx, ty),
                cell=(int(row["i"]), int(row["j"])),
            )
    return archive
