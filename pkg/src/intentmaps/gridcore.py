"""Grid geometry shared by the simulator, perception and rendering.

Conventions used throughout the package:

* Arrays are indexed ``[row, col]`` with row 0 at the top of a rendered image.
* Continuous poses live in an x-right / y-up frame measured in cells, so the
  centre of cell ``(col, row)`` sits at ``(col + 0.5, height - row - 0.5)``.
* A heading of ``pi / 2`` faces "up" (towards row 0).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

FREE = 0
OBSTACLE = 1
UNKNOWN = 2

SQRT2 = math.sqrt(2.0)
# Sentinel for cells that cannot be reached; downstream normalisation clamps it.
UNREACHABLE = float(np.finfo(np.float64).max)

# (dcol, drow) in expansion order E, NE, N, NW, W, SW, S, SE. Rows grow downward.
NEIGHBORS = ((1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1))

ScalarMap = np.ndarray


class GridError(ValueError):
    """Invalid input to a grid operation."""


class CellCoord(NamedTuple):
    col: int
    row: int


def normalize_heading(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = math.pi / 2

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_heading(self.heading))


@dataclass(frozen=True)
class RampSpec:
    normalization_length: float
    start_value: float = 1.0
    floor_value: float = 0.1

    def __post_init__(self):
        if not self.start_value > self.floor_value >= 0:
            raise GridError("ramp needs start_value > floor_value >= 0")
        if not self.normalization_length > 0:
            raise GridError("ramp normalization_length must be positive")

    @classmethod
    def for_crop(cls, out_size: int) -> "RampSpec":
        """Default ramp: decays over the diagonal of the egocentric crop."""
        return cls(normalization_length=out_size * SQRT2)


@dataclass
class OccupancyGrid:
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.ndim != 2 or min(self.cells.shape) < 1:
            raise GridError(f"grid must be a non-empty 2D array, got shape {self.cells.shape}")

    @classmethod
    def filled(cls, width: int, height: int, state: int = FREE) -> "OccupancyGrid":
        return cls(np.full((height, width), state, dtype=np.int8))

    @classmethod
    def walled(cls, width: int, height: int) -> "OccupancyGrid":
        """Free interior of the given size surrounded by a one-cell obstacle border."""
        cells = np.full((height + 2, width + 2), OBSTACLE, dtype=np.int8)
        cells[1:-1, 1:-1] = FREE
        return cls(cells)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def in_bounds(self, cell: CellCoord) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def state(self, cell: CellCoord) -> int:
        return int(self.cells[cell[1], cell[0]])

    def passable(self, traversable_unknown: bool) -> np.ndarray:
        if traversable_unknown:
            return self.cells != OBSTACLE
        return self.cells == FREE

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.cells.copy())


def cell_center(cell: CellCoord, height: int) -> tuple[float, float]:
    return cell[0] + 0.5, height - cell[1] - 0.5


def pose_cell(pose: Pose, height: int) -> CellCoord:
    return CellCoord(math.floor(pose.x), height - 1 - math.floor(pose.y))


def pose_at(cell: CellCoord, height: int, heading: float = math.pi / 2) -> Pose:
    x, y = cell_center(cell, height)
    return Pose(x, y, heading)


def step_heading(src: CellCoord, dst: CellCoord) -> float:
    """Heading of the move src -> dst in the y-up frame."""
    return math.atan2(src[1] - dst[1], dst[0] - src[0])


def octile(a: CellCoord, b: CellCoord) -> tuple[int, int]:
    """8-connected free-space distance between two cells as (axial, diagonal) step counts."""
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dx, dy) - min(dx, dy), min(dx, dy)


def _grid_array(grid) -> np.ndarray:
    return grid.cells if isinstance(grid, OccupancyGrid) else np.asarray(grid)


def _check_cell(cell, height: int, width: int, what: str) -> CellCoord:
    cell = CellCoord(int(cell[0]), int(cell[1]))
    if not (0 <= cell.col < width and 0 <= cell.row < height):
        raise GridError(f"{what} {tuple(cell)} outside {width}x{height} grid")
    return cell


def _octile_search(ok: list, width: int, height: int, sources: Iterable[int]):
    """Multi-source Dijkstra over the 8-connected lattice.

    Costs are tracked as exact (axial, diagonal) step counts so that the float
    value ``axial + diagonal * sqrt(2)`` is a pure function of the optimum and
    does not depend on relaxation order.
    """
    n = width * height
    dist = [math.inf] * n
    axial = [-1] * n
    diag = [-1] * n
    heap = []
    for s in sources:
        if ok[s] and dist[s] != 0.0:
            dist[s] = 0.0
            axial[s] = diag[s] = 0
            heap.append((0.0, s))
    heapq.heapify(heap)
    while heap:
        d, i = heapq.heappop(heap)
        if d > dist[i]:
            continue
        r, c = divmod(i, width)
        a0, b0 = axial[i], diag[i]
        for dc, dr in NEIGHBORS:
            nc, nr = c + dc, r + dr
            if not (0 <= nc < width and 0 <= nr < height):
                continue
            j = nr * width + nc
            if not ok[j]:
                continue
            if dc and dr:
                if not (ok[r * width + nc] and ok[nr * width + c]):
                    continue
                a, b = a0, b0 + 1
            else:
                a, b = a0 + 1, b0
            nd = a + b * SQRT2
            if nd < dist[j]:
                dist[j] = nd
                axial[j] = a
                diag[j] = b
                heapq.heappush(heap, (nd, j))
    return dist, axial, diag


def distance_field(grid: OccupancyGrid, sources, traversable_unknown: bool = False) -> ScalarMap:
    """Shortest 8-connected path cost from the nearest source to every cell.

    Axial steps cost 1 and diagonal steps sqrt(2); a diagonal step is only
    allowed when both orthogonally adjacent cells are traversable. Cells that
    cannot be reached (including untraversable ones) hold ``UNREACHABLE``.
    """
    h, w = grid.shape
    sources = list(sources)
    if not sources:
        raise GridError("distance_field needs at least one source")
    idx = []
    for s in sources:
        cell = _check_cell(s, h, w, "source")
        idx.append(cell.row * w + cell.col)
    ok = grid.passable(traversable_unknown).ravel().tolist()
    dist, _, _ = _octile_search(ok, w, h, idx)
    out = np.array(dist, dtype=np.float64).reshape(h, w)
    out[~np.isfinite(out)] = UNREACHABLE
    return out


def shortest_path(grid: OccupancyGrid, start: CellCoord, goal: CellCoord,
                  traversable_unknown: bool = False) -> list[CellCoord] | None:
    """Minimum-cost 8-connected path from start to goal, or None if unreachable.

    Ties between equal-cost paths are broken by taking the first neighbour in
    E, NE, N, NW, W, SW, S, SE order at every step.
    """
    h, w = grid.shape
    start = _check_cell(start, h, w, "start")
    goal = _check_cell(goal, h, w, "goal")
    ok = grid.passable(traversable_unknown).ravel().tolist()
    if not ok[start.row * w + start.col]:
        raise GridError(f"start {tuple(start)} is not traversable")
    dist, axial, diag = _octile_search(ok, w, h, [goal.row * w + goal.col])
    i = start.row * w + start.col
    if dist[i] == math.inf:
        return None
    path = [start]
    while axial[i] or diag[i]:
        r, c = divmod(i, w)
        for dc, dr in NEIGHBORS:
            nc, nr = c + dc, r + dr
            if not (0 <= nc < w and 0 <= nr < h):
                continue
            j = nr * w + nc
            if not ok[j]:
                continue
            if dc and dr:
                if not (ok[r * w + nc] and ok[nr * w + c]):
                    continue
                want = (axial[i], diag[i] - 1)
            else:
                want = (axial[i] - 1, diag[i])
            if (axial[j], diag[j]) == want:
                i = j
                path.append(CellCoord(nc, nr))
                break
        else:  # pragma: no cover - a finite distance always has a predecessor
            raise RuntimeError("broken distance field")
    return path


def path_cost(path: Sequence[CellCoord]) -> float:
    a = b = 0
    for p, q in zip(path, path[1:]):
        da, db = octile(p, q)
        a += da
        b += db
    return a + b * SQRT2


def bresenham(a: CellCoord, b: CellCoord) -> list[CellCoord]:
    """8-connected digital line from a to b, endpoints included."""
    x0, y0 = int(a[0]), int(a[1])
    x1, y1 = int(b[0]), int(b[1])
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append(CellCoord(x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def ramp_values(path: Sequence[CellCoord], ramp: RampSpec) -> list[float]:
    """Ramp value at each path cell from its cumulative 8-connected arc length."""
    a = b = 0
    out = []
    prev = None
    for cell in path:
        if prev is not None:
            da, db = octile(prev, cell)
            a += da
            b += db
        d = a + b * SQRT2
        out.append(max(ramp.start_value - d / ramp.normalization_length, ramp.floor_value))
        prev = cell
    return out


def rasterize_ramp_path(canvas: ScalarMap, path: Sequence[CellCoord], ramp: RampSpec) -> ScalarMap:
    """Write a linearly decaying ramp along a path; overlapping writes keep the max."""
    if not len(path):
        raise GridError("cannot rasterize an empty path")
    out = np.array(canvas, dtype=np.float64, copy=True)
    h, w = out.shape
    cells = [_check_cell(p, h, w, "path cell") for p in path]
    for cell, v in zip(cells, ramp_values(cells, ramp)):
        if v > out[cell.row, cell.col]:
            out[cell.row, cell.col] = v
    return out


def _rotation(heading: float) -> tuple[float, float]:
    a = heading - math.pi / 2
    # Rounding makes quarter turns exact and keeps cos/sin of opposite headings exact negatives.
    return round(math.cos(a), 12) + 0.0, round(math.sin(a), 12) + 0.0


def crop_sample_cells(pose: Pose, out_size: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) index arrays sampled by each cell of an egocentric crop."""
    if out_size < 1 or out_size % 2 == 0:
        raise GridError(f"egocentric crop size must be odd, got {out_size}")
    c = out_size // 2
    rr, cc = np.mgrid[0:out_size, 0:out_size]
    right = (cc - c).astype(np.float64)
    up = (c - rr).astype(np.float64)
    ca, sa = _rotation(pose.heading)
    wx = pose.x + ca * right - sa * up
    wy = pose.y + sa * right + ca * up
    cols = np.floor(wx).astype(np.int64)
    rows = height - 1 - np.floor(wy).astype(np.int64)
    return rows, cols


def egocentric_crop(source, pose: Pose, out_size: int, fill=0.0) -> ScalarMap:
    """Local map centred on the pose and rotated so the pose faces up.

    Nearest-neighbour sampling; cells that fall outside the source take ``fill``.
    """
    src = _grid_array(source)
    h, w = src.shape
    rows, cols = crop_sample_cells(pose, out_size, h)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    out = np.full((out_size, out_size), fill, dtype=src.dtype)
    out[inside] = src[rows[inside], cols[inside]]
    return out


def _angle_diff(a: float, b: float) -> float:
    return abs(normalize_heading(a - b))


def raycast_visibility(grid: OccupancyGrid, pose: Pose, fov: float, max_range: float) -> set[CellCoord]:
    """Cells seen by a 2D range sensor at ``pose``.

    Rays are cast towards points spaced half a cell apart on the boundary of
    the square enclosing the sensor range and traverse the grid cell by cell
    (Amanatides-Woo); each ray stops at the first obstacle, which is itself
    reported. A cell is returned when some ray reaches it, its centre lies
    within range and within fov/2 of the heading, and the straight segment to
    its centre does not pass through the core of another obstacle cell.
    """
    if not 0 < fov <= 2 * math.pi + 1e-12:
        raise GridError("fov must lie in (0, 2pi]")
    if max_range <= 0:
        raise GridError("range must be positive")
    h, w = grid.shape
    cells = grid.cells
    x0, y0 = pose.x, pose.y
    half = fov / 2
    full_circle = fov >= 2 * math.pi - 1e-9
    home = pose_cell(pose, h)
    seen = {home} if grid.in_bounds(home) else set()

    def accept(ix: int, iy: int) -> bool:
        dx, dy = ix + 0.5 - x0, iy + 0.5 - y0
        if dx * dx + dy * dy > max_range * max_range:
            return False
        if full_circle or (dx == 0 and dy == 0):
            return True
        return _angle_diff(math.atan2(dy, dx), pose.heading) <= half

    reach = math.ceil(max_range)
    ticks = np.arange(-reach, reach, 0.5)
    boundary = ([(t, -reach) for t in ticks] + [(reach, t) for t in ticks]
                + [(-t, reach) for t in ticks] + [(-reach, -t) for t in ticks])
    # Margin so rays just outside the cone still reach cells whose centres are inside.
    slack = math.atan2(1.0, 1.0) if reach <= 1 else math.asin(min(1.0, 1.0 / reach))
    limit = max_range + 1.0
    candidates = set()
    for bx, by in boundary:
        ang = math.atan2(by, bx)
        if not full_circle and _angle_diff(ang, pose.heading) > half + slack:
            continue
        for ix, iy in _traverse(cells, x0, y0, math.cos(ang), math.sin(ang), limit):
            if accept(ix, iy):
                candidates.add((ix, iy))
    for ix, iy in candidates:
        if _segment_clear(cells, x0, y0, ix + 0.5, iy + 0.5, (ix, iy)):
            seen.add(CellCoord(ix, h - 1 - iy))
    return seen


def _segment_clear(cells: np.ndarray, x0: float, y0: float, x1: float, y1: float,
                   target: tuple[int, int], margin: float = 0.1) -> bool:
    """True if no obstacle cell other than ``target`` blocks the segment.

    Obstacles are shrunk by ``margin`` on each side so grazing contact with a
    corner does not occlude.
    """
    h, w = cells.shape
    dx, dy = x1 - x0, y1 - y0
    lo_x, hi_x = max(0, math.floor(min(x0, x1))), min(w - 1, math.floor(max(x0, x1)))
    lo_y, hi_y = max(0, math.floor(min(y0, y1))), min(h - 1, math.floor(max(y0, y1)))
    for iy in range(lo_y, hi_y + 1):
        row = h - 1 - iy
        for ix in range(lo_x, hi_x + 1):
            if cells[row, ix] != OBSTACLE or (ix, iy) == target:
                continue
            t0, t1 = 0.0, 1.0
            for p0, d, lo in ((x0, dx, ix), (y0, dy, iy)):
                a, b = lo + margin, lo + 1 - margin
                if abs(d) < 1e-12:
                    if not a <= p0 <= b:
                        t0, t1 = 1.0, 0.0
                    continue
                ta, tb = (a - p0) / d, (b - p0) / d
                if ta > tb:
                    ta, tb = tb, ta
                t0, t1 = max(t0, ta), min(t1, tb)
            if t0 <= t1:
                return False
    return True


def _traverse(cells: np.ndarray, x0: float, y0: float, dx: float, dy: float, limit: float):
    """Yield (ix, iy) cells crossed by a ray in the y-up frame (Amanatides-Woo).

    Stops after yielding the first obstacle, on leaving the grid, or past ``limit``.
    An exact corner crossing touches both side cells, and either one blocks.
    """
    h, w = cells.shape
    ix, iy = math.floor(x0), math.floor(y0)
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    t_max_x = ((ix + (dx > 0)) - x0) / dx if abs(dx) > 1e-12 else math.inf
    t_max_y = ((iy + (dy > 0)) - y0) / dy if abs(dy) > 1e-12 else math.inf
    t_dx = abs(1 / dx) if abs(dx) > 1e-12 else math.inf
    t_dy = abs(1 / dy) if abs(dy) > 1e-12 else math.inf
    while True:
        if abs(t_max_x - t_max_y) < 1e-9:
            t = t_max_x
            if t > limit:
                return
            blocked = False
            for sx, sy in ((ix + step_x, iy), (ix, iy + step_y)):
                srow = h - 1 - sy
                if 0 <= sx < w and 0 <= srow < h and cells[srow, sx] == OBSTACLE:
                    yield sx, sy
                    blocked = True
            if blocked:
                return
            t_max_x += t_dx
            t_max_y += t_dy
            ix += step_x
            iy += step_y
        elif t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_dx
            ix += step_x
        else:
            t = t_max_y
            t_max_y += t_dy
            iy += step_y
        if t > limit:
            return
        row = h - 1 - iy
        if not (0 <= ix < w and 0 <= row < h):
            return
        yield ix, iy
        if cells[row, ix] == OBSTACLE:
            return


def _to_bytes(values: np.ndarray, value_range=None) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = np.where(v >= UNREACHABLE, np.nan, v)
    finite = v[np.isfinite(v)]
    if value_range is not None:
        lo, hi = map(float, value_range)
    else:
        lo = float(finite.min()) if finite.size else 0.0
        hi = float(finite.max()) if finite.size else 0.0
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    scaled = np.where(np.isnan(v), 1.0, scaled)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values, value_range=None) -> Path:
    """Write a map as binary PGM (P5), scaled to 8 bits.

    Values are min-max normalised unless ``value_range`` is given.
    Unreachable markers render white.
    """
    arr = _to_bytes(_grid_array(values), value_range)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        f.write(arr.tobytes())
    return path


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Write an (H, W, 3) uint8 image as binary PPM (P6)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 image written by this module."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic, dims, _maxval, body = parts
    w, h = map(int, dims.split())
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)
