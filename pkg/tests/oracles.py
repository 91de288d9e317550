"""Brute-force reference implementations used only by the tests.

These deliberately avoid the package's own search and rasterisation code.
"""

import math

import numpy as np

SQRT2 = math.sqrt(2.0)


def _less(p, q):
    """Exact a1 + b1*sqrt2 < a2 + b2*sqrt2, given p = a1 - a2 and q = b2 - b1."""
    if p < 0 <= q:
        return True
    if q <= 0 <= p:
        return False
    if p >= 0:
        return p * p < 2 * q * q
    return p * p > 2 * q * q


def explicit_edges(cells, traversable_unknown=False):
    """8-connected edge list with (axial, diagonal) weights and no corner cutting."""
    h, w = cells.shape
    ok = (cells != 1) if traversable_unknown else (cells == 0)
    edges = []
    for r in range(h):
        for c in range(w):
            if not ok[r, c]:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < h and 0 <= nc < w) or not ok[nr, nc]:
                        continue
                    if dr and dc and not (ok[r, nc] and ok[nr, c]):
                        continue
                    edges.append(((r, c), (nr, nc), (0, 1) if dr and dc else (1, 0)))
    return edges


def bellman_ford(cells, sources, traversable_unknown=False):
    """Exact shortest distances in Z[sqrt2] by repeated relaxation until a fixpoint."""
    h, w = cells.shape
    ok = (cells != 1) if traversable_unknown else (cells == 0)
    best = {}
    for col, row in sources:
        if ok[row, col]:
            best[(row, col)] = (0, 0)
    edges = explicit_edges(cells, traversable_unknown)
    changed = True
    while changed:
        changed = False
        for u, v, (da, db) in edges:
            if u not in best:
                continue
            a, b = best[u][0] + da, best[u][1] + db
            if v not in best or _less(a - best[v][0], best[v][1] - b):
                best[v] = (a, b)
                changed = True
    out = np.full((h, w), np.finfo(np.float64).max)
    for (r, c), (a, b) in best.items():
        out[r, c] = a + b * SQRT2
    return out


def ramp_by_cell(shape, path, start=1.0, norm=10.0, floor=0.1, canvas=None):
    """Per-cell evaluator: each cell takes the ramp at its smallest arc length on the path."""
    out = np.zeros(shape) if canvas is None else np.array(canvas, dtype=np.float64)
    h, w = shape
    for r in range(h):
        for c in range(w):
            best = None
            for k, cell in enumerate(path):
                if (cell[0], cell[1]) != (c, r):
                    continue
                a = b = 0
                for j in range(k):
                    dx = abs(path[j + 1][0] - path[j][0])
                    dy = abs(path[j + 1][1] - path[j][1])
                    a += max(dx, dy) - min(dx, dy)
                    b += min(dx, dy)
                if best is None or _less(a - best[0], best[1] - b):
                    best = (a, b)
            if best is not None:
                v = max(start - (best[0] + best[1] * SQRT2) / norm, floor)
                out[r, c] = max(out[r, c], v)
    return out


def line_of_sight(cells, x0, y0, col, row, step=0.25):
    """True if the segment from (x0, y0) to the centre of (col, row) avoids obstacles.

    Samples at ``step`` intervals; obstacle samples inside the target cell are allowed.
    """
    h = cells.shape[0]
    tx, ty = col + 0.5, h - row - 0.5
    dist = math.hypot(tx - x0, ty - y0)
    n = max(1, int(math.ceil(dist / step)))
    for k in range(1, n):
        x = x0 + (tx - x0) * k / n
        y = y0 + (ty - y0) * k / n
        c, r = math.floor(x), h - 1 - math.floor(y)
        if (c, r) == (col, row):
            continue
        if cells[r, c] == 1:
            return False
    return True


def fully_occluded(cells, x0, y0, col, row, samples=5):
    """True if every segment from (x0, y0) to points spread inside (col, row) crosses an obstacle."""
    h = cells.shape[0]
    offsets = [(k + 0.5) / samples for k in range(samples)]
    for ox in offsets:
        for oy in offsets:
            tx, ty = col + ox, h - row - 1 + oy
            n = max(1, int(math.ceil(math.hypot(tx - x0, ty - y0) / 0.02)))
            blocked = False
            for k in range(1, n):
                x = x0 + (tx - x0) * k / n
                y = y0 + (ty - y0) * k / n
                c, r = math.floor(x), h - 1 - math.floor(y)
                if (c, r) != (col, row) and cells[r, c] == 1:
                    blocked = True
                    break
            if not blocked:
                return False
    return True


def center_ray_blocked(cells, x0, y0, col, row, margin=0.1):
    """True if the straight ray to the centre of (col, row) passes strictly inside an obstacle.

    "Strictly" means at least ``margin`` away from the obstacle cell's edges.
    """
    h = cells.shape[0]
    tx, ty = col + 0.5, h - row - 0.5
    n = max(1, int(math.ceil(math.hypot(tx - x0, ty - y0) / 0.01)))
    for k in range(1, n):
        x = x0 + (tx - x0) * k / n
        y = y0 + (ty - y0) * k / n
        c, r = math.floor(x), h - 1 - math.floor(y)
        if (c, r) == (col, row) or cells[r, c] != 1:
            continue
        if margin < x - c < 1 - margin and margin < y - math.floor(y) < 1 - margin:
            return True
    return False


def rotate_quarter_ccw(a):
    """Rotate an image 90 degrees counter-clockwise by explicit index mapping."""
    n, m = a.shape
    out = np.empty((m, n), dtype=a.dtype)
    for r in range(n):
        for c in range(m):
            out[m - 1 - c, r] = a[r, c]
    return out
