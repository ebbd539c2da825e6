"""Grid-road town generation, serialization and lane-level route construction.

Roads run along grid lines, carry one lane per direction (right-hand traffic)
and meet in square intersection boxes. Signalized intersections (three or more
roads) cycle between a north-south and an east-west green phase separated by
all-red intervals.
"""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .geometry import Pose

TOWN_MAGIC = "SGDTOWN1"

LANE_WIDTH = 4.0
ROAD_HALF_WIDTH = LANE_WIDTH
LANE_OFFSET = LANE_WIDTH / 2
BOX_HALF = 7.0
RIGHT_TURN_RADIUS = 6.0
LEFT_TURN_RADIUS = 10.0
RASTER_RES = 0.25

GREEN_TICKS = 40
ALL_RED_TICKS = 5
CYCLE_TICKS = 2 * (GREEN_TICKS + ALL_RED_TICKS)

Node = tuple  # (i, j) grid index


def _right(u):
    return np.array([u[1], -u[0]], dtype=float)


@dataclass(frozen=True)
class Approach:
    """A signalized lane entering an intersection."""
    node: tuple
    direction: np.ndarray  # unit travel direction of the incoming lane
    stop_point: np.ndarray  # lane center at the intersection box edge
    axis: str  # "ns" or "ew"


@dataclass
class TownMap:
    seed: int
    xs: np.ndarray
    ys: np.ndarray
    edges: list  # sorted list of ((i, j), (i2, j2)) with the smaller node first
    light_offsets: dict  # node -> phase offset in ticks
    lane_width: float = LANE_WIDTH

    @property
    def nodes(self):
        return [(i, j) for i in range(len(self.xs)) for j in range(len(self.ys))]

    def node_xy(self, node) -> np.ndarray:
        return np.array([self.xs[node[0]], self.ys[node[1]]], dtype=float)

    @cached_property
    def adjacency(self) -> dict:
        adj = {n: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for n in adj:
            adj[n].sort()
        return adj

    @property
    def intersections(self):
        """Nodes where at least two roads meet, with their light group (or None)."""
        return [(n, n in self.light_offsets) for n in self.nodes if len(self.adjacency[n]) >= 2]

    @property
    def lane_segments(self):
        """Directed lane centerlines ``(start, end)`` between intersection boxes."""
        segs = []
        for a, b in self.edges:
            for s, e in ((a, b), (b, a)):
                ps, pe = self.node_xy(s), self.node_xy(e)
                u = (pe - ps) / np.linalg.norm(pe - ps)
                off = LANE_OFFSET * _right(u)
                segs.append((ps + off + BOX_HALF * u, pe + off - BOX_HALF * u))
        return segs

    @property
    def spawn_points(self):
        pts = []
        for a, b in self.edges:
            for s, e in ((a, b), (b, a)):
                ps, pe = self.node_xy(s), self.node_xy(e)
                u = (pe - ps) / np.linalg.norm(pe - ps)
                mid = 0.5 * (ps + pe) + LANE_OFFSET * _right(u)
                pts.append(Pose(mid, u))
        return pts

    @cached_property
    def approaches(self):
        out = []
        for node in sorted(self.light_offsets):
            c = self.node_xy(node)
            for nb in self.adjacency[node]:
                u = c - self.node_xy(nb)
                u = u / np.linalg.norm(u)
                stop = c - BOX_HALF * u + LANE_OFFSET * _right(u)
                axis = "ns" if abs(u[1]) > 0.5 else "ew"
                out.append(Approach(node, u, stop, axis))
        return out

    def light_is_green(self, node, axis: str, tick: int) -> bool:
        phase = (tick + self.light_offsets[node]) % CYCLE_TICKS
        if axis == "ns":
            return phase < GREEN_TICKS
        return GREEN_TICKS + ALL_RED_TICKS <= phase < 2 * GREEN_TICKS + ALL_RED_TICKS

    # drivable raster ----------------------------------------------------------------
    @cached_property
    def raster_origin(self) -> np.ndarray:
        return np.array([self.xs[0] - 30.0, self.ys[0] - 30.0])

    @cached_property
    def drivable(self) -> np.ndarray:
        """Boolean raster (rows along y, cols along x) at ``RASTER_RES`` meters."""
        ox, oy = self.raster_origin
        nxr = int(math.ceil((self.xs[-1] + 30.0 - ox) / RASTER_RES))
        nyr = int(math.ceil((self.ys[-1] + 30.0 - oy) / RASTER_RES))
        cx = ox + (np.arange(nxr) + 0.5) * RASTER_RES
        cy = oy + (np.arange(nyr) + 0.5) * RASTER_RES
        grid = np.zeros((nyr, nxr), dtype=bool)

        def fill(x0, x1, y0, y1):
            ix = (cx >= x0) & (cx <= x1)
            iy = (cy >= y0) & (cy <= y1)
            grid[np.ix_(iy, ix)] = True

        for a, b in self.edges:
            pa, pb = self.node_xy(a), self.node_xy(b)
            lo, hi = np.minimum(pa, pb), np.maximum(pa, pb)
            if pa[0] == pb[0]:
                fill(lo[0] - ROAD_HALF_WIDTH, lo[0] + ROAD_HALF_WIDTH, lo[1], hi[1])
            else:
                fill(lo[0], hi[0], lo[1] - ROAD_HALF_WIDTH, lo[1] + ROAD_HALF_WIDTH)
        for n in self.nodes:
            if self.adjacency[n]:
                x, y = self.node_xy(n)
                fill(x - BOX_HALF, x + BOX_HALF, y - BOX_HALF, y + BOX_HALF)
        return grid

    def is_drivable(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        grid = self.drivable
        c = np.floor((pts[..., 0] - self.raster_origin[0]) / RASTER_RES).astype(np.int64)
        r = np.floor((pts[..., 1] - self.raster_origin[1]) / RASTER_RES).astype(np.int64)
        inside = (r >= 0) & (r < grid.shape[0]) & (c >= 0) & (c < grid.shape[1])
        out = np.zeros(pts.shape[:-1], dtype=bool)
        out[inside] = grid[r[inside], c[inside]]
        return out

    # serialization ------------------------------------------------------------------
    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{TOWN_MAGIC}\n")
        buf.write(f"seed {self.seed}\n")
        buf.write(f"lane_width {self.lane_width!r}\n")
        buf.write("xs " + " ".join(repr(float(v)) for v in self.xs) + "\n")
        buf.write("ys " + " ".join(repr(float(v)) for v in self.ys) + "\n")
        for a, b in self.edges:
            buf.write(f"edge {a[0]} {a[1]} {b[0]} {b[1]}\n")
        for n in sorted(self.light_offsets):
            buf.write(f"light {n[0]} {n[1]} {self.light_offsets[n]}\n")
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        return self.to_text().encode("ascii")

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "TownMap":
        lines = text.splitlines()
        if not lines or lines[0] != TOWN_MAGIC:
            raise FormatError("not a town file (bad magic)")
        seed, lw, xs, ys, edges, lights = None, LANE_WIDTH, None, None, [], {}
        for line in lines[1:]:
            key, *rest = line.split()
            if key == "seed":
                seed = int(rest[0])
            elif key == "lane_width":
                lw = float(rest[0])
            elif key == "xs":
                xs = np.array([float(v) for v in rest])
            elif key == "ys":
                ys = np.array([float(v) for v in rest])
            elif key == "edge":
                i, j, i2, j2 = map(int, rest)
                edges.append(((i, j), (i2, j2)))
            elif key == "light":
                i, j, off = map(int, rest)
                lights[(i, j)] = off
            else:
                raise FormatError(f"unknown town record {key!r}")
        if seed is None or xs is None or ys is None:
            raise FormatError("town file is missing required records")
        return cls(seed, xs, ys, edges, lights, lw)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TownMap":
        return cls.from_text(Path(path).read_text(encoding="ascii"))


def _connected(nodes, edges) -> bool:
    adj = {n: set() for n in nodes}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    start = nodes[0]
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return len(seen) == len(nodes)


def generate_town(seed: int, size=(4, 4), block_range=(40.0, 55.0), drop_fraction=0.15) -> TownMap:
    """Deterministic grid town with ``size`` blocks; some interior roads are removed per seed."""
    nbx, nby = size
    if nbx < 3 or nby < 3:
        raise ConfigError("town size must be at least 3x3 blocks")
    rng = np.random.default_rng(seed)
    # whole-meter block lengths keep the serialized map short and exact
    xs = np.concatenate([[0.0], np.cumsum(rng.integers(block_range[0], block_range[1] + 1, nbx))]).astype(float)
    ys = np.concatenate([[0.0], np.cumsum(rng.integers(block_range[0], block_range[1] + 1, nby))]).astype(float)
    nodes = [(i, j) for i in range(nbx + 1) for j in range(nby + 1)]
    edges = []
    for i in range(nbx + 1):
        for j in range(nby + 1):
            if i < nbx:
                edges.append(((i, j), (i + 1, j)))
            if j < nby:
                edges.append(((i, j), (i, j + 1)))
    n_drop = int(round(drop_fraction * len(edges)))
    order = rng.permutation(len(edges))
    current = list(edges)
    dropped = 0
    for k in order:
        if dropped >= n_drop:
            break
        e = edges[k]
        trial = [x for x in current if x != e]
        deg = {}
        for a, b in trial:
            deg[a] = deg.get(a, 0) + 1
            deg[b] = deg.get(b, 0) + 1
        if any(deg.get(n, 0) < 2 for n in nodes):
            continue
        if not _connected(nodes, trial):
            continue
        current = trial
        dropped += 1
    current.sort()
    deg = {}
    for a, b in current:
        deg[a] = deg.get(a, 0) + 1
        deg[b] = deg.get(b, 0) + 1
    lights = {n: int(rng.integers(0, CYCLE_TICKS)) for n in nodes if deg.get(n, 0) >= 3}
    return TownMap(int(seed), xs, ys, current, lights)


# routes ---------------------------------------------------------------------------------

def _arc(center, radius, a0, a1, step):
    sweep = a1 - a0
    n = max(2, int(math.ceil(abs(sweep) * radius / step)) + 1)
    t = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)], axis=1)


def _line(p0, p1, step):
    d = np.linalg.norm(p1 - p0)
    n = max(2, int(math.ceil(d / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return p0 + t * (p1 - p0)


def route_polyline(town: TownMap, node_seq, step: float = 0.25, start_frac=0.5, end_frac=0.5) -> np.ndarray:
    """Dense lane-centerline polyline through ``node_seq`` with circular turn arcs.

    The route starts ``start_frac`` of the way along the first road and ends
    ``end_frac`` of the way along the last one.
    """
    if len(node_seq) < 2:
        raise ValueError("a route needs at least two nodes")
    P = [town.node_xy(n) for n in node_seq]
    dirs = [(P[i + 1] - P[i]) / np.linalg.norm(P[i + 1] - P[i]) for i in range(len(P) - 1)]
    off0 = LANE_OFFSET * _right(dirs[0])
    cursor = P[0] + start_frac * (P[1] - P[0]) + off0
    pieces = []
    for k in range(1, len(P) - 1):
        u, v = dirs[k - 1], dirs[k]
        node = P[k]
        cross = u[0] * v[1] - u[1] * v[0]
        if abs(cross) < 1e-9:
            continue  # straight through
        corner = node + LANE_OFFSET * (_right(u) + _right(v))
        right_turn = cross < 0
        R = RIGHT_TURN_RADIUS if right_turn else LEFT_TURN_RADIUS
        t1 = corner - R * u
        t2 = corner + R * v
        center = t1 + (R * _right(u) if right_turn else -R * _right(u))
        a0 = math.atan2(t1[1] - center[1], t1[0] - center[0])
        a1 = math.atan2(t2[1] - center[1], t2[0] - center[0])
        sweep = (a1 - a0 + math.pi) % (2 * math.pi) - math.pi
        pieces.append(_line(cursor, t1, step))
        pieces.append(_arc(center, R, a0, a0 + sweep, step))
        cursor = t2
    offl = LANE_OFFSET * _right(dirs[-1])
    end = P[-2] + end_frac * (P[-1] - P[-2]) + offl
    pieces.append(_line(cursor, end, step))
    pts = [pieces[0]]
    for p in pieces[1:]:
        pts.append(p[1:] if np.allclose(p[0], pts[-1][-1]) else p)
    return np.concatenate(pts, axis=0)


def polyline_length(pts) -> float:
    return float(np.hypot(*np.diff(np.asarray(pts), axis=0).T).sum())


def random_route(town: TownMap, rng: np.random.Generator, min_length: float):
    """Random walk without U-turns, returning ``(node_seq, dense_polyline)`` of at least ``min_length`` meters."""
    a, b = town.edges[int(rng.integers(len(town.edges)))]
    seq = [a, b] if rng.random() < 0.5 else [b, a]
    while True:
        prev, cur = seq[-2], seq[-1]
        choices = [n for n in town.adjacency[cur] if n != prev]
        seq.append(choices[int(rng.integers(len(choices)))])
        if len(seq) >= 3:
            pts = route_polyline(town, seq)
            if polyline_length(pts) >= min_length:
                return seq, pts


def block_loops(town: TownMap):
    """Node cycles around every block whose four roads all exist, driven clockwise (right turns only)."""
    edge_set = set(town.edges)
    loops = []
    for i in range(len(town.xs) - 1):
        for j in range(len(town.ys) - 1):
            cyc = [(i, j), (i, j + 1), (i + 1, j + 1), (i + 1, j)]
            ok = all(tuple(sorted((cyc[k], cyc[(k + 1) % 4]))) in edge_set for k in range(4))
            if ok:
                loops.append(cyc)
    return loops
