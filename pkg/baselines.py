"""
Non-learned reference estimators.

TEMP averages the travel times of historical trips whose origin,
destination and departure time of day are all close to the query.
Dijkstra builds an 8-neighbour graph over grid cells weighted by mean
historical traversal seconds and returns the cheapest path cost.
"""

from dataclasses import dataclass

import networkx as nx
import numpy as np
from sklearn.neighbors import BallTree

from config import SECONDS_PER_DAY, TempConfig, get_logger
from data_loader import EARTH_RADIUS_M, Dataset, haversine_m
from geo_pit import (MASK, OFFSET, TOD, CellIdx, GridSpec, ODTInput, cell_of, empty_pit,
                     normalize_tod)

log = get_logger(__name__)

DEFAULT_EDGE_SECONDS = 60.0
# BallTree prefilter slack; exact haversine decides membership
_RADIUS_SLACK = 1.001


class NoHistoryError(LookupError):
    """TEMP found no neighbour even after widening its thresholds."""


# ============================================================
# TEMP
# ============================================================

class HistoryIndex:
    """Training-split (ODT-Input, minutes) records with a BallTree on origins."""

    def __init__(self, records):
        records = list(records)
        if not records:
            raise NoHistoryError("no history")
        self.records = records
        self.o_lng = np.array([r[0].g_o.lng for r in records])
        self.o_lat = np.array([r[0].g_o.lat for r in records])
        self.d_lng = np.array([r[0].g_d.lng for r in records])
        self.d_lat = np.array([r[0].g_d.lat for r in records])
        self.tod = np.array([r[0].t_o % SECONDS_PER_DAY for r in records], dtype=np.float64)
        self.minutes = np.array([r[1] for r in records], dtype=np.float64)
        # BallTree's haversine metric wants (lat, lng) in radians
        self._tree = BallTree(np.radians(np.column_stack([self.o_lat, self.o_lng])), metric="haversine")

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "HistoryIndex":
        return cls(zip(dataset.odts(), dataset.travel_times()))

    def __len__(self):
        return len(self.records)

    def extended(self, odt: ODTInput, minutes: float) -> "HistoryIndex":
        return HistoryIndex(self.records + [(odt, minutes)])

    def neighbors(self, odt: ODTInput, radius_m: float, window_s: float) -> np.ndarray:
        """Indices of records within `radius_m` at both ends and `window_s` in time of day."""
        query = np.radians([[odt.g_o.lat, odt.g_o.lng]])
        cand = self._tree.query_radius(query, r=radius_m * _RADIUS_SLACK / EARTH_RADIUS_M)[0]
        cand = np.sort(cand)
        if cand.size == 0:
            return cand
        keep = haversine_m(odt.g_o.lng, odt.g_o.lat, self.o_lng[cand], self.o_lat[cand]) <= radius_m
        keep &= haversine_m(odt.g_d.lng, odt.g_d.lat, self.d_lng[cand], self.d_lat[cand]) <= radius_m
        keep &= circular_tod_gap(odt.t_o % SECONDS_PER_DAY, self.tod[cand]) <= window_s
        return cand[keep]


def circular_tod_gap(a, b) -> np.ndarray:
    """Seconds between two times of day, wrapping at midnight."""
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % SECONDS_PER_DAY
    return np.minimum(diff, SECONDS_PER_DAY - diff)


def temp_estimate(odt: ODTInput, hist: HistoryIndex, cfg: TempConfig = None) -> float:
    """Mean travel time (minutes) of similar historical trips."""
    cfg = cfg or TempConfig()
    radius, window = cfg.radius_m, cfg.window_min * 60.0
    found = hist.neighbors(odt, radius, window)
    for _ in range(cfg.max_expansions):
        if found.size >= cfg.min_neighbors:
            break
        radius, window = radius * 2.0, window * 2.0
        found = hist.neighbors(odt, radius, window)
    if found.size == 0:
        raise NoHistoryError("no history")
    return float(hist.minutes[found].mean())


# ============================================================
# CELL GRAPH / DIJKSTRA
# ============================================================

@dataclass(eq=False)
class CellGraph:
    graph: nx.DiGraph
    grid: GridSpec
    fallback: float
    observed: dict

    @property
    def L_G(self) -> int:
        return self.grid.L_G

    def weight(self, a: CellIdx, b: CellIdx) -> float:
        return float(self.graph.edges[(a.x, a.y), (b.x, b.y)]["weight"])


def _neighbors8(x: int, y: int, L: int):
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if (dx or dy) and 1 <= x + dx <= L and 1 <= y + dy <= L:
                yield x + dx, y + dy


def edge_samples(pits: np.ndarray) -> dict:
    """(from_cell, to_cell) -> list of traversal seconds, from visit order in each PiT."""
    samples = {}
    for pit in np.asarray(pits):
        xs, ys = np.nonzero(pit[..., MASK] >= 0)
        if xs.size < 2:
            continue
        # order by visit offset, ties by flattened position
        order = np.lexsort((xs + ys * pit.shape[0], pit[xs, ys, OFFSET]))
        xs, ys = xs[order] + 1, ys[order] + 1
        tod = pit[xs - 1, ys - 1, TOD]
        for k in range(len(xs) - 1):
            a, b = (int(xs[k]), int(ys[k])), (int(xs[k + 1]), int(ys[k + 1]))
            if max(abs(a[0] - b[0]), abs(a[1] - b[1])) != 1:
                continue
            delta = ((tod[k + 1] + 1) / 2 - (tod[k] + 1) / 2) * SECONDS_PER_DAY
            # crossings of midnight come out negative and are dropped
            if delta > 0:
                samples.setdefault((a, b), []).append(float(delta))
    return samples


def build_cell_graph(pits: np.ndarray, grid: GridSpec) -> CellGraph:
    """Directed 8-neighbour cell graph weighted by mean observed traversal seconds."""
    L = grid.L_G
    samples = edge_samples(pits)
    observed = {edge: float(np.mean(v)) for edge, v in sorted(samples.items())}
    if observed:
        fallback = float(np.mean(list(observed.values())))
    else:
        fallback = DEFAULT_EDGE_SECONDS
        log.warning(f"[WARNING] No edge traversals observed; all cell edges use {fallback:.0f} s")

    G = nx.DiGraph()
    for x in range(1, L + 1):
        for y in range(1, L + 1):
            G.add_node((x, y))
    for x in range(1, L + 1):
        for y in range(1, L + 1):
            for nb in _neighbors8(x, y, L):
                G.add_edge((x, y), nb, weight=observed.get(((x, y), nb), fallback))

    log.info(f"[OK] Cell graph: {len(observed)}/{G.number_of_edges()} edges observed, "
             f"fallback {fallback:.1f} s")
    return CellGraph(G, grid, fallback, observed)


def _endpoints(odt: ODTInput, graph: CellGraph):
    o, d = cell_of(odt.g_o, graph.grid), cell_of(odt.g_d, graph.grid)
    return (o.x, o.y), (d.x, d.y)


def dijkstra_estimate(odt: ODTInput, graph: CellGraph) -> float:
    """Cheapest cell-path cost between origin and destination cells, in minutes."""
    source, target = _endpoints(odt, graph)
    return nx.dijkstra_path_length(graph.graph, source, target, weight="weight") / 60.0


def dijkstra_route(odt: ODTInput, graph: CellGraph) -> list:
    source, target = _endpoints(odt, graph)
    return [CellIdx(x, y) for x, y in nx.dijkstra_path(graph.graph, source, target, weight="weight")]


def route_pit(cells, graph: CellGraph, t_o: int) -> np.ndarray:
    """Rasterize a routed cell path, timing each cell with cumulative edge weights."""
    L = graph.L_G
    pit = empty_pit(L)
    if not cells:
        return pit
    elapsed = np.zeros(len(cells))
    for k in range(1, len(cells)):
        elapsed[k] = elapsed[k - 1] + graph.weight(cells[k - 1], cells[k])
    total = elapsed[-1]
    xs = np.array([c.x for c in cells]) - 1
    ys = np.array([c.y for c in cells]) - 1
    pit[xs, ys, MASK] = 1.0
    pit[xs, ys, TOD] = normalize_tod(np.floor(t_o + elapsed).astype(np.int64))
    pit[xs, ys, OFFSET] = 2.0 * elapsed / total - 1.0 if total > 0 else -1.0
    return pit
