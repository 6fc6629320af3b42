"""
Seeded synthetic city: a Manhattan street grid with rush-hour congestion,
per-trip route jitter and occasional detours through a distant waypoint.
Produces trajectories in the same form as the CSV loader.
"""

import math

import networkx as nx
import numpy as np

from config import SECONDS_PER_DAY, SynthConfig, get_logger
from geo_pit import Trajectory

log = get_logger(__name__)

M_PER_DEG_LAT = 111320.0
ROUTE_JITTER = 0.2
RUSH_HOURS = (8.0, 18.0)
RUSH_WIDTH_H = 1.25
DAY_START_H, DAY_END_H = 6.0, 23.0


def manhattan(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def build_city(cfg: SynthConfig) -> nx.Graph:
    """Street grid; node (i, j) sits i blocks east and j blocks north of the origin."""
    G = nx.grid_2d_graph(cfg.road_grid_n, cfg.road_grid_n)
    m_per_deg_lng = M_PER_DEG_LAT * math.cos(math.radians(cfg.origin_lat))
    for (i, j), data in G.nodes(data=True):
        data["lng"] = cfg.origin_lng + i * cfg.block_m / m_per_deg_lng
        data["lat"] = cfg.origin_lat + j * cfg.block_m / M_PER_DEG_LAT
    for _, _, data in G.edges(data=True):
        data["length"] = cfg.block_m
    return G


def peak(tod_s) -> float:
    """Double rush-hour bump in [0, 1]."""
    h = (tod_s % SECONDS_PER_DAY) / 3600.0
    bump = sum(math.exp(-0.5 * ((h - c) / RUSH_WIDTH_H) ** 2) for c in RUSH_HOURS)
    return min(bump, 1.0)


def speed_at(cfg: SynthConfig, t: float) -> float:
    return cfg.speed_base * (1.0 - cfg.congestion_amplitude * peak(t))


def _edge_key(u, v):
    return (u, v) if u <= v else (v, u)


def _detour_waypoint(G, origin, dest, rng):
    """A node far off the direct route, like the "via place B" detour."""
    direct = manhattan(origin, dest)
    nodes = sorted(G.nodes())
    detour = np.array([manhattan(origin, w) + manhattan(w, dest) for w in nodes])
    for factor in (2.0, 1.6):
        candidates = np.flatnonzero(detour >= factor * direct)
        if candidates.size:
            return nodes[int(rng.choice(candidates))]
    return nodes[int(np.argmax(detour))]


def plan_route(G, origin, dest, rng, outlier: bool) -> list:
    """Shortest path under per-trip edge jitter, optionally via a detour node."""
    edges = sorted(_edge_key(u, v) for u, v in G.edges())
    jitter = rng.uniform(-ROUTE_JITTER, ROUTE_JITTER, size=len(edges))
    weights = {e: G.edges[e]["length"] * (1.0 + j) for e, j in zip(edges, jitter)}

    def weight(u, v, _):
        return weights[_edge_key(u, v)]

    if not outlier:
        return nx.shortest_path(G, origin, dest, weight=weight)
    via = _detour_waypoint(G, origin, dest, rng)
    first = nx.shortest_path(G, origin, via, weight=weight)
    second = nx.shortest_path(G, via, dest, weight=weight)
    return first + second[1:]


def simulate_trip(G, origin, dest, depart: int, cfg: SynthConfig, rng,
                  traj_id: str = "trip", force_outlier=None) -> Trajectory:
    """Drive one trip and sample noisy GPS fixes every `gps_interval_s`."""
    outlier = rng.random() < cfg.outlier_rate if force_outlier is None else bool(force_outlier)
    route = plan_route(G, origin, dest, rng, outlier)

    node_lng = np.array([G.nodes[n]["lng"] for n in route])
    node_lat = np.array([G.nodes[n]["lat"] for n in route])
    node_t = np.empty(len(route))
    node_t[0] = float(depart)
    for k in range(1, len(route)):
        length = G.edges[route[k - 1], route[k]]["length"]
        node_t[k] = node_t[k - 1] + length / speed_at(cfg, node_t[k - 1])

    t_end = int(round(node_t[-1]))
    sample_t = np.arange(float(depart), node_t[-1], cfg.gps_interval_s).round().astype(np.int64)
    sample_t = sample_t[sample_t < t_end]
    sample_t = np.append(sample_t, t_end)

    lng = np.interp(sample_t, node_t, node_lng)
    lat = np.interp(sample_t, node_t, node_lat)
    noise = rng.normal(0.0, cfg.gps_noise_m, size=(2, len(sample_t)))
    lng = lng + noise[0] / (M_PER_DEG_LAT * math.cos(math.radians(cfg.origin_lat)))
    lat = lat + noise[1] / M_PER_DEG_LAT
    return Trajectory(traj_id, lng, lat, sample_t)


def _sample_od(nodes, cfg: SynthConfig, rng):
    max_blocks = (cfg.road_grid_n - 1) * 3 // 2
    while True:
        o, d = rng.choice(len(nodes), size=2, replace=False)
        dist = manhattan(nodes[o], nodes[d])
        if cfg.min_od_blocks <= dist <= max_blocks:
            return nodes[int(o)], nodes[int(d)]


def generate_synthetic(cfg: SynthConfig) -> list:
    """Deterministic trajectories for a given seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    G = build_city(cfg)
    nodes = sorted(G.nodes())

    trajectories = []
    for idx in range(cfg.n_trajectories):
        origin, dest = _sample_od(nodes, cfg, rng)
        day = int(rng.integers(0, cfg.day_span))
        tod = rng.uniform(DAY_START_H * 3600, DAY_END_H * 3600)
        depart = cfg.start_epoch + day * SECONDS_PER_DAY + int(tod)
        trajectories.append(simulate_trip(G, origin, dest, depart, cfg, rng, traj_id=f"syn{idx:06d}"))

    log.info(f"[OK] Generated {len(trajectories)} synthetic trajectories "
             f"({cfg.road_grid_n}x{cfg.road_grid_n} grid, outlier_rate={cfg.outlier_rate})")
    return trajectories
