#!/usr/bin/env python3
"""
DOT Travel Time Oracle – Comprehensive Test Suite
==================================================
Validates geometry and rasterization, the data pipeline, the numeric
kernel, both model stages, baselines, metrics, checkpoints and a miniature
end-to-end run.

Usage:
    python tests.py              # run all tests
    python tests.py -v           # verbose output
    python tests.py -k pit       # run only tests matching "pit"
    DOT_SLOW_TESTS=1 python tests.py   # include the long training experiments
"""

import json
import math
import os
import sys
import tempfile
import time
import unittest
from pathlib import Path

os.environ.setdefault("MPLCONFIGDIR", os.path.join(os.environ.get("TMPDIR", "/tmp"), "matplotlib"))
os.environ.setdefault("MPLBACKEND", "Agg")

import networkx as nx
import numpy as np
import torch
from torch import nn
from torch.func import functional_call

ROOT = Path(__file__).resolve().parent
SLOW = os.getenv("DOT_SLOW_TESTS", "0") == "1"
_t0 = time.time()

DAY0 = 1672617600  # a UTC midnight
GRAD_TOL = dict(eps=1e-4, atol=1e-6, rtol=1e-5)


def _fig3():
    """Three-point trajectory crossing a 3x3 grid diagonally: 9:00, 9:36, 12:00."""
    from geo_pit import AreaOfInterest, GridSpec, Trajectory
    grid = GridSpec(AreaOfInterest(0.0, 3.0, 0.0, 3.0), 3)
    traj = Trajectory("fig3", [2.5, 1.5, 0.5], [0.5, 1.5, 2.5],
                      [DAY0 + 9 * 3600, DAY0 + 9 * 3600 + 36 * 60, DAY0 + 12 * 3600])
    return traj, grid


def _tiny_denoiser(L_G=8, L_D=2, base=8, d=8, double=True, **kw):
    from denoiser import Denoiser, DenoiserConfig
    torch.manual_seed(0)
    model = Denoiser(DenoiserConfig(L_G=L_G, L_D=L_D, d=d, base_channels=base, heads=4, **kw))
    return model.double() if double else model


def _tiny_estimator(L_G=5, d_E=16, L_E=1, heads=4, double=True, seed=0, **kw):
    from estimator import Estimator, MViTConfig
    torch.manual_seed(seed)
    model = Estimator(MViTConfig(L_G=L_G, d_E=d_E, L_E=L_E, heads=heads, **kw))
    return model.double() if double else model


def _random_pits(n, L_G, rng, max_valid=None):
    from estimator import random_pit
    max_valid = max_valid or L_G * L_G
    return np.stack([random_pit(L_G, int(rng.integers(1, max_valid, size=None)), rng) for _ in range(n)])


def _mini_config(out_dir):
    from config import ExperimentConfig, SynthConfig
    return ExperimentConfig(
        L_G=8, N=10, L_D=1, d=8, base_channels=8, denoiser_heads=4,
        d_E=16, L_E=1, heads=4, epochs=1, estimator_epochs=2, batch_size=16,
        bench_grid_sizes=(6, 8), bench_valid_cells=4, bench_runs=2,
        out_dir=str(out_dir), num_workers=2,
        synth=SynthConfig(road_grid_n=8, n_trajectories=120, seed=7),
    )


class _EpsStub(nn.Module):
    """Denoiser double that returns a fixed tensor (scaled by a trainable zero-effect weight)."""

    def __init__(self, output):
        super().__init__()
        self.output = output
        self.w = nn.Parameter(torch.zeros((), dtype=output.dtype))

    def forward(self, X, n, odt):
        return self.output.expand_as(X) + 0.0 * self.w


# ────────────────────────────────────────────────────────────
# 1. MODULE IMPORTS
# ────────────────────────────────────────────────────────────

class TestImports(unittest.TestCase):
    """Every module must import without raising."""

    def test_import_config(self):
        import config
        self.assertTrue(hasattr(config, "ExperimentConfig"))
        self.assertTrue(callable(config.get_logger))

    def test_import_geo_and_data(self):
        import data_loader
        import geo_pit
        import synthetic
        self.assertTrue(callable(geo_pit.rasterize))
        self.assertTrue(callable(data_loader.split))
        self.assertTrue(callable(synthetic.generate_synthetic))

    def test_import_models(self):
        import denoiser
        import diffusion
        import estimator
        import nn_core
        self.assertTrue(callable(nn_core.multi_head_attention))
        self.assertTrue(callable(diffusion.infer_pit))
        self.assertTrue(hasattr(denoiser, "Denoiser"))
        self.assertTrue(hasattr(estimator, "Estimator"))

    def test_import_eval(self):
        import baselines
        import checkpoint
        import main
        import metrics
        import trainer
        self.assertTrue(callable(main.run_experiment))
        self.assertTrue(callable(trainer.infer_dataset))
        self.assertFalse(hasattr(trainer, "get_state"))
        self.assertTrue(callable(baselines.temp_estimate))
        self.assertTrue(callable(metrics.route_metrics))
        self.assertTrue(callable(checkpoint.save_checkpoint))


# ────────────────────────────────────────────────────────────
# 2. CONFIG MODULE
# ────────────────────────────────────────────────────────────

class TestConfig(unittest.TestCase):

    def test_defaults_are_optimal_values(self):
        from config import ExperimentConfig
        cfg = ExperimentConfig()
        self.assertEqual((cfg.L_G, cfg.N, cfg.L_D, cfg.d_E, cfg.L_E), (20, 1000, 3, 128, 2))
        self.assertEqual(cfg.epochs, 50)
        self.assertEqual(cfg.lr, 0.001)
        self.assertEqual(cfg.patience, 5)
        cfg.validate()

    def test_validate_rejects_odd_width(self):
        from config import ConfigError, ExperimentConfig
        with self.assertRaises(ConfigError):
            ExperimentConfig(d_E=127).validate()
        with self.assertRaises(ConfigError):
            ExperimentConfig(odt_ablation="nope").validate()
        with self.assertRaises(ConfigError):
            ExperimentConfig(train_fraction=0.0).validate()

    def test_json_layering(self):
        from config import ExperimentConfig
        cfg = ExperimentConfig.from_dict({"L_G": 15, "synth": {"n_trajectories": 50}})
        self.assertEqual(cfg.L_G, 15)
        self.assertEqual(cfg.synth.n_trajectories, 50)
        again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        self.assertEqual(again.to_dict(), cfg.to_dict())

    def test_unknown_key_named(self):
        from config import ConfigError, ExperimentConfig
        with self.assertRaises(ConfigError) as ctx:
            ExperimentConfig.from_dict({"L_Q": 3})
        self.assertIn("L_Q", str(ctx.exception))

    def test_override_skips_none(self):
        from config import ExperimentConfig
        cfg = ExperimentConfig().override(L_G=10, N=None)
        self.assertEqual(cfg.L_G, 10)
        self.assertEqual(cfg.N, 1000)

    def test_logger_single_handler(self):
        from config import get_logger
        a = get_logger("dot-test")
        b = get_logger("dot-test")
        self.assertIs(a, b)
        self.assertEqual(len(a.handlers), 1)


# ────────────────────────────────────────────────────────────
# 3. GEOMETRY AND PiT RASTERIZATION
# ────────────────────────────────────────────────────────────

class TestGeoPit(unittest.TestCase):

    def test_fig3_golden(self):
        from geo_pit import rasterize
        traj, grid = _fig3()
        pit = rasterize(traj, grid)
        expected = {(3, 1): (-0.25, -1.0), (2, 2): (-0.2, -0.6), (1, 3): (0.0, 1.0)}
        for x in range(1, 4):
            for y in range(1, 4):
                cell = pit[x - 1, y - 1]
                if (x, y) in expected:
                    tod, off = expected[(x, y)]
                    np.testing.assert_allclose(cell, [1.0, tod, off], atol=1e-12)
                else:
                    np.testing.assert_array_equal(cell, [-1.0, -1.0, -1.0])

    def test_fig3_travel_time_and_positions(self):
        from geo_pit import CellIdx, flatten_index, travel_time_of
        traj, _ = _fig3()
        self.assertEqual(travel_time_of(traj), 180.0)
        self.assertEqual({flatten_index(CellIdx(*c), 3) for c in [(3, 1), (2, 2), (1, 3)]}, {3, 5, 7})

    def test_aoi_bounding_box(self):
        from geo_pit import AOI_MARGIN_DEG, Trajectory, compute_area_of_interest
        aoi = compute_area_of_interest([Trajectory("a", [0.0, 1.0], [0.0, 2.0], [0, 60])])
        self.assertAlmostEqual(aoi.lng_min, -AOI_MARGIN_DEG)
        self.assertAlmostEqual(aoi.lng_max, 1.0 + AOI_MARGIN_DEG)
        self.assertAlmostEqual(aoi.lat_max, 2.0 + AOI_MARGIN_DEG)

    def test_aoi_random_points_match_min_max(self):
        from geo_pit import AOI_MARGIN_DEG, Trajectory, compute_area_of_interest
        rng = np.random.default_rng(1)
        lng, lat = rng.uniform(100, 101, 1000), rng.uniform(30, 31, 1000)
        trajs = [Trajectory(str(i), lng[i:i + 10], lat[i:i + 10], np.arange(10) * 30)
                 for i in range(0, 1000, 10)]
        aoi = compute_area_of_interest(trajs)
        self.assertAlmostEqual(aoi.lng_min + AOI_MARGIN_DEG, lng.min(), places=12)
        self.assertAlmostEqual(aoi.lat_max - AOI_MARGIN_DEG, lat.max(), places=12)

    def test_aoi_errors(self):
        from geo_pit import GeoError, Trajectory, compute_area_of_interest
        with self.assertRaises(GeoError) as ctx:
            compute_area_of_interest([])
        self.assertIn("no trajectories", str(ctx.exception))
        with self.assertRaises(GeoError):
            compute_area_of_interest([Trajectory("p", [5.0, 5.0], [5.0, 5.0], [0, 60])])

    def test_trajectory_rejects_non_finite(self):
        from geo_pit import Trajectory, TrajectoryError
        bad = [
            ([0.0, 1.0], [float("nan"), 1.0], [0, 60]),
            ([float("inf"), 1.0], [0.0, 1.0], [0, 60]),
            ([0.0, 1.0], [0.0, 1.0], [0.0, float("nan")]),
        ]
        for lng, lat, t in bad:
            with self.assertRaises(TrajectoryError) as ctx:
                Trajectory("n", lng, lat, t)
            self.assertIn("non-finite", str(ctx.exception))

    def test_cell_of_corners_and_midpoint(self):
        from geo_pit import AreaOfInterest, CellIdx, GeoError, GeoPoint, GridSpec, cell_of
        grid = GridSpec(AreaOfInterest(0.0, 1.0, 0.0, 1.0), 4)
        self.assertEqual(cell_of(GeoPoint(0.0, 0.0), grid), CellIdx(1, 1))
        self.assertEqual(cell_of(GeoPoint(1.0, 1.0), grid), CellIdx(4, 4))
        self.assertEqual(cell_of(GeoPoint(0.5, 0.5), grid), CellIdx(3, 3))
        with self.assertRaises(GeoError) as ctx:
            cell_of(GeoPoint(1.5, 0.5), grid)
        self.assertIn("out of area", str(ctx.exception))

    def test_two_point_offsets(self):
        from geo_pit import AreaOfInterest, GridSpec, Trajectory, rasterize
        grid = GridSpec(AreaOfInterest(0.0, 2.0, 0.0, 2.0), 2)
        pit = rasterize(Trajectory("t", [0.5, 1.5], [0.5, 1.5], [DAY0, DAY0 + 600]), grid)
        self.assertEqual(pit[0, 0, 2], -1.0)
        self.assertEqual(pit[1, 1, 2], 1.0)
        self.assertEqual(int((pit[..., 0] == 1).sum()), 2)

    def test_rasterize_matches_brute_force(self):
        from geo_pit import AreaOfInterest, GridSpec, Trajectory, cell_of, rasterize
        rng = np.random.default_rng(3)
        grid = GridSpec(AreaOfInterest(0.0, 1.0, 0.0, 1.0), 6)
        for trial in range(5):
            t = np.sort(rng.integers(0, 3000, 50)) + DAY0 + 7 * 3600
            t[-1] = t[0] + 3001
            traj = Trajectory(str(trial), rng.uniform(0, 1, 50), rng.uniform(0, 1, 50), t)
            oracle = np.full((6, 6, 3), -1.0)
            for (pt, ts) in traj.points:
                c = cell_of(pt, grid)
                if oracle[c.x - 1, c.y - 1, 0] == -1.0:
                    oracle[c.x - 1, c.y - 1] = [1.0, 2.0 * (ts % 86400) / 86400 - 1.0,
                                                2.0 * (ts - t[0]) / (t[-1] - t[0]) - 1.0]
            np.testing.assert_allclose(rasterize(traj, grid), oracle, atol=1e-12)

    def test_pit_invariants_hold(self):
        from geo_pit import AreaOfInterest, GridSpec, Trajectory, rasterize
        rng = np.random.default_rng(4)
        grid = GridSpec(AreaOfInterest(0.0, 1.0, 0.0, 1.0), 10)
        for i in range(20):
            n = int(rng.integers(2, 40))
            t = DAY0 + np.cumsum(rng.integers(1, 90, n))
            pit = rasterize(Trajectory(str(i), rng.uniform(0, 1, n), rng.uniform(0, 1, n), t), grid)
            self.assertTrue(np.all((pit >= -1.0) & (pit <= 1.0)))
            self.assertTrue(set(np.unique(pit[..., 0])) <= {-1.0, 1.0})
            unvisited = pit[..., 0] == -1.0
            self.assertTrue(np.all(pit[unvisited] == -1.0))

    def test_equal_timestamps_first_wins(self):
        from geo_pit import AreaOfInterest, GridSpec, Trajectory, rasterize
        grid = GridSpec(AreaOfInterest(0.0, 2.0, 0.0, 2.0), 2)
        # two fixes in cell (1,1) at the same second; the first in sequence is kept
        traj = Trajectory("tie", [0.2, 0.8, 1.5], [0.2, 0.8, 1.5], [DAY0, DAY0, DAY0 + 100])
        pit = rasterize(traj, grid)
        self.assertEqual(pit[0, 0, 2], -1.0)

    def test_odt_encoding(self):
        from geo_pit import AreaOfInterest, GeoPoint, encode_odt
        aoi = AreaOfInterest(0.0, 2.0, 0.0, 2.0)
        enc = encode_odt(GeoPoint(0.0, 0.0), GeoPoint(2.0, 1.0), DAY0, aoi).encoded
        np.testing.assert_allclose(enc, [-1.0, -1.0, 1.0, 0.0, -1.0])
        enc = encode_odt(GeoPoint(1.0, 1.0), GeoPoint(1.0, 1.0), DAY0 + 18 * 3600, aoi).encoded
        self.assertAlmostEqual(enc[4], 0.5)

    def test_odt_input_of_uses_endpoints(self):
        from geo_pit import odt_input_of
        traj, grid = _fig3()
        odt = odt_input_of(traj, grid.aoi)
        self.assertEqual((odt.g_o.lng, odt.g_d.lng, odt.t_o), (2.5, 0.5, traj.t_first))

    def test_flatten_bijection(self):
        from geo_pit import CellIdx, flatten_index, unflatten_index
        self.assertEqual(flatten_index(CellIdx(1, 1), 7), 1)
        self.assertEqual(flatten_index(CellIdx(2, 2), 3), 5)
        for L in (3, 5, 20):
            positions = set()
            for x in range(1, L + 1):
                for y in range(1, L + 1):
                    p = flatten_index(CellIdx(x, y), L)
                    positions.add(p)
                    self.assertEqual(unflatten_index(p, L), CellIdx(x, y))
            self.assertEqual(positions, set(range(1, L * L + 1)))

    def test_trajectory_invariants(self):
        from geo_pit import GeoError, Trajectory
        with self.assertRaises(GeoError):
            Trajectory("z", [0.0, 1.0], [0.0, 1.0], [10, 10])
        with self.assertRaises(GeoError):
            Trajectory("one", [0.0], [0.0], [10])


# ────────────────────────────────────────────────────────────
# 4. DATA PIPELINE
# ────────────────────────────────────────────────────────────

def _line_traj(traj_id, minutes, n_points, meters=2000.0, t0=DAY0 + 8 * 3600):
    """Straight eastward trip of `meters` over `minutes` with evenly spaced fixes."""
    from geo_pit import Trajectory
    deg = meters / (111320.0 * math.cos(math.radians(30.6)))
    lng = 104.0 + np.linspace(0.0, deg, n_points)
    lat = 30.6 + np.linspace(0.0, 1e-4, n_points)
    t = t0 + np.round(np.linspace(0.0, minutes * 60.0, n_points)).astype(np.int64)
    return Trajectory(traj_id, lng, lat, t)


class TestDataLoader(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, text):
        path = self.dir / "t.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_parse_groups_rows(self):
        from data_loader import parse_trajectories
        trajs = parse_trajectories(self._write("traj_id,lng,lat,timestamp\na,104.0,30.6,100\na,104.1,30.7,160\n"))
        self.assertEqual(len(trajs), 1)
        self.assertEqual(len(trajs[0]), 2)

    def test_parse_empty_file(self):
        from data_loader import parse_trajectories
        self.assertEqual(parse_trajectories(self._write("")), [])
        self.assertEqual(parse_trajectories(self._write("traj_id,lng,lat,timestamp\n")), [])

    def test_parse_shuffled_equals_sorted(self):
        from data_loader import parse_trajectories
        rows = ["a,104.0,30.6,100", "b,104.2,30.6,50", "a,104.1,30.7,160", "b,104.3,30.8,400", "a,104.2,30.8,220"]
        header = "traj_id,lng,lat,timestamp\n"
        sorted_ = parse_trajectories(self._write(header + "\n".join(sorted(rows)) + "\n"))
        shuffled = parse_trajectories(self._write(header + "\n".join([rows[i] for i in (4, 1, 0, 3, 2)]) + "\n"))
        self.assertEqual(len(sorted_), len(shuffled))
        for a, b in zip(sorted_, shuffled):
            self.assertTrue(a.same_as(b))

    def test_parse_malformed_row_line_number(self):
        from data_loader import ParseError, parse_trajectories
        with self.assertRaises(ParseError) as ctx:
            parse_trajectories(self._write("traj_id,lng,lat,timestamp\na,104.0,30.6,100\na,abc,30.7,160\n"))
        self.assertIn("line 3", str(ctx.exception))

    def test_parse_invalid_series_names_id(self):
        from data_loader import ParseError, parse_trajectories
        with self.assertRaises(ParseError) as ctx:
            parse_trajectories(self._write("traj_id,lng,lat,timestamp\nlonely,104.0,30.6,100\n"))
        self.assertIn("lonely", str(ctx.exception))

    def test_preprocess_filters(self):
        from data_loader import preprocess
        keep = _line_traj("ok", 20, 41)                 # 30 s interval
        short = _line_traj("short", 4, 9)
        long_ = _line_traj("long", 61, 123)
        sparse = _line_traj("sparse", 30, 21)           # 90 s interval
        tiny = _line_traj("tiny", 20, 41, meters=300)
        kept = preprocess([keep, short, long_, sparse, tiny])
        self.assertEqual([t.traj_id for t in kept], ["ok"])

    def test_preprocess_idempotent(self):
        from data_loader import preprocess
        trajs = [_line_traj(str(i), m, n) for i, (m, n) in enumerate([(20, 41), (4, 9), (30, 21), (10, 30)])]
        once = preprocess(trajs)
        self.assertEqual([t.traj_id for t in preprocess(once)], [t.traj_id for t in once])

    def test_split_ratios_and_order(self):
        from data_loader import split
        rng = np.random.default_rng(0)
        trajs = [_line_traj(str(i), 10, 21, t0=DAY0 + int(s)) for i, s in enumerate(rng.integers(0, 10 ** 6, 100))]
        s = split(trajs, L_G=10)
        self.assertEqual((len(s.train), len(s.val), len(s.test)), (80, 10, 10))
        self.assertLessEqual(max(t.t_first for t in s.train.trajectories),
                             min(t.t_first for t in s.test.trajectories))
        ids = sorted(t.traj_id for d in (s.train, s.val, s.test) for t in d.trajectories)
        self.assertEqual(ids, sorted(t.traj_id for t in trajs))

    def test_split_ten_and_too_few(self):
        from data_loader import SplitError, split
        trajs = [_line_traj(str(i), 10, 21, t0=DAY0 + 1000 * i) for i in range(10)]
        s = split(trajs, L_G=5)
        self.assertEqual((len(s.train), len(s.val), len(s.test)), (8, 1, 1))
        with self.assertRaises(SplitError):
            split(trajs[:9], L_G=5)

    def test_split_sizes_within_one_of_ratio(self):
        from data_loader import split
        expected = {19: (15, 2, 2), 29: (23, 3, 3), 99: (79, 10, 10)}
        for n, sizes in expected.items():
            trajs = [_line_traj(str(i), 10, 21, t0=DAY0 + 1000 * i) for i in range(n)]
            s = split(trajs, L_G=5)
            got = (len(s.train), len(s.val), len(s.test))
            self.assertEqual(got, sizes, f"n={n}")
            for size, share in zip(got, (0.8, 0.1, 0.1)):
                self.assertLessEqual(abs(size - share * n), 1.0, f"n={n}")

    def test_csv_write_then_parse(self):
        from data_loader import parse_trajectories, write_trajectories
        trajs = [_line_traj("x", 10, 21), _line_traj("y", 12, 25)]
        back = parse_trajectories(write_trajectories(trajs, self.dir / "out.csv"))
        self.assertEqual([t.traj_id for t in back], ["x", "y"])
        np.testing.assert_array_equal(back[0].t, trajs[0].t)
        np.testing.assert_allclose(back[0].lng, trajs[0].lng, atol=1e-7)


# ────────────────────────────────────────────────────────────
# 5. SYNTHETIC CITY
# ────────────────────────────────────────────────────────────

class TestSynthetic(unittest.TestCase):

    def test_same_seed_identical(self):
        from config import SynthConfig
        from synthetic import generate_synthetic
        a = generate_synthetic(SynthConfig(n_trajectories=20, seed=5))
        b = generate_synthetic(SynthConfig(n_trajectories=20, seed=5))
        self.assertTrue(all(x.same_as(y) for x, y in zip(a, b)))
        c = generate_synthetic(SynthConfig(n_trajectories=20, seed=6))
        self.assertFalse(all(x.same_as(y) for x, y in zip(a, c)))

    def test_clean_trips_pass_preprocess(self):
        from config import SynthConfig
        from data_loader import preprocess
        from synthetic import generate_synthetic
        trajs = generate_synthetic(SynthConfig(n_trajectories=100, outlier_rate=0.0, seed=2))
        self.assertEqual(len(preprocess(trajs)), 100)

    def _durations(self, outlier_rate, trips):
        from config import SynthConfig
        from synthetic import build_city, simulate_trip
        cfg = SynthConfig(outlier_rate=outlier_rate)
        G = build_city(cfg)
        depart = DAY0 + 3 * 3600
        out = []
        for i in range(trips):
            rng = np.random.Generator(np.random.Philox(100 + i))
            tr = simulate_trip(G, (1, 1), (6, 4), depart, cfg, rng)
            out.append(tr.t_last - tr.t_first)
        return np.array(out, dtype=np.float64)

    def test_no_outliers_low_variation(self):
        d = self._durations(0.0, 50)
        self.assertLess(d.std() / d.mean(), 0.25)

    def test_outliers_bimodal(self):
        d = self._durations(0.25, 200)
        lower = d[d <= 1.5 * d.min()]
        upper = d[d > 1.5 * d.min()]
        self.assertTrue(0.1 < len(upper) / len(d) < 0.45)
        self.assertGreater(np.median(upper), 1.5 * np.median(lower))


# ────────────────────────────────────────────────────────────
# 6. NUMERIC KERNEL
# ────────────────────────────────────────────────────────────

def _naive_attention(items, mha, heads):
    """Loop-based reference for multi-head self-attention."""
    L, d = items.shape
    dh = d // heads
    q = items @ mha.query.weight + mha.query.bias
    k = items @ mha.key.weight + mha.key.bias
    v = items @ mha.value.weight + mha.value.bias
    out = torch.zeros(L, d, dtype=items.dtype)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            logits = torch.stack([(q[i, sl] * k[j, sl]).sum() / math.sqrt(dh) for j in range(L)])
            w = torch.exp(logits - logits.max())
            w = w / w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(L))
    return out @ mha.out.weight + mha.out.bias


class TestNNCore(unittest.TestCase):

    def test_conv_examples(self):
        from nn_core import conv2d_same
        x = torch.arange(12, dtype=torch.float64).reshape(3, 4, 1)
        torch.testing.assert_close(conv2d_same(x, torch.ones(1, 1, 1, 1, dtype=torch.float64),
                                               torch.zeros(1, dtype=torch.float64)), x)
        out = conv2d_same(torch.ones(2, 2, 1), torch.ones(3, 3, 1, 1), torch.zeros(1))
        torch.testing.assert_close(out, torch.full((2, 2, 1), 4.0))
        out = conv2d_same(torch.randn(5, 5, 2), torch.zeros(3, 3, 2, 3), torch.tensor([1.0, 2.0, 3.0]))
        torch.testing.assert_close(out, torch.tensor([1.0, 2.0, 3.0]).expand(5, 5, 3))

    def test_conv_shape_errors(self):
        from nn_core import ShapeError, conv2d_same
        with self.assertRaises(ShapeError):
            conv2d_same(torch.ones(4, 4, 2), torch.ones(3, 3, 3, 1), torch.zeros(1))
        with self.assertRaises(ShapeError):
            conv2d_same(torch.ones(4, 4, 1), torch.ones(2, 2, 1, 1), torch.zeros(1))

    def test_stride_two_is_ceil(self):
        from nn_core import conv2d_same
        out = conv2d_same(torch.ones(1, 5, 7, 2), torch.ones(3, 3, 2, 4), torch.zeros(4), stride=2)
        self.assertEqual(tuple(out.shape), (1, 3, 4, 4))

    def test_linear_examples(self):
        from nn_core import ShapeError, linear
        out = linear(torch.tensor([1.0, 2.0]), torch.tensor([[1.0, 0.0], [0.0, 2.0]]), torch.tensor([1.0, 1.0]))
        torch.testing.assert_close(out, torch.tensor([2.0, 5.0]))
        x = torch.randn(3, 4)
        torch.testing.assert_close(linear(x, torch.eye(4), torch.zeros(4)), x)
        torch.testing.assert_close(linear(x, torch.zeros(4, 2), torch.tensor([1.0, -1.0])),
                                   torch.tensor([1.0, -1.0]).expand(3, 2))
        with self.assertRaises(ShapeError):
            linear(x, torch.zeros(5, 2), torch.zeros(2))

    def test_attention_singleton_and_symmetry(self):
        from nn_core import MultiHeadAttention, multi_head_attention
        torch.manual_seed(0)
        mha = MultiHeadAttention(8, 2).double()
        item = torch.randn(1, 8, dtype=torch.float64)
        expected = mha.out(mha.value(item))
        torch.testing.assert_close(multi_head_attention(item, mha, 2), expected)
        pair = item.repeat(2, 1)
        out, w = multi_head_attention(pair, mha, 2, return_weights=True)
        torch.testing.assert_close(w, torch.full_like(w, 0.5))
        torch.testing.assert_close(out[0], out[1])

    def test_attention_matches_naive_oracle(self):
        from nn_core import MultiHeadAttention, multi_head_attention
        torch.manual_seed(1)
        mha = MultiHeadAttention(8, 2).double()
        items = torch.randn(6, 8, dtype=torch.float64)
        torch.testing.assert_close(multi_head_attention(items, mha, 2), _naive_attention(items, mha, 2),
                                   atol=1e-6, rtol=0)

    def test_attention_rows_are_distributions(self):
        from nn_core import MultiHeadAttention, multi_head_attention
        torch.manual_seed(2)
        mha = MultiHeadAttention(16, 4).double()
        mask = torch.tensor([[True, False, True, True, False, True, True]])
        _, w = multi_head_attention(torch.randn(1, 7, 16, dtype=torch.float64), mha, 4,
                                    key_mask=mask, return_weights=True)
        self.assertTrue(torch.all(w >= 0))
        torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6, rtol=0)
        self.assertTrue(torch.all(w[..., ~mask[0]] == 0))

    def test_attention_head_mismatch(self):
        from nn_core import MultiHeadAttention, ShapeError, multi_head_attention
        mha = MultiHeadAttention(8, 2)
        with self.assertRaises(ShapeError):
            multi_head_attention(torch.randn(3, 8), mha, 3)

    def test_gelu_values(self):
        from nn_core import gelu
        x = torch.tensor([0.0, 1.0, -10.0], dtype=torch.float64)
        y = gelu(x)
        self.assertEqual(float(y[0]), 0.0)
        self.assertAlmostEqual(float(y[1]), 0.841344746, places=6)
        self.assertLess(abs(float(y[2])), 1e-8)

    def test_positional_encoding_values(self):
        from nn_core import ShapeError, positional_encoding
        pe0 = positional_encoding(0, 8, dtype=torch.float64)
        torch.testing.assert_close(pe0, torch.tensor([1.0, 0.0] * 4, dtype=torch.float64))
        pe1 = positional_encoding(1, 4, dtype=torch.float64)
        expected = torch.tensor([math.cos(0.01), math.sin(0.01), math.cos(1e-4), math.sin(1e-4)],
                                dtype=torch.float64)
        torch.testing.assert_close(pe1, expected)
        rnd = positional_encoding(torch.arange(0, 5000, 37), 64, dtype=torch.float64)
        self.assertTrue(torch.all(rnd.abs() <= 1.0))
        with self.assertRaises(ShapeError):
            positional_encoding(3, 5)

    def test_positional_encoding_distinct(self):
        from nn_core import positional_encoding
        pe = positional_encoding(torch.arange(1, 101), 128, dtype=torch.float64)
        gaps = (pe[:, None, :] - pe[None, :, :]).abs().amax(-1)
        gaps = gaps + torch.eye(100, dtype=torch.float64) * 10
        self.assertGreater(float(gaps.min()), 1e-6)

    def test_adam_examples(self):
        from nn_core import Adam, adam_step
        p = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = Adam([p], lr=0.001)
        p.grad = torch.tensor([0.5], dtype=torch.float64)
        adam_step(opt)
        self.assertAlmostEqual(float(p), 0.999, places=6)
        self.assertEqual(opt.state[p]["step"], 1)

        q = nn.Parameter(torch.tensor([2.0, -3.0]))
        opt = Adam([q])
        q.grad = torch.zeros(2)
        adam_step(opt)
        torch.testing.assert_close(q.detach(), torch.tensor([2.0, -3.0]))

    def test_adam_deterministic_and_missing_grad(self):
        from nn_core import Adam, MissingGradientError, adam_step
        a = nn.Parameter(torch.tensor([1.0, 2.0]))
        b = nn.Parameter(torch.tensor([1.0, 2.0]))
        for p in (a, b):
            opt = Adam([p], lr=0.01)
            for _ in range(3):
                p.grad = torch.tensor([0.3, -0.7])
                adam_step(opt)
        torch.testing.assert_close(a.detach(), b.detach(), atol=0, rtol=0)
        c = nn.Parameter(torch.ones(1))
        with self.assertRaises(MissingGradientError):
            adam_step(Adam([c]))

    def test_seeded_rng_reproducible(self):
        from nn_core import SeededRng, stable_u64
        torch.testing.assert_close(SeededRng(9).normal((3, 4)), SeededRng(9).normal((3, 4)))
        self.assertFalse(torch.equal(SeededRng(9).normal((3, 4)), SeededRng(10).normal((3, 4))))
        self.assertEqual(stable_u64("42:val:3:0"), stable_u64("42:val:3:0"))

    def test_flop_counter_nests(self):
        from nn_core import Dense, FlopCounter
        layer = Dense(4, 3)
        with FlopCounter() as outer:
            with FlopCounter() as inner:
                layer(torch.ones(5, 4))
            layer(torch.ones(2, 4))
        self.assertEqual(inner.dense, 5 * 4 * 3)
        self.assertEqual(outer.dense, 7 * 4 * 3)

    def test_initialization(self):
        from nn_core import Dense, embedding_table
        torch.manual_seed(0)
        layer = Dense(64, 32)
        bound = math.sqrt(6.0 / 96)
        self.assertLessEqual(float(layer.weight.abs().max()), bound)
        self.assertEqual(float(layer.bias.abs().max()), 0.0)
        table = embedding_table(400, 64)
        self.assertAlmostEqual(float(table.std()), 0.02, places=2)


# ────────────────────────────────────────────────────────────
# 7. DIFFUSION
# ────────────────────────────────────────────────────────────

class TestDiffusion(unittest.TestCase):

    def test_schedule_endpoints(self):
        from diffusion import linear_schedule
        s = linear_schedule(1000)
        self.assertEqual(s.beta(1), 0.0001)
        self.assertEqual(s.beta(1000), 0.02)
        self.assertAlmostEqual(s.beta(2), 1.1992e-4, places=8)
        self.assertAlmostEqual(s.alpha_bar(2), (1 - 1e-4) * (1 - s.beta(2)), places=15)
        self.assertAlmostEqual(s.alpha_bar(2), 0.99978, places=5)
        self.assertAlmostEqual(s.alpha_bar(1000), float(np.prod(1.0 - s.betas)), places=15)
        self.assertLess(s.alpha_bar(1000), 1e-3)
        self.assertAlmostEqual(s.alpha_bar(1000) / 4.0e-5, 1.0, places=1)

    def test_schedule_invariants(self):
        from diffusion import ScheduleError, linear_schedule
        for N in (2, 500, 1000, 1500, 2000):
            s = linear_schedule(N)
            self.assertTrue(np.all(np.diff(s.betas) > 0))
            self.assertTrue(np.all((s.betas > 0) & (s.betas < 1)))
            self.assertTrue(np.all(np.diff(s.alpha_bars) < 0))
        with self.assertRaises(ScheduleError):
            linear_schedule(1)

    def test_q_sample_examples(self):
        from diffusion import ScheduleError, linear_schedule, q_sample
        s = linear_schedule(1000)
        z = torch.zeros(4, 4, 3, dtype=torch.float64)
        torch.testing.assert_close(q_sample(z, 500, z, s), z)
        ones = torch.ones(4, 4, 3, dtype=torch.float64)
        torch.testing.assert_close(q_sample(ones, 1, z, s), torch.full_like(ones, math.sqrt(1 - 1e-4)))
        with self.assertRaises(ScheduleError):
            q_sample(ones, 0, z, s)
        with self.assertRaises(ScheduleError):
            q_sample(ones, 1001, z, s)

    def test_q_sample_batched_steps(self):
        from diffusion import linear_schedule, q_sample
        s = linear_schedule(100)
        X0 = torch.ones(3, 2, 2, 3, dtype=torch.float64)
        out = q_sample(X0, torch.tensor([1, 50, 100]), torch.zeros_like(X0), s)
        for i, n in enumerate((1, 50, 100)):
            self.assertAlmostEqual(float(out[i, 0, 0, 0]), math.sqrt(s.alpha_bar(n)), places=12)

    def test_closed_form_matches_iterated(self):
        from diffusion import forward_step, linear_schedule, q_sample
        from nn_core import SeededRng
        s = linear_schedule(1000)
        draws, x0 = 10_000, 0.7
        rng = SeededRng(11)
        for n in (1, 500, 1000):
            X0 = torch.full((draws, 1), x0, dtype=torch.float64)
            closed = q_sample(X0, n, rng.normal((draws, 1), dtype=torch.float64), s)
            it = X0.clone()
            for m in range(1, n + 1):
                it = forward_step(it, m, rng.normal((draws, 1), dtype=torch.float64), s)
            var = 1.0 - s.alpha_bar(n)
            se_mean = math.sqrt(2 * var / draws)
            se_var = math.sqrt(2 * 2 * var ** 2 / (draws - 1))
            self.assertLess(abs(float(closed.mean() - it.mean())), 3 * se_mean)
            self.assertLess(abs(float(closed.var() - it.var())), 3 * se_var)

    def test_reverse_inverts_forward_at_step_one(self):
        from diffusion import linear_schedule, p_sample_step, q_sample
        s = linear_schedule(1000)
        torch.manual_seed(0)
        X0 = torch.rand(6, 6, 3, dtype=torch.float64) * 2 - 1
        eps = torch.randn(6, 6, 3, dtype=torch.float64)
        Xn = q_sample(X0, 1, eps, s)
        out = p_sample_step(Xn, 1, np.zeros(5), _EpsStub(eps.unsqueeze(0)), s)
        torch.testing.assert_close(out, X0, atol=1e-5, rtol=0)

    def test_reverse_zero_noise_cases(self):
        from diffusion import linear_schedule, p_sample_step
        from nn_core import SeededRng
        s = linear_schedule(1000)
        stub = _EpsStub(torch.zeros(1, 1, 1, 1, dtype=torch.float64))
        zero = torch.zeros(3, 3, 3, dtype=torch.float64)
        torch.testing.assert_close(p_sample_step(zero, 1, np.zeros(5), stub, s), zero)
        n, draws = 400, 20_000
        Xn = torch.full((draws, 1, 1, 1), 0.3, dtype=torch.float64)
        out = p_sample_step(Xn, n, np.zeros((draws, 5)), stub, s, rng=SeededRng(3))
        expected = 0.3 / math.sqrt(s.alpha(n))
        self.assertLess(abs(float(out.mean()) - expected), 4 * math.sqrt(s.beta(n) / draws))

    def test_single_odt_shared_by_batch(self):
        from diffusion import linear_schedule, p_sample_step
        from geo_pit import GeoPoint, ODTInput
        s = linear_schedule(50)
        model = _tiny_denoiser(L_G=8)
        code = np.array([0.1, 0.2, 0.7, 0.8, 0.375])
        odt = ODTInput(GeoPoint(0.1, 0.2), GeoPoint(0.7, 0.8), 32400, code)
        torch.manual_seed(1)
        Xn = torch.randn(2, 8, 8, 3, dtype=torch.float64)
        shared = p_sample_step(Xn, 1, odt, model, s)
        tiled = p_sample_step(Xn, 1, np.tile(code, (2, 1)), model, s)
        self.assertEqual(tuple(shared.shape), (2, 8, 8, 3))
        torch.testing.assert_close(shared, tiled)

    def test_train_step_losses(self):
        from diffusion import DivergenceError, linear_schedule, make_batch, train_denoiser_step
        from nn_core import Adam, SeededRng
        s = linear_schedule(100)
        pits = np.zeros((8, 8, 8, 3))
        batch = make_batch(pits, np.zeros((8, 5)), s, SeededRng(0), dtype=torch.float64)
        perfect = _EpsStub(batch.eps)
        self.assertAlmostEqual(train_denoiser_step(perfect, batch, s, Adam(perfect)), 0.0, places=12)
        blind = _EpsStub(torch.zeros(1, 1, 1, 1, dtype=torch.float64))
        loss = train_denoiser_step(blind, batch, s, Adam(blind))
        self.assertLess(abs(loss - 1.0), 0.1)
        broken = _EpsStub(torch.full((1, 1, 1, 1), float("nan"), dtype=torch.float64))
        with self.assertRaises(DivergenceError) as ctx:
            train_denoiser_step(broken, batch, s, Adam(broken))
        self.assertIn("diverged", str(ctx.exception))

    def test_step_sampling_coverage(self):
        from diffusion import sample_steps
        from nn_core import SeededRng
        n = sample_steps(100_000, 1000, SeededRng(5)).numpy()
        self.assertEqual((n.min(), n.max()), (1, 1000))
        counts = np.bincount(n, minlength=1001)[1:]
        self.assertTrue(np.all((counts >= 50) & (counts <= 150)))

    def test_infer_pit_shape_range_determinism(self):
        from diffusion import infer_pit, infer_pits, linear_schedule
        from geo_pit import AreaOfInterest, GeoPoint, encode_odt
        model = _tiny_denoiser(L_G=8, double=False)
        s = linear_schedule(10)
        aoi = AreaOfInterest(0.0, 1.0, 0.0, 1.0)
        a = encode_odt(GeoPoint(0.1, 0.2), GeoPoint(0.8, 0.9), DAY0 + 8 * 3600, aoi)
        b = encode_odt(GeoPoint(0.5, 0.5), GeoPoint(0.2, 0.1), DAY0 + 17 * 3600, aoi)
        pit = infer_pit(a, model, s, seed=1)
        self.assertEqual(pit.shape, (8, 8, 3))
        self.assertTrue(np.all((pit >= -1) & (pit <= 1)))
        np.testing.assert_array_equal(pit, infer_pit(a, model, s, seed=1))
        both = infer_pits([a, b], model, s, [1, 2])
        np.testing.assert_allclose(both[0], pit, atol=1e-4)


# ────────────────────────────────────────────────────────────
# 8. DENOISER
# ────────────────────────────────────────────────────────────

class TestDenoiser(unittest.TestCase):

    def test_condition_zero_fc_is_pe(self):
        from denoiser import ConditionEncoder, encode_condition
        from nn_core import positional_encoding
        enc = ConditionEncoder(128).double()
        with torch.no_grad():
            enc.fc_od.weight.zero_()
        out = encode_condition(np.array([0.1, -0.2, 0.3, 0.4, 0.5]), 17, enc)
        self.assertEqual(out.shape, (128,))
        torch.testing.assert_close(out, positional_encoding(17, 128, dtype=torch.float64))

    def test_condition_depends_on_odt(self):
        from denoiser import ConditionEncoder, encode_condition
        torch.manual_seed(0)
        enc = ConditionEncoder(16).double()
        a = encode_condition(np.array([0.1, 0.1, 0.1, 0.1, 0.1]), 5, enc)
        b = encode_condition(np.array([0.1, 0.1, 0.1, 0.1, 0.6]), 5, enc)
        self.assertGreater(float((a - b).abs().max()), 0.0)

    def test_ablation_hides_departure_time(self):
        from denoiser import ConditionEncoder, encode_condition
        torch.manual_seed(0)
        enc = ConditionEncoder(16, odt_ablation="no_t").double()
        a = encode_condition(np.array([0.1, 0.1, 0.1, 0.1, 0.1]), 5, enc)
        b = encode_condition(np.array([0.1, 0.1, 0.1, 0.1, 0.6]), 5, enc)
        torch.testing.assert_close(a, b)

    def test_occonv_broadcast(self):
        from denoiser import OCConv, occonv
        torch.manual_seed(0)
        block = OCConv(3, 5, 8).double()
        x = torch.randn(1, 6, 7, 3, dtype=torch.float64)
        cond = torch.randn(1, 8, dtype=torch.float64)
        out, hid, hid_cond = occonv(x, cond, block, return_hidden=True)
        diff = hid_cond - hid
        bias = block.fc_cond(cond)[0]
        torch.testing.assert_close(diff, bias.expand_as(diff))
        self.assertEqual(tuple(out.shape), (1, 6, 7, 5))

    def test_occonv_residual_only(self):
        from denoiser import OCConv
        block = OCConv(4, 4, 8).double()
        with torch.no_grad():
            for conv in (block.conv_in, block.conv_mid, block.conv_out):
                conv.weight.zero_()
                conv.bias.zero_()
            block.res_conv.weight.copy_(torch.eye(4, dtype=torch.float64).reshape(1, 1, 4, 4))
        x = torch.randn(2, 5, 5, 4, dtype=torch.float64)
        torch.testing.assert_close(block(x, torch.randn(2, 8, dtype=torch.float64)), x)

    def test_output_shape_all_grid_sizes(self):
        model = _tiny_denoiser(L_G=10, L_D=3, double=False)
        for L in (10, 15, 20, 25, 30):
            X = torch.randn(1, L, L, 3)
            out = model(X, torch.tensor([3]), torch.zeros(1, 5))
            self.assertEqual(tuple(out.shape), (1, L, L, 3))

    def test_channel_doubling_and_halving(self):
        model = _tiny_denoiser(L_D=3, base=8, double=False)
        for k, block in enumerate(model.downs, start=1):
            self.assertEqual(block.occ2.conv_out.weight.shape[-1], 8 * 2 ** k)
        self.assertEqual(model.ups[-1].occ2.conv_out.weight.shape[-1], 8)
        self.assertEqual(model.head.weight.shape[-1], 3)

    def test_deterministic_and_time_sensitive(self):
        from denoiser import denoise
        model = _tiny_denoiser(L_G=8)
        X = torch.randn(8, 8, 3, dtype=torch.float64)
        a = np.array([0.1, 0.2, 0.3, 0.4, -0.5])
        b = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
        with torch.no_grad():
            out1, out2, out3 = denoise(X, 7, a, model), denoise(X, 7, a, model), denoise(X, 7, b, model)
        torch.testing.assert_close(out1, out2, atol=0, rtol=0)
        self.assertGreater(float((out1 - out3).abs().max()), 0.0)

    def test_same_condition_reaches_every_block(self):
        model = _tiny_denoiser(L_G=8)
        seen = []
        for module in model.modules():
            if type(module).__name__ == "OCConv":
                module.register_forward_hook(lambda m, args, out: seen.append(args[1]))
        model(torch.randn(1, 8, 8, 3, dtype=torch.float64), torch.tensor([4]), torch.zeros(1, 5, dtype=torch.float64))
        self.assertGreater(len(seen), 4)
        for cond in seen[1:]:
            self.assertIs(cond, seen[0])

    def test_gradcheck_occonv(self):
        from denoiser import OCConv
        torch.manual_seed(0)
        block = OCConv(2, 3, 4).double()
        x = torch.randn(1, 5, 5, 2, dtype=torch.float64, requires_grad=True)
        cond = torch.randn(1, 4, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(lambda a, c: block(a, c), (x, cond), **GRAD_TOL))

    def test_gradcheck_denoiser(self):
        model = _tiny_denoiser(L_G=8, L_D=2, base=8)
        steps = torch.tensor([12])
        odt = torch.randn(1, 5, dtype=torch.float64)
        X = torch.randn(1, 8, 8, 3, dtype=torch.float64, requires_grad=True)
        W = model.condition.fc_od.weight.detach().clone().requires_grad_(True)

        def fn(x, w):
            return functional_call(model, {"condition.fc_od.weight": w}, (x, steps, odt))

        self.assertTrue(torch.autograd.gradcheck(fn, (X, W), **GRAD_TOL))


# ────────────────────────────────────────────────────────────
# 9. ESTIMATOR
# ────────────────────────────────────────────────────────────

class TestEstimator(unittest.TestCase):

    def test_flatten_examples(self):
        from estimator import flatten_pit
        from geo_pit import empty_pit, rasterize
        self.assertFalse(flatten_pit(empty_pit(4)).mask.any())
        traj, grid = _fig3()
        flat = flatten_pit(rasterize(traj, grid))
        self.assertEqual(set(flat.positions.tolist()), {3, 5, 7})
        pit = empty_pit(3)
        pit[1, 2, 0] = 0.0
        self.assertEqual(flatten_pit(pit).positions.tolist(), [2 + (3 - 1) * 3])

    def test_embed_zero_tables_is_pe(self):
        from estimator import embed_cells, flatten_pit
        from geo_pit import rasterize
        from nn_core import positional_encoding
        traj, grid = _fig3()
        model = _tiny_estimator(L_G=3)
        with torch.no_grad():
            model.cell_embedding.zero_()
            model.fc_st.weight.zero_()
        latent = embed_cells(flatten_pit(rasterize(traj, grid)), model)
        torch.testing.assert_close(latent, positional_encoding(torch.tensor([3, 5, 7]), 16, dtype=torch.float64))

    def test_embed_three_term_oracle(self):
        from estimator import embed_cells, flatten_pit, random_pit
        from nn_core import SeededRng, positional_encoding
        model = _tiny_estimator(L_G=6)
        flat = flatten_pit(random_pit(6, 9, SeededRng(4)))
        latent = embed_cells(flat, model)
        self.assertEqual(latent.shape[0], 9)
        for row, p in zip(latent, flat.positions):
            item = torch.as_tensor(flat.items[p - 1], dtype=torch.float64)
            expected = (model.cell_embedding[p - 1] + positional_encoding(int(p), 16, dtype=torch.float64)
                        + item @ model.fc_st.weight + model.fc_st.bias)
            torch.testing.assert_close(row, expected)

    def test_single_valid_item_length_one(self):
        from estimator import embed_cells, flatten_pit
        from geo_pit import empty_pit
        pit = empty_pit(5)
        pit[2, 3] = [1.0, 0.2, -1.0]
        self.assertEqual(embed_cells(flatten_pit(pit), _tiny_estimator()).shape, (1, 16))

    def test_empty_pit_error(self):
        from estimator import EmptyPiTError, embed_cells, flatten_pit
        from geo_pit import empty_pit
        model = _tiny_estimator()
        with self.assertRaises(EmptyPiTError) as ctx:
            embed_cells(flatten_pit(empty_pit(5)), model)
        self.assertIn("empty PiT", str(ctx.exception))
        with self.assertRaises(EmptyPiTError):
            model(torch.as_tensor(empty_pit(5)).unsqueeze(0))

    def test_masked_equals_dense_oracle(self):
        from estimator import dense_vit_forward, embed_cells, flatten_pit, mvit_forward
        from nn_core import SeededRng
        rng = SeededRng(21)
        for L_G in (10, 20):
            model = _tiny_estimator(L_G=L_G, d_E=16, L_E=2, seed=L_G)
            model.set_normalization([10.0, 20.0, 30.0])
            for pit in _random_pits(50, L_G, rng, max_valid=40):
                flat = flatten_pit(pit)
                with torch.no_grad():
                    a = mvit_forward(embed_cells(flat, model), model)
                    b = dense_vit_forward(flat, model)
                self.assertLess(abs(float(a - b)), 1e-5)

    def test_batched_forward_matches_single(self):
        from estimator import estimate
        from nn_core import SeededRng
        model = _tiny_estimator(L_G=8, L_E=2)
        model.set_normalization([5.0, 15.0])
        pits = _random_pits(6, 8, SeededRng(8), max_valid=20)
        batched = model.predict_minutes(pits)
        for pit, value in zip(pits, batched):
            self.assertAlmostEqual(estimate(pit, model), value, places=8)

    def test_vit_variant_agrees(self):
        from nn_core import SeededRng
        mvit = _tiny_estimator(L_G=6)
        vit = _tiny_estimator(L_G=6, variant="vit")
        vit.load_state_dict(mvit.state_dict())
        pits = _random_pits(4, 6, SeededRng(2), max_valid=10)
        np.testing.assert_allclose(mvit.predict_minutes(pits), vit.predict_minutes(pits), atol=1e-8)

    def test_single_item_zero_layers(self):
        from estimator import embed_cells, flatten_pit, mvit_forward
        from geo_pit import empty_pit
        model = _tiny_estimator()
        model.set_normalization([10.0, 30.0])
        with torch.no_grad():
            for name, p in model.layers.named_parameters():
                if "norm" not in name:
                    p.zero_()
        pit = empty_pit(5)
        pit[0, 4] = [1.0, -0.3, 0.5]
        latent = embed_cells(flatten_pit(pit), model)
        expected = model.denormalize(model.fc_pre(model.final_norm(latent)).mean())
        torch.testing.assert_close(mvit_forward(latent, model), expected)

    def test_item_order_reaches_output(self):
        from estimator import estimate
        from nn_core import SeededRng
        pit = _random_pits(1, 5, SeededRng(12), max_valid=8)[0]
        swapped = pit.transpose(1, 0, 2).copy()
        model = _tiny_estimator()
        self.assertNotAlmostEqual(estimate(pit, model), estimate(swapped, model), places=6)
        plain = _tiny_estimator(use_cell_embedding=False, use_positional_encoding=False)
        with torch.no_grad():
            for name, p in plain.layers.named_parameters():
                if "norm" not in name:
                    p.zero_()
        self.assertAlmostEqual(estimate(pit, plain), estimate(swapped, plain), places=10)

    def test_flop_cost_scales_with_valid_items(self):
        from estimator import embed_cells, flatten_pit, mvit_forward, random_pit
        from nn_core import FlopCounter, SeededRng
        d, L_E = 16, 2
        for V in (1, 5, 12):
            totals = set()
            for L_G in (6, 12):
                model = _tiny_estimator(L_G=L_G, d_E=d, L_E=L_E)
                flat = flatten_pit(random_pit(L_G, V, SeededRng(V)))
                with FlopCounter() as fc, torch.no_grad():
                    mvit_forward(embed_cells(flat, model), model)
                self.assertEqual(fc.attention, L_E * 2 * V * V * d)
                self.assertEqual(fc.dense, 3 * V * d + L_E * 12 * V * d * d + d)
                totals.add(fc.total)
            self.assertEqual(len(totals), 1)

    def test_efficiency_ratio(self):
        from estimator import benchmark_attention
        rows = benchmark_attention((10, 20, 30), valid_cells=20, runs=2, d_E=16, L_E=1, heads=4)
        ratios = [r["attention_flop_ratio"] for r in rows]
        self.assertGreaterEqual(ratios[1], 5.0)
        self.assertTrue(ratios[0] < ratios[1] < ratios[2])

    def test_denormalize_round_trip(self):
        model = _tiny_estimator()
        model.set_normalization([12.0, 18.0, 31.0])
        v = torch.linspace(-3, 3, 13, dtype=torch.float64)
        torch.testing.assert_close(model.normalize(model.denormalize(v)), v, atol=1e-6, rtol=0)

    def test_train_step_stub_losses(self):
        from estimator import train_estimator_step
        from nn_core import Adam, SeededRng
        pits = _random_pits(4, 5, SeededRng(1), max_valid=6)
        model = _tiny_estimator()
        model.set_normalization([10.0, 20.0])     # mean 15, std 5
        with torch.no_grad():
            model.fc_pre.weight.zero_()
            model.fc_pre.bias.fill_(1.0)          # normalized 20 minutes
        loss = train_estimator_step(model, pits, [20.0] * 4, Adam(model, lr=0.0))
        self.assertAlmostEqual(loss, 0.0, places=10)

        targets = np.array([8.0, 12.0, 25.0, 31.0])
        model = _tiny_estimator()
        model.set_normalization(targets)
        with torch.no_grad():
            model.fc_pre.weight.zero_()
            model.fc_pre.bias.zero_()
        loss = train_estimator_step(model, pits, targets, Adam(model, lr=0.0))
        self.assertAlmostEqual(loss, 1.0, places=8)

    def test_train_step_skips_empty(self):
        from estimator import train_estimator_step
        from geo_pit import empty_pit
        from nn_core import Adam, SeededRng
        pits = np.concatenate([_random_pits(2, 5, SeededRng(1), max_valid=6), empty_pit(5)[None]])
        model = _tiny_estimator()
        with self.assertLogs("estimator", level="WARNING"):
            loss = train_estimator_step(model, pits, [10.0, 12.0, 14.0], Adam(model))
        self.assertTrue(np.isfinite(loss))

    def test_overfit_small_set(self):
        from estimator import train_estimator_step
        from nn_core import Adam, SeededRng
        pits = _random_pits(16, 6, SeededRng(30), max_valid=20)
        times = 5.0 + 1.5 * (pits[..., 0] >= 0).sum(axis=(1, 2))
        model = _tiny_estimator(L_G=6, d_E=32, L_E=2, double=False)
        model.set_normalization(times)
        opt = Adam(model, lr=0.002)
        for _ in range(500):
            loss = train_estimator_step(model, pits, times, opt)
        self.assertLess(loss, 0.05)

    def test_gradcheck_mvit_layer(self):
        from estimator import MViTLayer
        torch.manual_seed(0)
        layer = MViTLayer(8, 2).double()
        h = torch.randn(5, 8, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(lambda x: layer(x), (h,), **GRAD_TOL))

    def test_gradcheck_estimator(self):
        from nn_core import SeededRng
        model = _tiny_estimator(L_G=5, d_E=16, L_E=1)
        model.set_normalization([10.0, 20.0])
        pits = torch.as_tensor(_random_pits(2, 5, SeededRng(6), max_valid=10))
        names = ["fc_st.weight", "cell_embedding", "fc_pre.weight"]
        params = tuple(dict(model.named_parameters())[n].detach().clone().requires_grad_(True) for n in names)

        def fn(*ps):
            return model.denormalize(functional_call(model, dict(zip(names, ps)), (pits,)))

        self.assertTrue(torch.autograd.gradcheck(fn, params, **GRAD_TOL))


# ────────────────────────────────────────────────────────────
# 10. BASELINES
# ────────────────────────────────────────────────────────────



def _aoi():
    from geo_pit import AreaOfInterest
    return AreaOfInterest(104.0, 104.2, 30.6, 30.8)


def _odt(o, d, t):
    from geo_pit import GeoPoint, encode_odt
    return encode_odt(GeoPoint(*o), GeoPoint(*d), t, _aoi())


def _brute_temp(odt, records, cfg):
    from baselines import NoHistoryError, circular_tod_gap
    from data_loader import haversine_m
    r, w = cfg.radius_m, cfg.window_min * 60.0
    for attempt in range(cfg.max_expansions + 1):
        sel = [m for o, m in records
               if haversine_m(odt.g_o.lng, odt.g_o.lat, o.g_o.lng, o.g_o.lat) <= r
               and haversine_m(odt.g_d.lng, odt.g_d.lat, o.g_d.lng, o.g_d.lat) <= r
               and circular_tod_gap(odt.t_o % 86400, o.t_o % 86400) <= w]
        if len(sel) >= cfg.min_neighbors or attempt == cfg.max_expansions:
            break
        r, w = r * 2, w * 2
    if not sel:
        raise NoHistoryError("no history")
    return float(np.mean(sel))


class TestBaselines(unittest.TestCase):

    O, D = (104.05, 30.65), (104.15, 30.75)

    def test_temp_example(self):
        from baselines import HistoryIndex, temp_estimate
        records = [(_odt(self.O, self.D, DAY0 + 8 * 3600), m) for m in (15.0, 15.0, 15.0, 35.0)]
        query = _odt(self.O, self.D, DAY0 + 8 * 3600 + 600)
        self.assertAlmostEqual(temp_estimate(query, HistoryIndex(records)), 20.0)

    def test_temp_single_record(self):
        from baselines import HistoryIndex, temp_estimate
        hist = HistoryIndex([(_odt(self.O, self.D, DAY0 + 9 * 3600), 12.0)])
        self.assertAlmostEqual(temp_estimate(_odt(self.O, self.D, DAY0 + 9 * 3600), hist), 12.0)

    def test_temp_no_history(self):
        from baselines import HistoryIndex, NoHistoryError, temp_estimate
        hist = HistoryIndex([(_odt((104.01, 30.61), (104.02, 30.62), DAY0), 10.0)])
        with self.assertRaises(NoHistoryError) as ctx:
            temp_estimate(_odt((104.19, 30.79), (104.18, 30.78), DAY0), hist)
        self.assertIn("no history", str(ctx.exception))

    def test_temp_matches_brute_force(self):
        from baselines import HistoryIndex, NoHistoryError, temp_estimate
        from config import TempConfig
        rng = np.random.default_rng(9)

        def rand_odt():
            o = (104.0 + rng.uniform(0, 0.04), 30.6 + rng.uniform(0, 0.04))
            d = (104.1 + rng.uniform(0, 0.04), 30.7 + rng.uniform(0, 0.04))
            return _odt(o, d, DAY0 + int(rng.integers(0, 86400)))

        records = [(rand_odt(), float(rng.uniform(5, 60))) for _ in range(300)]
        hist, cfg = HistoryIndex(records), TempConfig()
        for _ in range(40):
            q = rand_odt()
            try:
                expected = _brute_temp(q, records, cfg)
            except NoHistoryError:
                with self.assertRaises(NoHistoryError):
                    temp_estimate(q, hist, cfg)
                continue
            self.assertAlmostEqual(temp_estimate(q, hist, cfg), expected, places=9)

    def test_temp_bounds_and_mean_record(self):
        from baselines import HistoryIndex, temp_estimate
        rng = np.random.default_rng(2)
        records = [(_odt(self.O, self.D, DAY0 + 8 * 3600 + int(s)), float(m))
                   for s, m in zip(rng.integers(0, 600, 10), rng.uniform(10, 40, 10))]
        hist = HistoryIndex(records)
        q = _odt(self.O, self.D, DAY0 + 8 * 3600 + 300)
        est = temp_estimate(q, hist)
        values = [m for _, m in records]
        self.assertTrue(min(values) <= est <= max(values))
        self.assertAlmostEqual(temp_estimate(q, hist.extended(q, est)), est, places=9)

    def _grid3(self):
        from geo_pit import AreaOfInterest, GridSpec
        return GridSpec(AreaOfInterest(0.0, 3.0, 0.0, 3.0), 3)

    def _pit(self, cells_times, grid):
        from geo_pit import Trajectory, rasterize
        lng = [c[0] - 0.5 for c, _ in cells_times]
        lat = [c[1] - 0.5 for c, _ in cells_times]
        return rasterize(Trajectory("p", lng, lat, [t for _, t in cells_times]), grid)

    def test_cell_graph_single_edge(self):
        from baselines import build_cell_graph
        from geo_pit import CellIdx
        grid = self._grid3()
        graph = build_cell_graph(self._pit([((1, 1), DAY0 + 3600), ((2, 1), DAY0 + 3660)], grid)[None], grid)
        self.assertAlmostEqual(graph.weight(CellIdx(1, 1), CellIdx(2, 1)), 60.0, places=6)
        self.assertEqual(len(graph.observed), 1)

    def test_cell_graph_skips_non_adjacent(self):
        from baselines import build_cell_graph
        grid = self._grid3()
        with self.assertLogs("baselines", level="WARNING"):
            graph = build_cell_graph(self._pit([((1, 1), DAY0 + 3600), ((3, 3), DAY0 + 3660)], grid)[None], grid)
        self.assertEqual(graph.observed, {})
        self.assertTrue(all(w == graph.fallback for _, _, w in graph.graph.edges(data="weight")))

    def test_cell_graph_matches_accumulation_oracle(self):
        from baselines import build_cell_graph
        from config import SynthConfig
        from data_loader import build_grid, preprocess
        from synthetic import generate_synthetic
        trajs = preprocess(generate_synthetic(SynthConfig(road_grid_n=6, n_trajectories=60,
                                                          min_od_blocks=3, seed=4)))
        grid = build_grid(trajs, 8)
        from geo_pit import rasterize
        pits = np.stack([rasterize(t, grid) for t in trajs])
        sums, counts = {}, {}
        for pit in pits:
            cells = [(x + 1, y + 1) for x in range(8) for y in range(8) if pit[x, y, 0] >= 0]
            cells.sort(key=lambda c: (pit[c[0] - 1, c[1] - 1, 2], c[0] + (c[1] - 1) * 8))
            for a, b in zip(cells, cells[1:]):
                if max(abs(a[0] - b[0]), abs(a[1] - b[1])) != 1:
                    continue
                ta, tb = pit[a[0] - 1, a[1] - 1, 1], pit[b[0] - 1, b[1] - 1, 1]
                delta = ((tb + 1) / 2 - (ta + 1) / 2) * 86400
                if delta > 0:
                    sums[(a, b)] = sums.get((a, b), 0.0) + delta
                    counts[(a, b)] = counts.get((a, b), 0) + 1
        graph = build_cell_graph(pits, grid)
        self.assertEqual(set(graph.observed), set(sums))
        for edge, total in sums.items():
            self.assertAlmostEqual(graph.observed[edge], total / counts[edge], places=6)

    def _two_edge_graph(self):
        from baselines import build_cell_graph
        grid = self._grid3()
        pits = np.stack([
            self._pit([((1, 1), DAY0 + 3600), ((2, 1), DAY0 + 3690)], grid),
            self._pit([((1, 3), DAY0 + 3600), ((2, 3), DAY0 + 6600)], grid),
        ])
        return build_cell_graph(pits, grid), grid

    def test_dijkstra_examples(self):
        from baselines import dijkstra_estimate
        from geo_pit import GeoPoint, encode_odt
        graph, grid = self._two_edge_graph()
        same = encode_odt(GeoPoint(0.2, 0.2), GeoPoint(0.8, 0.7), DAY0, grid.aoi)
        self.assertEqual(dijkstra_estimate(same, graph), 0.0)
        hop = encode_odt(GeoPoint(0.5, 0.5), GeoPoint(1.5, 0.5), DAY0, grid.aoi)
        self.assertAlmostEqual(dijkstra_estimate(hop, graph), 1.5, places=6)

    def test_dijkstra_matches_bellman_ford_and_triangle(self):
        from baselines import build_cell_graph, dijkstra_estimate
        from config import SynthConfig
        from data_loader import build_grid, preprocess
        from geo_pit import GeoPoint, encode_odt, rasterize
        from synthetic import generate_synthetic
        trajs = preprocess(generate_synthetic(SynthConfig(road_grid_n=6, n_trajectories=40,
                                                          min_od_blocks=3, seed=8)))
        grid = build_grid(trajs, 6)
        graph = build_cell_graph(np.stack([rasterize(t, grid) for t in trajs]), grid)
        aoi = grid.aoi
        rng = np.random.default_rng(0)

        def centre(c):
            return GeoPoint(aoi.lng_min + (c[0] - 0.5) * (aoi.lng_max - aoi.lng_min) / 6,
                            aoi.lat_min + (c[1] - 0.5) * (aoi.lat_max - aoi.lat_min) / 6)

        def cost(a, b):
            return dijkstra_estimate(encode_odt(centre(a), centre(b), DAY0, aoi), graph)

        for _ in range(15):
            a, b, c = [tuple(int(v) for v in rng.integers(1, 7, 2)) for _ in range(3)]
            oracle = nx.bellman_ford_path_length(graph.graph, a, b, weight="weight") / 60.0
            self.assertAlmostEqual(cost(a, b), oracle, places=9)
            self.assertLessEqual(cost(a, c), cost(a, b) + cost(b, c) + 1e-9)

    def test_route_pit(self):
        from baselines import dijkstra_route, route_pit
        from geo_pit import GeoPoint, encode_odt
        graph, grid = self._two_edge_graph()
        odt = encode_odt(GeoPoint(0.5, 0.5), GeoPoint(2.5, 2.5), DAY0 + 3600, grid.aoi)
        cells = dijkstra_route(odt, graph)
        pit = route_pit(cells, graph, odt.t_o)
        self.assertEqual(pit.shape, (graph.L_G, graph.L_G, 3))
        self.assertEqual(int((pit[..., 0] == 1).sum()), len(cells))
        self.assertEqual(pit[cells[0].x - 1, cells[0].y - 1, 2], -1.0)
        self.assertEqual(pit[cells[-1].x - 1, cells[-1].y - 1, 2], 1.0)


# ────────────────────────────────────────────────────────────
# 11. METRICS
# ────────────────────────────────────────────────────────────

class TestMetrics(unittest.TestCase):

    def test_regression_examples(self):
        from metrics import MetricError, regression_metrics
        r = regression_metrics([10.0, 20.0], [12.0, 16.0])
        self.assertAlmostEqual(r.rmse, math.sqrt(10))
        self.assertAlmostEqual(r.mae, 3.0)
        self.assertAlmostEqual(r.mape, 20.8333333, places=5)
        zero = regression_metrics([5.0, 7.0], [5.0, 7.0])
        self.assertEqual((zero.rmse, zero.mae, zero.mape), (0.0, 0.0, 0.0))
        off = regression_metrics(np.array([5.0, 9.0, 13.0]) + 2.5, [5.0, 9.0, 13.0])
        self.assertAlmostEqual(off.mae, 2.5)
        self.assertAlmostEqual(off.rmse, 2.5)
        with self.assertRaises(MetricError):
            regression_metrics([1.0], [1.0, 2.0])
        with self.assertRaises(MetricError):
            regression_metrics([1.0], [0.0])

    def test_pit_examples(self):
        from metrics import MetricError, pit_metrics
        a = np.zeros((2, 2, 1))
        b = a.copy()
        b[0, 1, 0] = 1.0
        r = pit_metrics(a, b)
        self.assertAlmostEqual(r.rmse, 0.5)
        self.assertAlmostEqual(r.mae, 0.25)
        self.assertEqual(pit_metrics(b, b).rmse, 0.0)
        with self.assertRaises(MetricError):
            pit_metrics(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)))

    def test_pit_valid_cells_only(self):
        from metrics import pit_metrics
        truth = -np.ones((4, 4, 3))
        truth[1, 1] = [1.0, 0.2, -1.0]
        inferred = truth.copy()
        inferred[1, 1, 1] = 0.4
        inferred[3, 3, 0] = 0.9       # unvisited in truth, ignored
        r = pit_metrics(inferred, truth, valid_only=True)
        self.assertAlmostEqual(r.channels["tod"]["mae"], 0.2)
        self.assertAlmostEqual(r.channels["mask"]["mae"], 0.0)

    def test_route_example(self):
        from metrics import route_metrics
        truth = -np.ones((3, 3, 3))
        inferred = -np.ones((3, 3, 3))
        for x, y in [(3, 1), (2, 2), (1, 3)]:
            truth[x - 1, y - 1, 0] = 1.0
        for x, y in [(3, 1), (2, 2), (2, 3)]:
            inferred[x - 1, y - 1, 0] = 1.0
        r = route_metrics(inferred, truth)
        for v in (r.precision, r.recall, r.f1):
            self.assertAlmostEqual(v, 200.0 / 3.0)
        perfect = route_metrics(truth, truth)
        self.assertEqual((perfect.precision, perfect.recall, perfect.f1), (100.0, 100.0, 100.0))

    def test_route_skips_empty_truth(self):
        from metrics import route_metrics
        truth = -np.ones((2, 3, 3, 3))
        truth[0, 0, 0, 0] = 1.0
        with self.assertLogs("metrics", level="WARNING"):
            r = route_metrics(truth, truth)
        self.assertEqual((r.n, r.skipped), (1, 1))

    def test_random_instances_match_oracles(self):
        from metrics import pit_metrics, regression_metrics, route_metrics
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            t = rng.uniform(1, 60, n)
            p = t + rng.normal(0, 5, n)
            r = regression_metrics(p, t)
            self.assertAlmostEqual(r.rmse, math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / n), places=9)
            self.assertAlmostEqual(r.mae, sum(abs(a - b) for a, b in zip(p, t)) / n, places=9)
            self.assertAlmostEqual(r.mape, 100 * sum(abs(a - b) / b for a, b in zip(p, t)) / n, places=9)
            self.assertGreaterEqual(r.rmse, r.mae - 1e-12)

        for _ in range(200):
            a = rng.uniform(-1, 1, (3, 4, 4, 3))
            b = np.where(rng.random((3, 4, 4, 3)) < 0.5, -1.0, rng.uniform(-1, 1, (3, 4, 4, 3)))
            b[..., 0, 0, 0] = 1.0
            pr = pit_metrics(a, b)
            flat = (a - b).ravel()
            self.assertAlmostEqual(pr.rmse, math.sqrt(np.mean(flat ** 2)), places=9)
            self.assertAlmostEqual(pr.mae, np.mean(np.abs(flat)), places=9)
            ch = [pr.channels[k]["rmse"] for k in ("mask", "tod", "offset")]
            self.assertTrue(min(ch) - 1e-12 <= pr.rmse <= max(ch) + 1e-12)

            rr = route_metrics(a, b)
            tp = fp = fn = 0
            for i in range(3):
                for x in range(4):
                    for y in range(4):
                        pred, true = a[i, x, y, 0] >= 0, b[i, x, y, 0] >= 0
                        tp += pred and true
                        fp += pred and not true
                        fn += true and not pred
            self.assertEqual((rr.tp, rr.fp, rr.fn), (tp, fp, fn))
            P = tp / (tp + fp) if tp + fp else 0.0
            R = tp / (tp + fn)
            self.assertAlmostEqual(rr.precision, 100 * P, places=9)
            self.assertAlmostEqual(rr.recall, 100 * R, places=9)
            if P > 0 and R > 0:
                self.assertAlmostEqual(rr.f1, 100 * 2 * P * R / (P + R), places=9)


# ────────────────────────────────────────────────────────────
# 12. CHECKPOINTS
# ────────────────────────────────────────────────────────────

class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_save_identical(self):
        from checkpoint import load_checkpoint, load_into, save_checkpoint
        model = _tiny_estimator(double=False)
        model.set_normalization([3.0, 9.0])
        first = save_checkpoint(model, {"L_G": 5}, self.dir / "a.ckpt")
        tensors, cfg = load_checkpoint(first)
        self.assertEqual(cfg, {"L_G": 5})
        clone = load_into(_tiny_estimator(double=False, seed=99), tensors)
        for name, value in model.state_dict().items():
            self.assertTrue(torch.equal(value, clone.state_dict()[name]), name)
        second = save_checkpoint(clone, cfg, self.dir / "b.ckpt")
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_scalar_buffers_keep_shape(self):
        from checkpoint import load_checkpoint, load_into, save_checkpoint
        model = _tiny_estimator(double=False)
        model.set_normalization([10.0, 20.0, 30.0])
        tensors, _ = load_checkpoint(save_checkpoint(model, {}, self.dir / "s.ckpt"))
        self.assertEqual(tensors["t_mean"].shape, ())
        self.assertEqual(tensors["t_std"].shape, ())
        clone = load_into(_tiny_estimator(double=False, seed=7), tensors)
        self.assertAlmostEqual(float(clone.t_mean), 20.0, places=5)
        self.assertEqual(tuple(clone.t_std.shape), ())

    def test_bad_magic_and_truncation(self):
        from checkpoint import CheckpointError, load_checkpoint, save_checkpoint
        path = save_checkpoint(_tiny_estimator(double=False), {}, self.dir / "c.ckpt")
        data = path.read_bytes()
        (self.dir / "bad.ckpt").write_bytes(b"NOTACKPT" + data[8:])
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.dir / "bad.ckpt")
        self.assertIn("bad magic", str(ctx.exception))
        (self.dir / "short.ckpt").write_bytes(data[:len(data) // 2])
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.dir / "short.ckpt")
        self.assertIn("truncated", str(ctx.exception))

    def test_mismatched_grid_names_tensor(self):
        from checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
        path = save_checkpoint(_tiny_estimator(L_G=5, double=False), {}, self.dir / "e.ckpt")
        tensors, _ = load_checkpoint(path)
        with self.assertRaises(CheckpointError) as ctx:
            load_into(_tiny_estimator(L_G=6, double=False), tensors)
        self.assertIn("cell_embedding", str(ctx.exception))

    def test_pit_dumps(self):
        from checkpoint import dump_pit, load_pit
        traj, grid = _fig3()
        from geo_pit import rasterize
        pit = rasterize(traj, grid)
        text = dump_pit(pit, self.dir / "pit.csv")
        self.assertEqual(text.read_text().splitlines()[0], "3,3,3")
        np.testing.assert_allclose(load_pit(text), pit, atol=1e-8)
        np.testing.assert_allclose(load_pit(dump_pit(pit, self.dir / "pit.bin")), pit, atol=1e-7)


# ────────────────────────────────────────────────────────────
# 13. PIPELINE AND CLI
# ────────────────────────────────────────────────────────────

REPORT_KEYS = {"config", "grid", "counts", "regression", "pit", "route", "fallbacks",
               "training", "efficiency", "benchmark"}


class TestPipeline(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        from main import run_experiment
        cls.tmp = tempfile.TemporaryDirectory()
        base = Path(cls.tmp.name)
        cls.dir_a, cls.dir_b = base / "a", base / "b"
        cls.report = run_experiment(_mini_config(cls.dir_a))
        run_experiment(_mini_config(cls.dir_b).override(num_workers=1))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_report_schema(self):
        self.assertEqual(set(self.report), REPORT_KEYS)
        self.assertEqual(set(self.report["regression"]), {"DOT", "TEMP", "Dijkstra", "Dijkstra+Est"})
        self.assertEqual(set(self.report["pit"]), {"all_cells", "valid_cells"})
        self.assertEqual(set(self.report["route"]), {"DOT", "Dijkstra"})
        for r in self.report["regression"].values():
            self.assertGreaterEqual(r["rmse"], r["mae"] - 1e-9)

    def test_output_files(self):
        for name in ("report.json", "timing.json", "metrics.csv", "pit_metrics.csv",
                     "benchmark.csv", "denoiser.ckpt", "estimator.ckpt", "efficiency.png"):
            self.assertTrue((self.dir_a / name).exists(), name)

    def test_reports_byte_identical(self):
        self.assertEqual((self.dir_a / "report.json").read_bytes(), (self.dir_b / "report.json").read_bytes())

    def test_checkpoint_reloads(self):
        from main import load_model
        model, cfg, grid = load_model(self.dir_a / "estimator.ckpt", "Estimator")
        self.assertEqual(cfg.L_G, 8)
        self.assertEqual(grid.L_G, 8)
        self.assertEqual(tuple(model.t_mean.shape), ())

    def test_cli_estimate_empty_pit_uses_temp(self):
        import contextlib
        import io
        from unittest import mock
        import main as main_mod
        from geo_pit import empty_pit
        cfg = _mini_config(self.dir_a).to_dict()
        cfg.pop("out_dir")
        cfg_path = Path(self.tmp.name) / "estimate_cfg.json"
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        _, _, grid = main_mod.load_model(self.dir_a / "denoiser.ckpt", "Denoiser")
        lng = (grid.aoi.lng_min + grid.aoi.lng_max) / 2
        lat = (grid.aoi.lat_min + grid.aoi.lat_max) / 2
        buf = io.StringIO()
        with mock.patch.object(main_mod, "infer_pit", return_value=empty_pit(8)), \
                contextlib.redirect_stdout(buf):
            code = main_mod.main(["estimate", "--config", str(cfg_path),
                                  "--out", str(Path(self.tmp.name) / "est"),
                                  "--denoiser", str(self.dir_a / "denoiser.ckpt"),
                                  "--estimator", str(self.dir_a / "estimator.ckpt"),
                                  "--origin", f"{lng},{lat}", "--dest", f"{lng},{lat}",
                                  "--depart", str(DAY0 + 9 * 3600)])
        self.assertEqual(code, 0)
        lines = buf.getvalue().strip().splitlines()
        self.assertIn("falling back to TEMP", lines[0])
        minutes = float(lines[-1].split()[0])
        self.assertTrue(np.isfinite(minutes) and minutes > 0)

    def test_stage_error_names_stage(self):
        from main import StageError, run_experiment
        cfg = _mini_config(Path(self.tmp.name) / "c")
        cfg.data_path = str(Path(self.tmp.name) / "missing.csv")
        with self.assertRaises(StageError) as ctx:
            run_experiment(cfg)
        self.assertEqual(ctx.exception.stage, "data")


class TestCLI(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        cfg = _mini_config(self.dir).to_dict()
        cfg.pop("out_dir")
        self.cfg_path = self.dir / "cfg.json"
        self.cfg_path.write_text(json.dumps(cfg), encoding="utf-8")

    def tearDown(self):
        self.tmp.cleanup()

    def test_generate_then_baseline(self):
        from main import main
        out = self.dir / "out"
        self.assertEqual(main(["generate", "--config", str(self.cfg_path), "--out", str(out)]), 0)
        self.assertTrue((out / "trajectories.csv").exists())
        self.assertEqual(main(["baseline", "temp", "--config", str(self.cfg_path),
                               "--data", str(out / "trajectories.csv"), "--out", str(out)]), 0)

    def test_bench_attention(self):
        from main import main
        out = self.dir / "bench"
        self.assertEqual(main(["bench-attention", "--config", str(self.cfg_path), "--out", str(out)]), 0)
        self.assertTrue((out / "benchmark.csv").exists())

    def test_bad_config_exits_nonzero(self):
        from main import main
        bad = self.dir / "bad.json"
        bad.write_text(json.dumps({"L_Q": 1}), encoding="utf-8")
        self.assertEqual(main(["run", "--config", str(bad)]), 1)

    def test_flag_overrides(self):
        from main import build_parser, config_from_args
        args = build_parser().parse_args(["run", "--config", str(self.cfg_path), "--L_G", "12", "--seed", "3"])
        cfg = config_from_args(args)
        self.assertEqual((cfg.L_G, cfg.seed, cfg.synth.seed, cfg.N), (12, 3, 3, 10))


# ────────────────────────────────────────────────────────────
# 14. LONG EXPERIMENTS (DOT_SLOW_TESTS=1)
# ────────────────────────────────────────────────────────────

@unittest.skipUnless(SLOW, "set DOT_SLOW_TESTS=1")
class TestLongExperiments(unittest.TestCase):

    def test_diffusion_overfit_recovery(self):
        from config import SynthConfig
        from data_loader import build_grid, preprocess, Dataset
        from diffusion import infer_pits, linear_schedule, make_batch, train_denoiser_step
        from metrics import route_metrics
        from nn_core import Adam, SeededRng
        from synthetic import generate_synthetic
        trajs = preprocess(generate_synthetic(SynthConfig(n_trajectories=12, outlier_rate=0.0, seed=1)))[:8]
        ds = Dataset(trajs, build_grid(trajs, 10))
        pits, odts = ds.pits(), ds.odt_matrix()
        sched = linear_schedule(200)
        model = _tiny_denoiser(L_G=10, L_D=2, base=32, d=64, double=False)
        opt = Adam(model, lr=1e-3)
        rng = SeededRng(0)
        losses = [train_denoiser_step(model, make_batch(pits, odts, sched, rng), sched, opt) for _ in range(2000)]
        self.assertLess(np.mean(losses[-50:]), 0.1 * np.mean(losses[:10]))
        inferred = infer_pits(odts, model, sched, list(range(8)))
        for i in range(8):
            self.assertGreater(route_metrics(inferred[i], pits[i]).f1, 80.0)

    def test_end_to_end_ordering(self):
        from config import ExperimentConfig, SynthConfig
        from main import run_experiment
        with tempfile.TemporaryDirectory() as tmp:
            cfg = ExperimentConfig(N=500, epochs=10, estimator_epochs=20, out_dir=tmp, bench_runs=10,
                                   synth=SynthConfig(n_trajectories=5000, outlier_rate=0.15))
            report = run_experiment(cfg)
        mape = {k: v["mape"] for k, v in report["regression"].items()}
        self.assertLess(mape["DOT"], mape["TEMP"])
        self.assertLess(mape["DOT"], mape["Dijkstra"])
        self.assertGreater(report["route"]["DOT"]["f1"], 60.0)


# ────────────────────────────────────────────────────────────
# 15. FILE STRUCTURE
# ────────────────────────────────────────────────────────────

class TestFileStructure(unittest.TestCase):
    """Validate the expected flat module layout exists."""

    EXPECTED_FILES = [
        "config.py", "geo_pit.py", "data_loader.py", "synthetic.py", "nn_core.py",
        "diffusion.py", "denoiser.py", "estimator.py", "baselines.py", "metrics.py",
        "checkpoint.py", "trainer.py", "main.py", "requirements.txt", ".env.example",
    ]

    def test_all_expected_files_exist(self):
        missing = [f for f in self.EXPECTED_FILES if not (ROOT / f).exists()]
        self.assertEqual(missing, [], f"Missing files: {missing}")

    def test_no_dashboard_modules(self):
        for name in ("app.py", "db.py", "auth.py", "pages"):
            self.assertFalse((ROOT / name).exists(), f"{name} should not exist")

    def test_env_example_lists_settings(self):
        content = (ROOT / ".env.example").read_text()
        for key in ("DOT_SEED", "DOT_OUT_DIR", "DOT_NUM_WORKERS", "DOT_LOG_LEVEL", "DOT_DTYPE"):
            self.assertIn(key, content)

    def test_requirements_cover_stack(self):
        reqs = (ROOT / "requirements.txt").read_text().lower()
        for pkg in ("torch", "numpy", "pandas", "scikit-learn", "networkx", "matplotlib", "python-dotenv"):
            self.assertIn(pkg, reqs)


# ────────────────────────────────────────────────────────────
# RUNNER
# ────────────────────────────────────────────────────────────

class _ColorResult(unittest.TextTestResult):
    """Custom result class with colored output."""

    GREEN = "\033[92m"
    RED = "\033[91m"
    YELLOW = "\033[93m"
    CYAN = "\033[96m"
    BOLD = "\033[1m"
    RESET = "\033[0m"

    def addSuccess(self, test):
        super().addSuccess(test)
        if self.showAll:
            self.stream.write(f"  {self.GREEN}PASS{self.RESET}\n")
        else:
            self.stream.write(f"{self.GREEN}.{self.RESET}")
            self.stream.flush()

    def addFailure(self, test, err):
        super().addFailure(test, err)
        if self.showAll:
            self.stream.write(f"  {self.RED}FAIL{self.RESET}\n")
        else:
            self.stream.write(f"{self.RED}F{self.RESET}")
            self.stream.flush()

    def addError(self, test, err):
        super().addError(test, err)
        if self.showAll:
            self.stream.write(f"  {self.RED}ERROR{self.RESET}\n")
        else:
            self.stream.write(f"{self.RED}E{self.RESET}")
            self.stream.flush()

    def addSkip(self, test, reason):
        super().addSkip(test, reason)
        if self.showAll:
            self.stream.write(f"  {self.YELLOW}SKIP{self.RESET} ({reason})\n")
        else:
            self.stream.write(f"{self.YELLOW}s{self.RESET}")
            self.stream.flush()


class _ColorRunner(unittest.TextTestRunner):
    resultclass = _ColorResult


def _print_banner():
    C = _ColorResult
    print(f"\n{C.CYAN}{C.BOLD}{'=' * 60}")
    print(f"  DOT Travel Time Oracle - Test Suite")
    print(f"{'=' * 60}{C.RESET}\n")


def _print_summary(result, elapsed):
    C = _ColorResult
    total = result.testsRun
    failures = len(result.failures)
    errors = len(result.errors)
    skipped = len(result.skipped)
    passed = total - failures - errors - skipped

    print(f"\n{C.CYAN}{C.BOLD}{'-' * 60}")
    print(f"  RESULTS")
    print(f"{'-' * 60}{C.RESET}")
    print(f"  Total:    {total}")
    print(f"  {C.GREEN}Passed:   {passed}{C.RESET}")
    if failures:
        print(f"  {C.RED}Failed:   {failures}{C.RESET}")
    if errors:
        print(f"  {C.RED}Errors:   {errors}{C.RESET}")
    if skipped:
        print(f"  {C.YELLOW}Skipped:  {skipped}{C.RESET}")
    print(f"  Time:     {elapsed:.2f}s")

    if failures or errors:
        print(f"\n  {C.RED}{C.BOLD}SOME TESTS FAILED{C.RESET}")
    else:
        print(f"\n  {C.GREEN}{C.BOLD}ALL TESTS PASSED{C.RESET}")
    print()


ALL_TEST_CLASSES = [
    TestImports, TestConfig, TestGeoPit, TestDataLoader, TestSynthetic,
    TestNNCore, TestDiffusion, TestDenoiser, TestEstimator, TestBaselines,
    TestMetrics, TestCheckpoint, TestPipeline, TestCLI, TestLongExperiments,
    TestFileStructure,
]


if __name__ == "__main__":
    _print_banner()

    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    if len(sys.argv) > 1 and sys.argv[1] == "-k":
        pattern = sys.argv[2] if len(sys.argv) > 2 else ""
        for test_class in ALL_TEST_CLASSES:
            for test in loader.loadTestsFromTestCase(test_class):
                if pattern.lower() in str(test).lower():
                    suite.addTest(test)
    else:
        for test_class in ALL_TEST_CLASSES:
            suite.addTests(loader.loadTestsFromTestCase(test_class))

    verbosity = 2 if "-v" in sys.argv else 1
    runner = _ColorRunner(verbosity=verbosity)
    result = runner.run(suite)

    elapsed = time.time() - _t0
    _print_summary(result, elapsed)

    sys.exit(0 if result.wasSuccessful() else 1)
