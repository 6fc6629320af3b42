import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path

# Configure matplotlib BEFORE anything imports pyplot
os.environ.setdefault("MPLCONFIGDIR", os.path.join(os.environ.get("TMPDIR", "/tmp"), "matplotlib"))
os.environ.setdefault("MPLBACKEND", "Agg")
import matplotlib
matplotlib.use("Agg")

import numpy as np
import pandas as pd

from baselines import (HistoryIndex, NoHistoryError, build_cell_graph, dijkstra_estimate,
                       dijkstra_route, route_pit, temp_estimate)
from checkpoint import dump_pit, load_checkpoint, load_into, load_pit, save_checkpoint
from config import ConfigError, ExperimentConfig, get_logger
from data_loader import (SplitDataset, build_grid, parse_trajectories, preprocess, split,
                         subsample, write_trajectories)
from denoiser import Denoiser, DenoiserConfig
from diffusion import infer_pit, linear_schedule
from estimator import EmptyPiTError, Estimator, MViTConfig, benchmark_attention, estimate
from geo_pit import AreaOfInterest, GeoPoint, GridSpec, encode_odt
from metrics import pit_metrics, regression_metrics, route_metrics
from nn_core import param_count, set_determinism
from synthetic import generate_synthetic
from trainer import (build_denoiser, build_estimator, infer_dataset, predict_with_samples,
                     query_seed, train_diffusion, train_estimator)

log = get_logger("dot")

# config keys that do not influence results and stay out of report.json
_NON_RESULT_KEYS = ("out_dir", "num_workers")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str, timings: dict = None):
    """Time a pipeline phase and tag any failure with its name."""
    t0 = time.perf_counter()
    log.info(f"[*] {name}...")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        if timings is not None:
            timings[name] = round(time.perf_counter() - t0, 3)


# ============================================================
# 1. DATA
# ============================================================

def load_trajectories(cfg: ExperimentConfig) -> list:
    if cfg.data_path:
        return parse_trajectories(cfg.data_path)
    return generate_synthetic(cfg.synth)


def prepare_splits(cfg: ExperimentConfig) -> SplitDataset:
    """Load or generate, filter, grid over the whole set, split, subsample train."""
    kept = preprocess(load_trajectories(cfg))
    grid = build_grid(kept, cfg.L_G)
    splits = split(kept, grid=grid)
    splits.train = subsample(splits.train, cfg.train_fraction, cfg.seed)
    log.info(f"[OK] Split: train={len(splits.train)} val={len(splits.val)} test={len(splits.test)}")
    return splits


def _grid_echo(grid: GridSpec) -> dict:
    return {"aoi": grid.aoi.to_dict(), "L_G": grid.L_G}


def _grid_from_echo(echo: dict) -> GridSpec:
    return GridSpec(AreaOfInterest(**echo["aoi"]), echo["L_G"])


def _config_echo(cfg: ExperimentConfig) -> dict:
    data = cfg.to_dict()
    for key in _NON_RESULT_KEYS:
        data.pop(key, None)
    return data


# ============================================================
# 2. CHECKPOINTS
# ============================================================

def save_model(model, cfg: ExperimentConfig, grid: GridSpec, path) -> Path:
    echo = {"config": cfg.to_dict(), "grid": _grid_echo(grid), "model": type(model).__name__}
    path = save_checkpoint(model, echo, path)
    log.info(f"[OK] Checkpoint saved: {path}")
    return path


def load_model(path, kind: str):
    """-> (model, ExperimentConfig, GridSpec) for kind 'Denoiser' or 'Estimator'."""
    tensors, echo = load_checkpoint(path)
    if echo.get("model") != kind:
        raise ConfigError(f"{path} holds a {echo.get('model')}, expected {kind}")
    cfg = ExperimentConfig.from_dict(echo["config"])
    if kind == "Denoiser":
        model = Denoiser(DenoiserConfig.from_experiment(cfg))
    else:
        model = Estimator(MViTConfig.from_experiment(cfg))
    return load_into(model, tensors), cfg, _grid_from_echo(echo["grid"])


# ============================================================
# 3. EVALUATION HELPERS
# ============================================================

def temp_predictions(odts, hist: HistoryIndex, cfg: ExperimentConfig, global_mean: float):
    """TEMP per query; the training mean when no neighbour exists at any radius."""
    preds, fallbacks = [], 0
    for odt in odts:
        try:
            preds.append(temp_estimate(odt, hist, cfg.temp))
        except NoHistoryError:
            preds.append(global_mean)
            fallbacks += 1
    return np.array(preds), fallbacks


def dot_predictions(estimator: Estimator, test_inferred: np.ndarray, temp_preds: np.ndarray):
    """Estimator output per query; queries whose sampled PiTs are all empty fall back to TEMP."""
    preds = predict_with_samples(estimator, test_inferred)
    empty = ~np.isfinite(preds)
    if empty.any():
        log.warning(f"[WARNING] {int(empty.sum())} test quer(ies) produced empty PiTs; using TEMP")
    return np.where(empty, temp_preds, preds), int(empty.sum())


def plot_efficiency(rows: list, path):
    """MViT vs dense ViT attention cost against grid length."""
    import matplotlib.pyplot as plt

    df = pd.DataFrame(rows)
    fig, axes = plt.subplots(1, 2, figsize=(12, 4.5))
    axes[0].plot(df["L_G"], df["vit_attention_flops"], "o-", label="ViT (dense)", color="#4A90D9")
    axes[0].plot(df["L_G"], df["mvit_attention_flops"], "s-", label="MViT (valid only)", color="#F5A623")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("grid length L_G")
    axes[0].set_ylabel("attention FLOPs")
    axes[0].legend(fontsize=8)
    axes[1].plot(df["L_G"], df["vit_ms"], "o-", label="ViT (dense)", color="#4A90D9")
    axes[1].plot(df["L_G"], df["mvit_ms"], "s-", label="MViT (valid only)", color="#F5A623")
    axes[1].set_xlabel("grid length L_G")
    axes[1].set_ylabel("ms per forward pass")
    axes[1].legend(fontsize=8)
    plt.suptitle(f"Estimator cost at {int(df['valid_cells'].iloc[0])} valid cells",
                 fontsize=13, fontweight="bold")
    plt.tight_layout()
    plt.savefig(path, dpi=150, bbox_inches="tight")
    plt.close()
    print(f"  [OK] Figure saved: {path}")


def print_summary(report: dict):
    print("\n" + "=" * 72)
    print("  TRAVEL TIME ESTIMATION - TEST SET")
    print("=" * 72)
    print(f"\n{'Method':<22} {'RMSE (min)':<12} {'MAE (min)':<12} {'MAPE (%)':<10} {'n':<6}")
    print("-" * 72)
    for name, r in report["regression"].items():
        print(f"{name:<22} {r['rmse']:<12.3f} {r['mae']:<12.3f} {r['mape']:<10.3f} {r['n']:<6}")
    print("-" * 72)
    print(f"\n{'Route':<22} {'Precision':<12} {'Recall':<12} {'F1':<10}")
    print("-" * 72)
    for name, r in report["route"].items():
        print(f"{name:<22} {r['precision']:<12.2f} {r['recall']:<12.2f} {r['f1']:<10.2f}")
    pit = report["pit"]["all_cells"]
    print("-" * 72)
    print(f"PiT inference: RMSE {pit['rmse']:.4f}  MAE {pit['mae']:.4f} (all cells)")
    print("=" * 72)


# ============================================================
# 4. FULL EXPERIMENT
# ============================================================

def run_experiment(cfg: ExperimentConfig) -> dict:
    """Both stages end to end plus baselines; writes the report files to cfg.out_dir."""
    cfg.validate()
    set_determinism(cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    with stage("data", timings):
        splits = prepare_splits(cfg)
        train, val, test = splits.train, splits.val, splits.test
        grid = train.grid
        if len(test) == 0:
            raise ValueError("empty test split")

    with stage("rasterize", timings):
        train_pits, test_pits = train.pits(), test.pits()
        train_t, val_t, test_t = train.travel_times(), val.travel_times(), test.travel_times()

    with stage("train-diffusion", timings):
        sched = linear_schedule(cfg.N)
        denoiser = build_denoiser(cfg)
        diffusion_loss = train_diffusion(denoiser, train, sched, cfg)
        save_model(denoiser, cfg, grid, out / "denoiser.ckpt")

    with stage("infer-pit", timings):
        val_inf = infer_dataset(denoiser, sched, val.odt_matrix(), cfg, "val")
        test_inf = infer_dataset(denoiser, sched, test.odt_matrix(), cfg, "test")
        if cfg.estimator_on_inferred:
            train_source = infer_dataset(denoiser, sched, train.odt_matrix(), cfg, "train")[0]
        else:
            train_source = train_pits

    with stage("train-estimator", timings):
        estimator = build_estimator(cfg)
        est_history = train_estimator(estimator, train_source, train_t, val_inf, val_t, cfg)
        save_model(estimator, cfg, grid, out / "estimator.ckpt")

    with stage("baselines", timings):
        global_mean = float(train_t.mean())
        hist = HistoryIndex.from_dataset(train)
        temp_preds, temp_fallbacks = temp_predictions(test.odts(), hist, cfg, global_mean)
        graph = build_cell_graph(train_pits, grid)
        test_odts = test.odts()
        dijkstra_preds = np.array([dijkstra_estimate(o, graph) for o in test_odts])
        routed = np.stack([route_pit(dijkstra_route(o, graph), graph, o.t_o) for o in test_odts])

    with stage("evaluate", timings):
        t0 = time.perf_counter()
        dot_preds, dot_fallbacks = dot_predictions(estimator, test_inf, temp_preds)
        per_query_ms = (time.perf_counter() - t0) * 1000.0 / len(test)
        routed_preds = estimator.predict_minutes(routed)
        regression = {
            "DOT": regression_metrics(dot_preds, test_t).to_dict(),
            "TEMP": regression_metrics(temp_preds, test_t).to_dict(),
            "Dijkstra": regression_metrics(dijkstra_preds, test_t).to_dict(),
            "Dijkstra+Est": regression_metrics(routed_preds, test_t).to_dict(),
        }
        pit = {
            "all_cells": pit_metrics(test_inf[0], test_pits).to_dict(),
            "valid_cells": pit_metrics(test_inf[0], test_pits, valid_only=True).to_dict(),
        }
        route = {
            "DOT": route_metrics(test_inf[0], test_pits).to_dict(),
            "Dijkstra": route_metrics(routed, test_pits).to_dict(),
        }

    with stage("bench-attention", timings):
        bench = benchmark_attention(cfg.bench_grid_sizes, cfg.bench_valid_cells, cfg.bench_runs,
                                    d_E=cfg.d_E, L_E=cfg.L_E, heads=cfg.heads, seed=cfg.seed)

    report = {
        "config": _config_echo(cfg),
        "grid": _grid_echo(grid),
        "counts": {"train": len(train), "val": len(val), "test": len(test)},
        "regression": regression,
        "pit": pit,
        "route": route,
        "fallbacks": {"DOT_to_TEMP": dot_fallbacks, "TEMP_to_global_mean": temp_fallbacks},
        "training": {
            "diffusion_loss": diffusion_loss,
            "estimator_loss": est_history["loss"],
            "estimator_val_mae": est_history["val_mae"],
            "estimator_best_epoch": est_history["best_epoch"],
        },
        "efficiency": {
            "denoiser_parameters": param_count(denoiser),
            "estimator_parameters": param_count(estimator),
        },
        "benchmark": [{k: v for k, v in row.items() if not k.endswith("_ms")} for row in bench],
    }
    timings["estimate_ms_per_query"] = round(per_query_ms, 3)
    timings["benchmark_ms"] = [{"L_G": r["L_G"], "mvit_ms": r["mvit_ms"], "vit_ms": r["vit_ms"]}
                               for r in bench]
    write_reports(report, timings, bench, out)
    print_summary(report)
    return report


def write_reports(report: dict, timings: dict, bench: list, out: Path):
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2), encoding="utf-8")
    (out / "timing.json").write_text(json.dumps(timings, sort_keys=True, indent=2), encoding="utf-8")

    pd.DataFrame([{"method": k, **v} for k, v in report["regression"].items()]).to_csv(
        out / "metrics.csv", index=False)
    pit_rows = []
    for variant, r in report["pit"].items():
        pit_rows.append({"cells": variant, "channel": "overall", "rmse": r["rmse"], "mae": r["mae"]})
        for ch, vals in r["channels"].items():
            pit_rows.append({"cells": variant, "channel": ch, **vals})
    pd.DataFrame(pit_rows).to_csv(out / "pit_metrics.csv", index=False)
    pd.DataFrame(bench).to_csv(out / "benchmark.csv", index=False)
    plot_efficiency(bench, out / "efficiency.png")
    print(f"[OK] Reports written to {out}")


# ============================================================
# 5. SUBCOMMANDS
# ============================================================

def _point(text: str) -> GeoPoint:
    try:
        lng, lat = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected 'lng,lat', got {text!r}")
    return GeoPoint(lng, lat)


def cmd_generate(cfg, args):
    path = write_trajectories(generate_synthetic(cfg.synth), args.output or Path(cfg.out_dir) / "trajectories.csv")
    print(f"[OK] Trajectories written: {path}")


def cmd_preprocess(cfg, args):
    kept = preprocess(parse_trajectories(args.input))
    path = write_trajectories(kept, args.output or Path(cfg.out_dir) / "preprocessed.csv")
    print(f"[OK] {len(kept)} trajectories written: {path}")


def cmd_rasterize(cfg, args):
    splits = prepare_splits(cfg)
    out = Path(cfg.out_dir)
    for name in ("train", "val", "test"):
        ds = getattr(splits, name)
        echo = {"kind": "pits", "split": name, "grid": _grid_echo(ds.grid),
                "traj_ids": [tr.traj_id for tr in ds.trajectories]}
        path = save_checkpoint({"pits": ds.pits()}, echo, out / f"pits_{name}.bin")
        print(f"[OK] {len(ds)} {name} PiTs written: {path}")


def cmd_train_diffusion(cfg, args):
    set_determinism(cfg.seed)
    splits = prepare_splits(cfg)
    denoiser = build_denoiser(cfg)
    train_diffusion(denoiser, splits.train, linear_schedule(cfg.N), cfg)
    save_model(denoiser, cfg, splits.train.grid, Path(cfg.out_dir) / "denoiser.ckpt")


def cmd_infer_pit(cfg, args):
    denoiser, dcfg, grid = load_model(args.denoiser, "Denoiser")
    odt = encode_odt(_point(args.origin), _point(args.dest), args.depart, grid.aoi)
    pit = infer_pit(odt, denoiser, linear_schedule(dcfg.N), query_seed(cfg.seed, "cli", 0))
    path = dump_pit(pit, args.dump or Path(cfg.out_dir) / "pit.csv")
    print(f"[OK] PiT with {int((pit[..., 0] >= 0).sum())} visited cell(s) written: {path}")


def cmd_train_estimator(cfg, args):
    set_determinism(cfg.seed)
    splits = prepare_splits(cfg)
    if args.denoiser:
        denoiser, dcfg, _ = load_model(args.denoiser, "Denoiser")
        val_pits = infer_dataset(denoiser, linear_schedule(dcfg.N), splits.val.odt_matrix(), cfg, "val")
    else:
        print("  [SKIP] No denoiser given: validating on ground-truth PiTs")
        val_pits = splits.val.pits()[None]
    estimator = build_estimator(cfg)
    train_estimator(estimator, splits.train.pits(), splits.train.travel_times(),
                    val_pits, splits.val.travel_times(), cfg)
    save_model(estimator, cfg, splits.train.grid, Path(cfg.out_dir) / "estimator.ckpt")


def cmd_estimate(cfg, args):
    denoiser, dcfg, grid = load_model(args.denoiser, "Denoiser")
    estimator, _, _ = load_model(args.estimator, "Estimator")
    odt = encode_odt(_point(args.origin), _point(args.dest), args.depart, grid.aoi)
    pit = infer_pit(odt, denoiser, linear_schedule(dcfg.N), query_seed(cfg.seed, "cli", 0))
    if args.dump:
        print(f"  [OK] PiT written: {dump_pit(pit, args.dump)}")
    try:
        minutes = estimate(pit, estimator)
    except EmptyPiTError:
        print("  [WARNING] Inferred PiT is empty; falling back to TEMP")
        train = prepare_splits(cfg).train
        preds, _ = temp_predictions([odt], HistoryIndex.from_dataset(train), cfg,
                                    float(train.travel_times().mean()))
        minutes = float(preds[0])
    print(f"{minutes:.3f} min")


def cmd_baseline(cfg, args):
    splits = prepare_splits(cfg)
    train, test = splits.train, splits.test
    truths = test.travel_times()
    if args.method == "temp":
        preds, _ = temp_predictions(test.odts(), HistoryIndex.from_dataset(train), cfg,
                                    float(train.travel_times().mean()))
    else:
        graph = build_cell_graph(train.pits(), train.grid)
        preds = np.array([dijkstra_estimate(o, graph) for o in test.odts()])
    r = regression_metrics(preds, truths)
    print(f"[OK] {args.method}: RMSE {r.rmse:.3f}  MAE {r.mae:.3f}  MAPE {r.mape:.2f}%  (n={r.n})")


def cmd_evaluate(cfg, args):
    denoiser, dcfg, _ = load_model(args.denoiser, "Denoiser")
    estimator, _, _ = load_model(args.estimator, "Estimator")
    splits = prepare_splits(cfg)
    train, test = splits.train, splits.test
    test_inf = infer_dataset(denoiser, linear_schedule(dcfg.N), test.odt_matrix(), cfg, "test")
    temp_preds, _ = temp_predictions(test.odts(), HistoryIndex.from_dataset(train), cfg,
                                     float(train.travel_times().mean()))
    preds, _ = dot_predictions(estimator, test_inf, temp_preds)
    r = regression_metrics(preds, test.travel_times())
    p = pit_metrics(test_inf[0], test.pits())
    route = route_metrics(test_inf[0], test.pits())
    print(f"[OK] DOT: RMSE {r.rmse:.3f}  MAE {r.mae:.3f}  MAPE {r.mape:.2f}%  (n={r.n})")
    print(f"[OK] PiT: RMSE {p.rmse:.4f}  MAE {p.mae:.4f}; route F1 {route.f1:.2f}%")


def cmd_bench_attention(cfg, args):
    rows = benchmark_attention(cfg.bench_grid_sizes, cfg.bench_valid_cells, cfg.bench_runs,
                               d_E=cfg.d_E, L_E=cfg.L_E, heads=cfg.heads, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out / "benchmark.csv", index=False)
    plot_efficiency(rows, out / "efficiency.png")


def cmd_run(cfg, args):
    run_experiment(cfg)


def cmd_show_pit(cfg, args):
    pit = load_pit(args.path)
    print(f"[OK] {args.path}: shape {pit.shape}, {int((pit[..., 0] >= 0).sum())} visited cell(s)")


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "rasterize": cmd_rasterize,
    "train-diffusion": cmd_train_diffusion,
    "infer-pit": cmd_infer_pit,
    "train-estimator": cmd_train_estimator,
    "estimate": cmd_estimate,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "bench-attention": cmd_bench_attention,
    "run": cmd_run,
    "show-pit": cmd_show_pit,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="out_dir")
    common.add_argument("--data", dest="data_path", help="trajectory CSV (synthetic city if omitted)")
    for name in ("L_G", "N", "L_D", "d_E", "L_E"):
        common.add_argument(f"--{name}", type=int)

    parser = argparse.ArgumentParser(prog="dot", description="Origin-destination travel time oracle")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common])
    p.add_argument("--output")
    p = sub.add_parser("preprocess", parents=[common])
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    sub.add_parser("rasterize", parents=[common])
    sub.add_parser("train-diffusion", parents=[common])
    for name in ("infer-pit", "estimate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--denoiser", required=True)
        p.add_argument("--origin", required=True, help="lng,lat")
        p.add_argument("--dest", required=True, help="lng,lat")
        p.add_argument("--depart", required=True, type=int, help="unix seconds")
        p.add_argument("--dump", help="write the PiT (.csv text, otherwise binary)")
        if name == "estimate":
            p.add_argument("--estimator", required=True)
    p = sub.add_parser("train-estimator", parents=[common])
    p.add_argument("--denoiser", help="validate on PiTs inferred by this denoiser")
    p = sub.add_parser("baseline", parents=[common])
    p.add_argument("method", choices=("temp", "dijkstra"))
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--denoiser", required=True)
    p.add_argument("--estimator", required=True)
    sub.add_parser("bench-attention", parents=[common])
    sub.add_parser("run", parents=[common])
    p = sub.add_parser("show-pit", parents=[common])
    p.add_argument("path")
    return parser


def config_from_args(args) -> ExperimentConfig:
    """Defaults, then the JSON file, then CLI flags."""
    cfg = ExperimentConfig.from_json_file(args.config) if args.config else ExperimentConfig()
    cfg.override(seed=args.seed, out_dir=args.out_dir, data_path=args.data_path,
                 L_G=args.L_G, N=args.N, L_D=args.L_D, d_E=args.d_E, L_E=args.L_E)
    if args.seed is not None:
        cfg.synth.seed = args.seed
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args) or 0
    except (ValueError, LookupError, RuntimeError) as e:
        log.error(f"{e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
