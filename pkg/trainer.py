"""
Epoch loops for both stages and parallel PiT inference.
"""

import copy
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
from sklearn.metrics import mean_absolute_error

from config import ExperimentConfig, get_logger, torch_dtype
from data_loader import Dataset
from denoiser import Denoiser, DenoiserConfig
from diffusion import NoiseSchedule, infer_pits, make_batch, train_denoiser_step
from estimator import Estimator, MViTConfig, train_estimator_step
from nn_core import Adam, SeededRng, stable_u64

log = get_logger(__name__)

# ── Model construction ──

def build_denoiser(cfg: ExperimentConfig) -> Denoiser:
    torch.manual_seed(stable_u64(f"{cfg.seed}:denoiser-init") % (2 ** 63))
    return Denoiser(DenoiserConfig.from_experiment(cfg))


def build_estimator(cfg: ExperimentConfig) -> Estimator:
    torch.manual_seed(stable_u64(f"{cfg.seed}:estimator-init") % (2 ** 63))
    return Estimator(MViTConfig.from_experiment(cfg))


def _batches(n: int, batch_size: int, rng: SeededRng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ============================================================
# STAGE 1: DIFFUSION
# ============================================================

def train_diffusion(denoiser: Denoiser, dataset: Dataset, sched: NoiseSchedule,
                    cfg: ExperimentConfig) -> list:
    """Noise-prediction training over the train split; returns mean loss per epoch."""
    if len(dataset) == 0:
        raise ValueError("no training trajectories")
    pits, odts = dataset.pits(), dataset.odt_matrix()
    rng = SeededRng(stable_u64(f"{cfg.seed}:diffusion-train"))
    optimizer = Adam(denoiser, lr=cfg.lr)
    dtype = torch_dtype()
    history = []

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            batch = make_batch(pits[idx], odts[idx], sched, rng, dtype=dtype)
            losses.append(train_denoiser_step(denoiser, batch, sched, optimizer))
        history.append(float(np.mean(losses)))
        log.info(f"[*] diffusion epoch {epoch}/{cfg.epochs}: loss {history[-1]:.4f}")
    return history


def query_seed(run_seed: int, tag: str, index: int, sample: int = 0) -> int:
    """Per-query seed; independent of worker count and batching."""
    return stable_u64(f"{run_seed}:{tag}:{index}:{sample}")


def infer_dataset(denoiser: Denoiser, sched: NoiseSchedule, odts: np.ndarray,
                  cfg: ExperimentConfig, tag: str) -> np.ndarray:
    """Inferred PiTs for every ODT row, shaped [samples, n, L_G, L_G, 3]."""
    n = len(odts)
    L = denoiser.config.L_G
    out = np.zeros((cfg.infer_samples, n, L, L, 3))
    if n == 0:
        return out
    jobs = [(s, start) for s in range(cfg.infer_samples) for start in range(0, n, cfg.batch_size)]

    def run(job):
        s, start = job
        stop = min(start + cfg.batch_size, n)
        seeds = [query_seed(cfg.seed, tag, i, s) for i in range(start, stop)]
        pits = infer_pits(odts[start:stop], denoiser, sched, seeds, L)
        return s, start, pits

    if cfg.num_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.num_workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    for s, start, pits in results:
        out[s, start:start + len(pits)] = pits
    log.info(f"[OK] Inferred {n * cfg.infer_samples} PiT(s) for {tag}")
    return out


# ============================================================
# STAGE 2: ESTIMATOR
# ============================================================

def predict_with_samples(estimator: Estimator, pit_samples: np.ndarray) -> np.ndarray:
    """Mean prediction over a query's non-empty sampled PiTs; NaN when all are empty."""
    preds = np.stack([estimator.predict_minutes(p) for p in pit_samples])
    valid = np.isfinite(preds)
    counts = valid.sum(axis=0)
    total = np.where(valid, preds, 0.0).sum(axis=0)
    return np.where(counts > 0, total / np.maximum(counts, 1), np.nan)


def _val_mae(estimator: Estimator, pit_samples: np.ndarray, truths: np.ndarray) -> float:
    preds = predict_with_samples(estimator, pit_samples)
    ok = np.isfinite(preds)
    if not ok.any():
        return float("inf")
    return float(mean_absolute_error(truths[ok], preds[ok]))


def train_estimator(estimator: Estimator, train_pits: np.ndarray, train_times: np.ndarray,
                    val_pit_samples: np.ndarray, val_times: np.ndarray,
                    cfg: ExperimentConfig) -> dict:
    """Train with early stopping on validation MAE; restores the best weights."""
    estimator.set_normalization(train_times)
    rng = SeededRng(stable_u64(f"{cfg.seed}:estimator-train"))
    optimizer = Adam(estimator, lr=cfg.lr)
    history = {"loss": [], "val_mae": [], "best_epoch": 0}
    best_mae, best_state, stale = float("inf"), copy.deepcopy(estimator.state_dict()), 0

    for epoch in range(1, cfg.estimator_epochs + 1):
        losses = []
        for idx in _batches(len(train_pits), cfg.batch_size, rng):
            loss = train_estimator_step(estimator, train_pits[idx], train_times[idx], optimizer)
            if np.isfinite(loss):
                losses.append(loss)
        history["loss"].append(float(np.mean(losses)) if losses else float("nan"))
        mae = _val_mae(estimator, val_pit_samples, val_times) if len(val_times) else float("nan")
        history["val_mae"].append(mae)
        log.info(f"[*] estimator epoch {epoch}/{cfg.estimator_epochs}: "
                 f"loss {history['loss'][-1]:.4f}, val MAE {mae:.3f} min")

        if not np.isfinite(mae) and len(val_times):
            stale += 1
        elif not len(val_times) or mae < best_mae:
            best_mae, stale = mae, 0
            best_state = copy.deepcopy(estimator.state_dict())
            history["best_epoch"] = epoch
        else:
            stale += 1
        if stale >= cfg.patience:
            log.info(f"[OK] Early stop at epoch {epoch} (best epoch {history['best_epoch']})")
            break

    estimator.load_state_dict(best_state)
    return history
