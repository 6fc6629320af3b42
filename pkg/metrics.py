"""
Evaluation metrics: travel-time regression errors, PiT reconstruction
errors and route (mask-channel) precision / recall / F1.
"""

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.metrics import (confusion_matrix, mean_absolute_error,
                             mean_absolute_percentage_error, mean_squared_error,
                             precision_recall_fscore_support)

from config import get_logger
from geo_pit import MASK

log = get_logger(__name__)

CHANNEL_NAMES = ("mask", "tod", "offset")


class MetricError(ValueError):
    """Inputs cannot be scored."""


# ============================================================
# REGRESSION
# ============================================================

@dataclass
class RegressionReport:
    rmse: float
    mae: float
    mape: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def regression_metrics(preds, truths) -> RegressionReport:
    """RMSE / MAE in minutes, MAPE in percent."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if t.size == 0:
        raise MetricError("nothing to score")
    if np.any(t <= 0):
        raise MetricError("truth values must be positive")
    if not np.all(np.isfinite(p)):
        raise MetricError("non-finite predictions")

    rmse = float(np.sqrt(mean_squared_error(t, p)))
    mae = float(mean_absolute_error(t, p))
    mape = float(mean_absolute_percentage_error(t, p)) * 100.0
    # power-mean inequality, up to rounding
    assert rmse >= mae - 1e-9 * max(1.0, mae)
    return RegressionReport(rmse=rmse, mae=mae, mape=mape, n=int(t.size))


# ============================================================
# PiT RECONSTRUCTION
# ============================================================

@dataclass
class PiTReport:
    channels: dict   # name -> {"rmse": .., "mae": ..}
    rmse: float
    mae: float
    n: int
    valid_only: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _as_stack(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def pit_metrics(inferred, truth, valid_only: bool = False) -> PiTReport:
    """Errors pooled over every entry of every PiT in the set.

    Accepts one PiT [L, L, C] or a stack [n, L, L, C]. With `valid_only`
    only cells visited in the ground truth (mask >= 0) are scored.
    """
    a, b = _as_stack(inferred), _as_stack(truth)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    C = a.shape[-1]
    names = CHANNEL_NAMES if C == len(CHANNEL_NAMES) else tuple(f"ch{i}" for i in range(C))

    if valid_only:
        cells = b[..., MASK] >= 0
        a, b = a[cells], b[cells]
    else:
        a, b = a.reshape(-1, C), b.reshape(-1, C)
    if a.shape[0] == 0:
        raise MetricError("no cells to score")

    channels = {}
    for i, name in enumerate(names):
        channels[name] = {
            "rmse": float(np.sqrt(mean_squared_error(b[:, i], a[:, i]))),
            "mae": float(mean_absolute_error(b[:, i], a[:, i])),
        }
    flat_a, flat_b = a.ravel(), b.ravel()
    return PiTReport(
        channels=channels,
        rmse=float(np.sqrt(mean_squared_error(flat_b, flat_a))),
        mae=float(mean_absolute_error(flat_b, flat_a)),
        n=int(_as_stack(truth).shape[0]),
        valid_only=valid_only,
    )


# ============================================================
# ROUTES
# ============================================================

@dataclass
class RouteReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    n: int
    skipped: int

    def to_dict(self) -> dict:
        return asdict(self)


def route_metrics(inferred, truth) -> RouteReport:
    """Micro-averaged precision / recall / F1 (percent) of binarized mask channels."""
    a, b = _as_stack(inferred), _as_stack(truth)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    pred = a[..., MASK].reshape(a.shape[0], -1) >= 0
    true = b[..., MASK].reshape(b.shape[0], -1) >= 0

    keep = true.any(axis=1)
    skipped = int((~keep).sum())
    if skipped:
        log.warning(f"[WARNING] route metrics: skipped {skipped} truth PiT(s) without visited cells")
    if not keep.any():
        raise MetricError("no truth PiT has a visited cell")

    y_pred, y_true = pred[keep].ravel(), true[keep].ravel()
    _, fp, fn, tp = confusion_matrix(y_true, y_pred, labels=[False, True]).ravel()
    precision, recall, f1, _ = precision_recall_fscore_support(
        y_true, y_pred, average="binary", pos_label=True, zero_division=0)
    return RouteReport(
        precision=float(precision) * 100.0,
        recall=float(recall) * 100.0,
        f1=float(f1) * 100.0,
        tp=int(tp), fp=int(fp), fn=int(fn),
        n=int(keep.sum()),
        skipped=skipped,
    )
