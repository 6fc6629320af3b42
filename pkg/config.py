"""
Shared configuration: experiment hyper-parameters, environment defaults,
JSON/CLI layering, and the logger factory used by every module.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# ── Environment defaults ──

DEFAULT_SEED = int(os.getenv("DOT_SEED", "42"))
DEFAULT_OUT_DIR = os.getenv("DOT_OUT_DIR", "runs")
NUM_WORKERS = max(int(os.getenv("DOT_NUM_WORKERS", "1")), 1)
LOG_LEVEL = os.getenv("DOT_LOG_LEVEL", "INFO").upper()
DTYPE_NAME = os.getenv("DOT_DTYPE", "float32")

SECONDS_PER_DAY = 86400

ODT_ABLATIONS = ("none", "no_t", "no_od", "no_odt")
ESTIMATOR_VARIANTS = ("mvit", "vit")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def get_logger(name: str) -> logging.Logger:
    """Logger with the project-wide stream format; handlers attached once."""
    log = logging.getLogger(name)
    if not log.handlers:
        log.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))
        h = logging.StreamHandler()
        h.setFormatter(logging.Formatter("[%(asctime)s] %(levelname)s %(name)s: %(message)s"))
        log.addHandler(h)
        log.propagate = False
    return log


def torch_dtype():
    """Default tensor dtype; float64 only for gradient checks and oracles."""
    import torch
    return torch.float64 if DTYPE_NAME == "float64" else torch.float32


# ============================================================
# CONFIG SECTIONS
# ============================================================

@dataclass
class SynthConfig:
    """Synthetic Manhattan-grid city used in place of proprietary taxi data."""
    road_grid_n: int = 12
    n_trajectories: int = 5000
    speed_base: float = 8.0            # m/s
    congestion_amplitude: float = 0.45
    gps_interval_s: float = 30.0
    gps_noise_m: float = 10.0
    outlier_rate: float = 0.15
    seed: int = DEFAULT_SEED
    block_m: float = 400.0
    origin_lng: float = 104.04
    origin_lat: float = 30.65
    start_epoch: int = 1672617600      # 2023-01-02 00:00 UTC
    day_span: int = 28
    min_od_blocks: int = 7

    def validate(self):
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ConfigError(f"outlier_rate must be in [0, 1], got {self.outlier_rate}")
        if self.gps_interval_s <= 0 or self.gps_interval_s > 80:
            raise ConfigError(f"gps_interval_s must be in (0, 80], got {self.gps_interval_s}")
        if self.road_grid_n < 3:
            raise ConfigError("road_grid_n must be >= 3")
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be >= 1")
        if self.speed_base <= 0:
            raise ConfigError("speed_base must be positive")
        if not 0.0 <= self.congestion_amplitude < 1.0:
            raise ConfigError("congestion_amplitude must be in [0, 1)")
        if not 1 <= self.min_od_blocks <= (self.road_grid_n - 1) * 3 // 2:
            raise ConfigError("min_od_blocks too large for road_grid_n")


@dataclass
class TempConfig:
    """Neighbour thresholds of the TEMP baseline."""
    radius_m: float = 500.0
    window_min: float = 30.0
    min_neighbors: int = 5
    max_expansions: int = 4

    def validate(self):
        if self.radius_m <= 0 or self.window_min <= 0:
            raise ConfigError("TEMP radius and window must be positive")
        if self.min_neighbors < 1 or self.max_expansions < 0:
            raise ConfigError("TEMP min_neighbors >= 1 and max_expansions >= 0 required")


@dataclass
class ExperimentConfig:
    """All knobs of one run. Defaults are the optimal values reported for DOT."""
    # grid / diffusion
    L_G: int = 20
    N: int = 1000
    # denoiser
    L_D: int = 3
    d: int = 128
    base_channels: int = 32
    denoiser_heads: int = 4
    # estimator
    d_E: int = 128
    L_E: int = 2
    heads: int = 4
    estimator_variant: str = "mvit"
    use_cell_embedding: bool = True
    use_st_embedding: bool = True
    use_positional_encoding: bool = True
    # training
    epochs: int = 50
    estimator_epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    patience: int = 5
    seed: int = DEFAULT_SEED
    train_fraction: float = 1.0
    estimator_on_inferred: bool = False
    odt_ablation: str = "none"
    infer_samples: int = 1
    num_workers: int = NUM_WORKERS
    # data
    data_path: str = ""
    out_dir: str = DEFAULT_OUT_DIR
    synth: SynthConfig = field(default_factory=SynthConfig)
    temp: TempConfig = field(default_factory=TempConfig)
    # benchmark
    bench_grid_sizes: tuple = (10, 20, 30)
    bench_valid_cells: int = 20
    bench_runs: int = 100

    def validate(self):
        if self.L_G < 2:
            raise ConfigError(f"L_G must be >= 2, got {self.L_G}")
        if self.N < 2:
            raise ConfigError(f"N must be >= 2, got {self.N}")
        if self.L_D < 1:
            raise ConfigError("L_D must be >= 1")
        if self.d % 2 or self.d_E % 2:
            raise ConfigError("d and d_E must be even")
        if self.base_channels < 8:
            raise ConfigError("base_channels must be >= 8")
        if self.base_channels % self.denoiser_heads:
            raise ConfigError("base_channels must be divisible by denoiser_heads")
        if self.d_E % self.heads:
            raise ConfigError("d_E must be divisible by heads")
        if self.L_E < 1:
            raise ConfigError("L_E must be >= 1")
        if self.epochs < 1 or self.estimator_epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.odt_ablation not in ODT_ABLATIONS:
            raise ConfigError(f"odt_ablation must be one of {ODT_ABLATIONS}")
        if self.estimator_variant not in ESTIMATOR_VARIANTS:
            raise ConfigError(f"estimator_variant must be one of {ESTIMATOR_VARIANTS}")
        if self.infer_samples < 1:
            raise ConfigError("infer_samples must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.synth.validate()
        self.temp.validate()
        return self

    # ── Serialization ──

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bench_grid_sizes"] = list(self.bench_grid_sizes)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        synth = _section(SynthConfig, data.pop("synth", {}), "synth")
        temp = _section(TempConfig, data.pop("temp", {}), "temp")
        if "bench_grid_sizes" in data:
            data["bench_grid_sizes"] = tuple(data["bench_grid_sizes"])
        return cls(synth=synth, temp=temp, **data)

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        return cls.from_dict(data)

    def override(self, **kwargs) -> "ExperimentConfig":
        """Apply non-None overrides (CLI flags) in place and return self."""
        for key, value in kwargs.items():
            if value is None:
                continue
            if not hasattr(self, key):
                raise ConfigError(f"unknown config key: {key}")
            setattr(self, key, value)
        return self


def _section(cls, data, name):
    if isinstance(data, cls):
        return data
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {name} key(s): {', '.join(sorted(unknown))}")
    return cls(**data)
