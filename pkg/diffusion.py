"""
Conditional denoising diffusion over PiTs: the linear noise schedule,
closed-form forward corruption, the noise-prediction training step, and
ODT-conditioned reverse sampling.

Steps are 1-based throughout (n in [1, N]); schedule arrays are stored
0-based, so step n lives at index n - 1.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from geo_pit import ODTInput, PIT_CHANNELS
from nn_core import DivergenceError, SeededRng, adam_step, check_finite

BETA_START = 1e-4
BETA_END = 0.02


class ScheduleError(ValueError):
    """Bad schedule length or step index."""


# ============================================================
# SCHEDULE
# ============================================================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    N: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_step(self, n):
        steps = np.asarray(n)
        if steps.size == 0 or steps.min() < 1 or steps.max() > self.N:
            raise ScheduleError(f"step out of range [1, {self.N}]: {n}")

    def beta(self, n: int) -> float:
        self.check_step(n)
        return float(self.betas[n - 1])

    def alpha(self, n: int) -> float:
        self.check_step(n)
        return float(self.alphas[n - 1])

    def alpha_bar(self, n: int) -> float:
        self.check_step(n)
        return float(self.alpha_bars[n - 1])


def linear_schedule(N: int, beta_start: float = BETA_START, beta_end: float = BETA_END) -> NoiseSchedule:
    if N < 2:
        raise ScheduleError(f"N must be >= 2, got {N}")
    betas = np.linspace(beta_start, beta_end, N, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(N, betas, alphas, np.cumprod(alphas))


def _coef(values: np.ndarray, n, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficient broadcastable against `like` ([B, ...] or unbatched)."""
    idx = torch.as_tensor(n, dtype=torch.long) - 1
    c = torch.as_tensor(values, dtype=like.dtype)[idx]
    if c.dim() == 0:
        return c
    return c.reshape(-1, *([1] * (like.dim() - 1)))


# ============================================================
# FORWARD PROCESS
# ============================================================

def q_sample(X0: torch.Tensor, n, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noisy PiT at step n in one shot. `n` is an int or a [B] tensor of steps."""
    if X0.shape != eps.shape:
        raise ScheduleError(f"X0 {tuple(X0.shape)} and eps {tuple(eps.shape)} differ")
    sched.check_step(n.numpy() if torch.is_tensor(n) else n)
    ab = _coef(sched.alpha_bars, n, X0)
    return torch.sqrt(ab) * X0 + torch.sqrt(1.0 - ab) * eps


def forward_step(X_prev: torch.Tensor, n: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single Markov corruption step from n - 1 to n."""
    beta = sched.beta(n)
    return np.sqrt(1.0 - beta) * X_prev + np.sqrt(beta) * eps


# ============================================================
# TRAINING
# ============================================================

@dataclass
class DiffusionBatch:
    X0: torch.Tensor     # [B, L, L, 3]
    odt: torch.Tensor    # [B, 5]
    n: torch.Tensor      # [B], long
    eps: torch.Tensor    # [B, L, L, 3]

    def __post_init__(self):
        B = self.X0.shape[0]
        if not (self.odt.shape[0] == self.n.shape[0] == self.eps.shape[0] == B):
            raise ScheduleError("inconsistent batch sizes")


def sample_steps(size: int, N: int, rng: SeededRng) -> torch.Tensor:
    """Uniform step indices in [1, N]."""
    return torch.from_numpy(rng.integers(1, N, size=size)).long()


def make_batch(pits: np.ndarray, odts: np.ndarray, sched: NoiseSchedule, rng: SeededRng,
               dtype=torch.float32) -> DiffusionBatch:
    X0 = torch.as_tensor(np.asarray(pits), dtype=dtype)
    odt = torch.as_tensor(np.asarray(odts), dtype=dtype)
    n = sample_steps(X0.shape[0], sched.N, rng)
    eps = rng.normal(X0.shape, dtype=dtype)
    return DiffusionBatch(X0, odt, n, eps)


def train_denoiser_step(denoiser, batch: DiffusionBatch, sched: NoiseSchedule, optimizer) -> float:
    """One noise-prediction step; returns the batch MSE."""
    denoiser.train()
    optimizer.zero_grad(set_to_none=True)
    Xn = q_sample(batch.X0, batch.n, batch.eps, sched)
    pred = denoiser(Xn, batch.n, batch.odt)
    loss = F.mse_loss(pred, batch.eps)
    if not torch.isfinite(loss):
        raise DivergenceError("diverged")
    loss.backward()
    adam_step(optimizer)
    return float(loss.detach())


# ============================================================
# REVERSE PROCESS
# ============================================================

def _odt_tensor(odt, batch: int, dtype) -> torch.Tensor:
    if isinstance(odt, ODTInput):
        odt = odt.encoded
    elif isinstance(odt, (list, tuple)) and odt and isinstance(odt[0], ODTInput):
        odt = np.stack([o.encoded for o in odt])
    t = torch.as_tensor(np.asarray(odt) if not torch.is_tensor(odt) else odt, dtype=dtype)
    # one encoding is shared by the whole batch
    return t.reshape(1, -1).expand(batch, -1) if t.dim() == 1 else t


def _reverse_mean(Xn, n: int, eps_hat, sched: NoiseSchedule):
    alpha, beta, ab = sched.alpha(n), sched.beta(n), sched.alpha_bar(n)
    return (Xn - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)


@torch.no_grad()
def p_sample_step(Xn: torch.Tensor, n: int, odt, denoiser, sched: NoiseSchedule,
                  rng: SeededRng = None) -> torch.Tensor:
    """X_{n-1} from X_n. Accepts one PiT [L, L, 3] or a batch [B, L, L, 3]."""
    sched.check_step(n)
    batched = Xn.dim() == 4
    X = Xn if batched else Xn.unsqueeze(0)
    B = X.shape[0]
    steps = torch.full((B,), n, dtype=torch.long)
    eps_hat = denoiser(X, steps, _odt_tensor(odt, B, X.dtype))
    out = _reverse_mean(X, n, eps_hat, sched)
    if n > 1:
        if rng is None:
            raise ScheduleError("an rng is required for steps n > 1")
        out = out + np.sqrt(sched.beta(n)) * rng.normal(X.shape, dtype=X.dtype)
    check_finite(out, f"reverse step {n}")
    return out if batched else out.squeeze(0)


@torch.no_grad()
def infer_pits(odts, denoiser, sched: NoiseSchedule, seeds, L_G: int = None,
               dtype=None) -> np.ndarray:
    """Sample one PiT per query; query i draws all its noise from seeds[i].

    Each query owns its generator, so the result for a query does not
    depend on which other queries share the batch.
    """
    dtype = dtype or next(denoiser.parameters()).dtype
    rngs = [SeededRng(s) for s in seeds]
    B = len(rngs)
    odt = _odt_tensor(odts, B, dtype)
    if odt.shape != (B, 5):
        raise ScheduleError(f"expected {B} ODT encodings of width 5, got {tuple(odt.shape)}")
    L_G = L_G or denoiser.config.L_G
    shape = (L_G, L_G, PIT_CHANNELS)
    denoiser.eval()

    X = torch.stack([r.normal(shape, dtype=dtype) for r in rngs])
    for n in range(sched.N, 0, -1):
        steps = torch.full((B,), n, dtype=torch.long)
        eps_hat = denoiser(X, steps, odt)
        X = _reverse_mean(X, n, eps_hat, sched)
        if n > 1:
            z = torch.stack([r.normal(shape, dtype=dtype) for r in rngs])
            X = X + np.sqrt(sched.beta(n)) * z
        check_finite(X, f"reverse step {n}")
    return X.clamp(-1.0, 1.0).double().numpy()


def infer_pit(odt: ODTInput, denoiser, sched: NoiseSchedule, seed: int, L_G: int = None,
              dtype=None) -> np.ndarray:
    """Inferred L_G x L_G x 3 PiT for a single query."""
    return infer_pits([odt], denoiser, sched, [seed], L_G, dtype=dtype)[0]
