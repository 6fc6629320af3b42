"""
Stage two: travel-time regression from a (ground-truth or inferred) PiT.

A PiT is flattened to L_G^2 cell items; only valid items (mask >= 0) are
embedded and fed through the Masked Vision Transformer, so compute scales
with the number of visited cells rather than the grid size. The dense ViT
path processes every item with invalid keys masked out and exists as an
ablation, an equivalence oracle and a benchmark comparator.
"""

import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import ConfigError, ESTIMATOR_VARIANTS, ExperimentConfig, get_logger, torch_dtype
from geo_pit import MASK, OFFSET, PIT_CHANNELS, TOD, empty_pit
from nn_core import (Dense, FlopCounter, MultiHeadAttention, SeededRng, adam_step,
                     check_finite, embedding_table, gelu, positional_encoding)

log = get_logger(__name__)

FFN_EXPANSION = 4


class EmptyPiTError(ValueError):
    """A PiT without a single valid cell."""


@dataclass
class MViTConfig:
    L_G: int = 20
    d_E: int = 128
    L_E: int = 2
    heads: int = 4
    variant: str = "mvit"
    use_cell_embedding: bool = True
    use_st_embedding: bool = True
    use_positional_encoding: bool = True

    def validate(self):
        if self.d_E % 2 or self.d_E % self.heads:
            raise ConfigError("d_E must be even and divisible by heads")
        if self.L_E < 1 or self.L_G < 2:
            raise ConfigError("L_E >= 1 and L_G >= 2 required")
        if self.variant not in ESTIMATOR_VARIANTS:
            raise ConfigError(f"variant must be one of {ESTIMATOR_VARIANTS}")
        return self

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "MViTConfig":
        return cls(L_G=cfg.L_G, d_E=cfg.d_E, L_E=cfg.L_E, heads=cfg.heads,
                   variant=cfg.estimator_variant,
                   use_cell_embedding=cfg.use_cell_embedding,
                   use_st_embedding=cfg.use_st_embedding,
                   use_positional_encoding=cfg.use_positional_encoding)


# ============================================================
# FLATTENING
# ============================================================

@dataclass(eq=False)
class FlatPiT:
    items: np.ndarray   # [L_G^2, 3], row p-1 holds flattened position p
    mask: np.ndarray    # [L_G^2] bool

    @property
    def positions(self) -> np.ndarray:
        """1-based flattened positions of the valid items."""
        return np.flatnonzero(self.mask) + 1

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def flatten_pit(X) -> FlatPiT:
    X = np.asarray(X, dtype=np.float64)
    L = X.shape[0]
    # data is stored [x-1, y-1]; position p = x + (y-1) L is y-major
    items = X.transpose(1, 0, 2).reshape(L * L, X.shape[-1])
    return FlatPiT(items, items[:, MASK] >= 0)


# ============================================================
# MODEL
# ============================================================

class MViTLayer(nn.Module):
    """Pre-norm attention and feed-forward sub-layers, both residual."""

    def __init__(self, d_E: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_E, dtype=torch_dtype())
        self.attn = MultiHeadAttention(d_E, heads)
        self.norm2 = nn.LayerNorm(d_E, dtype=torch_dtype())
        self.ffn_in = Dense(d_E, FFN_EXPANSION * d_E)
        self.ffn_out = Dense(FFN_EXPANSION * d_E, d_E)

    def forward(self, h, key_mask=None):
        h = h + self.attn(self.norm1(h), key_mask=key_mask)
        return h + self.ffn_out(gelu(self.ffn_in(self.norm2(h))))


class Estimator(nn.Module):
    def __init__(self, config: MViTConfig):
        super().__init__()
        self.config = config.validate()
        L2, d_E = config.L_G * config.L_G, config.d_E
        self.cell_embedding = embedding_table(L2, d_E)
        self.fc_st = Dense(PIT_CHANNELS, d_E)
        self.layers = nn.ModuleList([MViTLayer(d_E, config.heads) for _ in range(config.L_E)])
        self.final_norm = nn.LayerNorm(d_E, dtype=torch_dtype())
        self.fc_pre = Dense(d_E, 1)
        self.register_buffer("t_mean", torch.zeros((), dtype=torch_dtype()))
        self.register_buffer("t_std", torch.ones((), dtype=torch_dtype()))

    @property
    def dtype(self):
        return self.fc_st.weight.dtype

    # ── Target normalization ──

    def set_normalization(self, travel_times):
        t = np.asarray(travel_times, dtype=np.float64)
        std = float(t.std())
        self.t_mean.fill_(float(t.mean()))
        self.t_std.fill_(std if std > 0 else 1.0)

    def normalize(self, minutes):
        return (minutes - self.t_mean) / self.t_std

    def denormalize(self, value):
        return self.t_mean + self.t_std * value

    # ── Embedding ──

    def embed(self, items: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """items [..., P, 3] at 1-based positions [..., P] -> [..., P, d_E]."""
        cfg = self.config
        out = torch.zeros(*items.shape[:-1], cfg.d_E, dtype=self.dtype)
        if cfg.use_cell_embedding:
            out = out + self.cell_embedding[positions - 1]
        if cfg.use_positional_encoding:
            pe = positional_encoding(positions.reshape(-1), cfg.d_E, dtype=self.dtype)
            out = out + pe.reshape(*positions.shape, cfg.d_E)
        if cfg.use_st_embedding:
            out = out + self.fc_st(items)
        return out

    # ── Heads ──

    def encode(self, latent: torch.Tensor, key_mask: torch.Tensor = None) -> torch.Tensor:
        """Transformer layers, final norm and masked mean pooling -> [..., d_E]."""
        h = latent
        for layer in self.layers:
            h = layer(h, key_mask=key_mask)
        h = self.final_norm(h)
        if key_mask is None:
            return h.mean(dim=-2)
        w = key_mask.to(h.dtype).unsqueeze(-1)
        return (h * w).sum(dim=-2) / w.sum(dim=-2)

    def head(self, pooled: torch.Tensor) -> torch.Tensor:
        """Normalized prediction."""
        return self.fc_pre(pooled).squeeze(-1)

    # ── Batched forward ──

    def _masked_batch(self, pits: torch.Tensor):
        """Gather valid items, padded to the largest valid count in the batch."""
        B, L = pits.shape[0], pits.shape[1]
        items = pits.transpose(1, 2).reshape(B, L * L, PIT_CHANNELS)
        valid = items[..., MASK] >= 0
        counts = valid.sum(dim=1)
        if (counts == 0).any():
            raise EmptyPiTError("empty PiT")
        V = int(counts.max())
        # stable sort keeps valid items in position order ahead of the invalid ones
        order = torch.argsort((~valid).int(), dim=1, stable=True)[:, :V]
        gathered = torch.gather(items, 1, order.unsqueeze(-1).expand(B, V, PIT_CHANNELS))
        positions = order + 1
        key_mask = torch.arange(V).unsqueeze(0) < counts.unsqueeze(1)
        return gathered, positions, key_mask

    def forward(self, pits: torch.Tensor) -> torch.Tensor:
        """Normalized predictions [B] for a batch of PiTs [B, L_G, L_G, 3]."""
        if self.config.variant == "vit":
            return self.forward_dense(pits)
        items, positions, key_mask = self._masked_batch(pits)
        latent = self.embed(items, positions)
        out = self.head(self.encode(latent, key_mask if not key_mask.all() else None))
        check_finite(out, "estimator")
        return out

    def forward_dense(self, pits: torch.Tensor) -> torch.Tensor:
        B, L = pits.shape[0], pits.shape[1]
        items = pits.transpose(1, 2).reshape(B, L * L, PIT_CHANNELS)
        valid = items[..., MASK] >= 0
        if (valid.sum(dim=1) == 0).any():
            raise EmptyPiTError("empty PiT")
        positions = torch.arange(1, L * L + 1).expand(B, L * L)
        out = self.head(self.encode(self.embed(items, positions), valid))
        check_finite(out, "estimator")
        return out

    @torch.no_grad()
    def predict_minutes(self, pits) -> np.ndarray:
        """Minutes per PiT; NaN where the PiT has no valid cell."""
        pits = torch.as_tensor(np.asarray(pits), dtype=self.dtype)
        out = np.full(pits.shape[0], np.nan)
        if pits.shape[0] == 0:
            return out
        self.eval()
        nonempty = (pits[..., MASK] >= 0).flatten(1).any(dim=1)
        idx = torch.nonzero(nonempty).flatten()
        if idx.numel():
            out[idx.numpy()] = self.denormalize(self(pits[idx])).double().numpy()
        return out


# ============================================================
# SINGLE-PiT OPERATIONS
# ============================================================

def embed_cells(flat: FlatPiT, params: Estimator) -> torch.Tensor:
    """Latent sequence [V, d_E] over the valid items only."""
    if flat.n_valid == 0:
        raise EmptyPiTError("empty PiT")
    items = torch.as_tensor(flat.items[flat.mask], dtype=params.dtype)
    positions = torch.as_tensor(flat.positions, dtype=torch.long)
    return params.embed(items, positions)


def mvit_forward(latent: torch.Tensor, params: Estimator) -> torch.Tensor:
    """Travel time in minutes from a valid-item latent sequence [V, d_E]."""
    if latent.dim() != 2 or latent.shape[0] < 1:
        raise EmptyPiTError("empty PiT")
    out = params.denormalize(params.head(params.encode(latent)))
    return check_finite(out, "estimator")


def dense_vit_forward(flat: FlatPiT, params: Estimator) -> torch.Tensor:
    """Vanilla ViT over all items; invalid keys get -inf logits, pooling over valid rows."""
    if flat.n_valid == 0:
        raise EmptyPiTError("empty PiT")
    items = torch.as_tensor(flat.items, dtype=params.dtype)
    positions = torch.arange(1, items.shape[0] + 1)
    key_mask = torch.as_tensor(flat.mask)
    out = params.denormalize(params.head(params.encode(params.embed(items, positions), key_mask)))
    return check_finite(out, "estimator")


def estimate(pit, params: Estimator) -> float:
    """Minutes for one PiT through the configured variant."""
    flat = flatten_pit(pit)
    if params.config.variant == "vit":
        return float(dense_vit_forward(flat, params))
    return float(mvit_forward(embed_cells(flat, params), params))


# ============================================================
# TRAINING
# ============================================================

def train_estimator_step(params: Estimator, pits, travel_times, optimizer) -> float:
    """One MSE step on standardized targets. Empty PiTs are skipped; returns NaN if none remain."""
    pits = torch.as_tensor(np.asarray(pits), dtype=params.dtype)
    targets = torch.as_tensor(np.asarray(travel_times, dtype=np.float64), dtype=params.dtype)
    nonempty = (pits[..., MASK] >= 0).flatten(1).any(dim=1)
    skipped = int((~nonempty).sum())
    if skipped:
        log.warning(f"[WARNING] Skipping {skipped} empty PiT(s) in estimator batch")
    if not nonempty.any():
        return float("nan")

    params.train()
    optimizer.zero_grad(set_to_none=True)
    pred = params(pits[nonempty])
    loss = F.mse_loss(pred, params.normalize(targets[nonempty]))
    check_finite(loss, "estimator loss", "diverged")
    loss.backward()
    adam_step(optimizer)
    return float(loss.detach())


# ============================================================
# EFFICIENCY BENCHMARK
# ============================================================

def random_pit(L_G: int, n_valid: int, rng: SeededRng) -> np.ndarray:
    """PiT with `n_valid` random visited cells and uniform ToD / offset values."""
    pit = empty_pit(L_G)
    cells = rng.permutation(L_G * L_G)[:n_valid]
    xs, ys = cells // L_G, cells % L_G
    pit[xs, ys, MASK] = 1.0
    pit[xs, ys, TOD] = rng.uniform((n_valid,), -1.0, 1.0).double().numpy()
    pit[xs, ys, OFFSET] = rng.uniform((n_valid,), -1.0, 1.0).double().numpy()
    return pit


@torch.no_grad()
def benchmark_attention(grid_sizes, valid_cells: int, runs: int, d_E: int = 128,
                        L_E: int = 2, heads: int = 4, seed: int = 0) -> list:
    """MViT vs dense ViT cost at a fixed valid-cell count for each grid size.

    FLOP counts are deterministic; wall times are averaged over `runs`.
    """
    rows = []
    for L_G in grid_sizes:
        rng = SeededRng(seed).spawn(f"bench:{L_G}")
        torch.manual_seed(rng.seed % (2 ** 63))
        model = Estimator(MViTConfig(L_G=L_G, d_E=d_E, L_E=L_E, heads=heads)).eval()
        flat = flatten_pit(random_pit(L_G, min(valid_cells, L_G * L_G), rng))

        with FlopCounter() as mvit_flops:
            mvit_forward(embed_cells(flat, model), model)
        with FlopCounter() as vit_flops:
            dense_vit_forward(flat, model)

        t0 = time.perf_counter()
        for _ in range(runs):
            mvit_forward(embed_cells(flat, model), model)
        mvit_ms = (time.perf_counter() - t0) * 1000.0 / runs
        t0 = time.perf_counter()
        for _ in range(runs):
            dense_vit_forward(flat, model)
        vit_ms = (time.perf_counter() - t0) * 1000.0 / runs

        rows.append({
            "L_G": L_G,
            "valid_cells": flat.n_valid,
            "mvit_attention_flops": mvit_flops.attention,
            "vit_attention_flops": vit_flops.attention,
            "mvit_total_flops": mvit_flops.total,
            "vit_total_flops": vit_flops.total,
            "attention_flop_ratio": vit_flops.attention / max(mvit_flops.attention, 1),
            "mvit_ms": mvit_ms,
            "vit_ms": vit_ms,
        })
        log.info(f"[OK] bench L_G={L_G}: attention FLOPs MViT={mvit_flops.attention:,} "
                 f"ViT={vit_flops.attention:,} ({mvit_ms:.2f} ms vs {vit_ms:.2f} ms)")
    return rows
