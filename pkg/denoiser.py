"""
ODT-conditioned Unet that predicts the noise in a PiT at diffusion step n.

Every convolution is wrapped in an OCConv block whose hidden activations
receive the condition vector PE(n) + FC_OD(odt) as a per-channel bias.
Down blocks double the channels and halve the grid (ceil), up blocks halve
the channels and resize back to the recorded mirrored size, so any L_G
works regardless of divisibility by 2^L_D.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import ConfigError, ExperimentConfig, ODT_ABLATIONS, torch_dtype
from geo_pit import ODTInput, PIT_CHANNELS
from nn_core import (Dense, MultiHeadAttention, SameConv2d, check_finite, gelu,
                     positional_encoding)

ODT_WIDTH = 5

# which ODT-Input entries reach FC_OD: (o_lng, o_lat, d_lng, d_lat, tod)
ABLATION_MASKS = {
    "none": (1.0, 1.0, 1.0, 1.0, 1.0),
    "no_t": (1.0, 1.0, 1.0, 1.0, 0.0),
    "no_od": (0.0, 0.0, 0.0, 0.0, 1.0),
    "no_odt": (0.0, 0.0, 0.0, 0.0, 0.0),
}


@dataclass
class DenoiserConfig:
    L_G: int = 20
    L_D: int = 3
    d: int = 128
    base_channels: int = 32
    heads: int = 4
    odt_ablation: str = "none"

    def validate(self):
        if self.L_D < 1:
            raise ConfigError("L_D must be >= 1")
        if self.d % 2:
            raise ConfigError(f"d must be even, got {self.d}")
        if self.base_channels < 8 or self.base_channels % self.heads:
            raise ConfigError("base_channels must be >= 8 and divisible by heads")
        if self.odt_ablation not in ODT_ABLATIONS:
            raise ConfigError(f"odt_ablation must be one of {ODT_ABLATIONS}")
        return self

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "DenoiserConfig":
        return cls(L_G=cfg.L_G, L_D=cfg.L_D, d=cfg.d, base_channels=cfg.base_channels,
                   heads=cfg.denoiser_heads, odt_ablation=cfg.odt_ablation)


# ============================================================
# CONDITIONING
# ============================================================

class ConditionEncoder(nn.Module):
    """PE(n) + FC_OD(odt)."""

    def __init__(self, d: int, odt_ablation: str = "none"):
        super().__init__()
        self.d = d
        self.fc_od = Dense(ODT_WIDTH, d)
        self.register_buffer("odt_mask", torch.tensor(ABLATION_MASKS[odt_ablation], dtype=torch_dtype()))

    def forward(self, odt: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
        pe = positional_encoding(n, self.d, dtype=odt.dtype)
        return pe + self.fc_od(odt * self.odt_mask)


def encode_condition(odt, n: int, params: ConditionEncoder) -> torch.Tensor:
    """Condition vector in R^d for one query."""
    enc = odt.encoded if isinstance(odt, ODTInput) else odt
    dtype = params.fc_od.weight.dtype
    enc = torch.as_tensor(np.asarray(enc) if not torch.is_tensor(enc) else enc, dtype=dtype)
    return params(enc.reshape(1, ODT_WIDTH), torch.tensor([n]))[0]


# ============================================================
# BLOCKS
# ============================================================

class OCConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, d: int):
        super().__init__()
        self.conv_in = SameConv2d(c_in, c_in, 3)
        self.fc_cond = Dense(d, c_in)
        self.conv_mid = SameConv2d(c_in, c_out, 3)
        self.conv_out = SameConv2d(c_out, c_out, 3)
        self.res_conv = SameConv2d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return occonv(x, cond, self)


def occonv(x: torch.Tensor, cond: torch.Tensor, params: OCConv, return_hidden: bool = False):
    """x: [B, H, W, C_in] (or unbatched), cond: [B, d] (or [d])."""
    hid = params.conv_in(x)
    bias = params.fc_cond(cond)
    # broadcast the per-channel bias over every pixel
    hid_cond = hid + bias.unsqueeze(-2).unsqueeze(-2)
    out = params.conv_out(gelu(params.conv_mid(hid_cond))) + params.res_conv(x)
    return (out, hid, hid_cond) if return_hidden else out


class SpatialAttention(nn.Module):
    """Pre-norm self-attention over the pixels of a feature map, with residual."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels, dtype=torch_dtype())
        self.attn = MultiHeadAttention(channels, heads)

    def forward(self, x):
        B, H, W, C = x.shape
        tokens = self.norm(x.reshape(B, H * W, C))
        return x + self.attn(tokens).reshape(B, H, W, C)


class DownBlock(nn.Module):
    def __init__(self, c_in: int, d: int, heads: int):
        super().__init__()
        c_out = 2 * c_in
        self.occ1 = OCConv(c_in, c_out, d)
        self.occ2 = OCConv(c_out, c_out, d)
        self.attn = SpatialAttention(c_out, heads)
        self.down = SameConv2d(c_out, c_out, 3, stride=2)

    def forward(self, x, cond):
        h = self.attn(self.occ2(self.occ1(x, cond), cond))
        return self.down(h), h


class MiddleBlock(nn.Module):
    def __init__(self, c: int, d: int, heads: int):
        super().__init__()
        self.occ1 = OCConv(c, c, d)
        self.attn = SpatialAttention(c, heads)
        self.occ2 = OCConv(c, c, d)

    def forward(self, x, cond):
        return self.occ2(self.attn(self.occ1(x, cond)), cond)


class UpBlock(nn.Module):
    """Resize to the skip's size, conv, concat skip, then 2C -> C/2."""

    def __init__(self, c_in: int, d: int, heads: int):
        super().__init__()
        c_out = c_in // 2
        self.up = SameConv2d(c_in, c_in, 3)
        self.occ1 = OCConv(2 * c_in, c_out, d)
        self.occ2 = OCConv(c_out, c_out, d)
        self.attn = SpatialAttention(c_out, heads)

    def forward(self, x, skip, cond):
        size = tuple(skip.shape[1:3])
        x = F.interpolate(x.permute(0, 3, 1, 2), size=size, mode="nearest").permute(0, 2, 3, 1)
        h = torch.cat([self.up(x), skip], dim=-1)
        return self.attn(self.occ2(self.occ1(h, cond), cond))


# ============================================================
# DENOISER
# ============================================================

class Denoiser(nn.Module):
    """epsilon_theta(X_n, n, odt) over batches of channels-last PiTs."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config.validate()
        C, d, heads = config.base_channels, config.d, config.heads
        self.condition = ConditionEncoder(d, config.odt_ablation)
        self.stem = SameConv2d(PIT_CHANNELS, C, 3)
        self.downs = nn.ModuleList()
        c = C
        for _ in range(config.L_D):
            self.downs.append(DownBlock(c, d, heads))
            c *= 2
        self.middle = MiddleBlock(c, d, heads)
        self.ups = nn.ModuleList()
        for _ in range(config.L_D):
            self.ups.append(UpBlock(c, d, heads))
            c //= 2
        self.head = SameConv2d(C, PIT_CHANNELS, 3)

    def forward(self, Xn: torch.Tensor, n: torch.Tensor, odt: torch.Tensor) -> torch.Tensor:
        # one condition vector per sample, shared by every OCConv
        cond = self.condition(odt, n)
        h = self.stem(Xn)
        skips = []
        for block in self.downs:
            h, skip = block(h, cond)
            skips.append(skip)
        h = self.middle(h, cond)
        for block, skip in zip(self.ups, reversed(skips)):
            h = block(h, skip, cond)
        out = self.head(h)
        check_finite(out, "denoiser", "non-finite activations")
        return out


def denoise(Xn: torch.Tensor, n: int, odt, params: Denoiser) -> torch.Tensor:
    """Predicted noise for a single PiT [L_G, L_G, 3]."""
    enc = odt.encoded if isinstance(odt, ODTInput) else odt
    dtype = Xn.dtype
    enc = torch.as_tensor(np.asarray(enc) if not torch.is_tensor(enc) else enc, dtype=dtype)
    return params(Xn.unsqueeze(0), torch.tensor([n]), enc.reshape(1, ODT_WIDTH))[0]
