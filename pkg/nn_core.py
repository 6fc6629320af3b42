"""
Numeric kernel shared by both stages: channels-last layer primitives on top
of torch, a bias-corrected Adam, counter-based seeded randomness, and FLOP
counters for the attention benchmark.

Layouts follow the rest of the project: images are ``[..., H, W, C]``,
convolution kernels ``[k, k, C_in, C_out]``, linear weights ``[n, m]``.
"""

import hashlib
import math
import threading

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config import torch_dtype

PE_BASE = 10000.0
EMBED_INIT_STD = 0.02


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class DivergenceError(RuntimeError):
    """A non-finite value showed up where a finite one is required."""


class MissingGradientError(RuntimeError):
    """Optimizer step requested before every parameter received a gradient."""


def check_finite(x: torch.Tensor, what: str, message: str = "non-finite values"):
    if not torch.isfinite(x).all():
        raise DivergenceError(f"{what}: {message}")
    return x


# ============================================================
# RANDOMNESS
# ============================================================

def stable_u64(text: str) -> int:
    """Stable 64-bit hash, used to derive per-query seeds."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, byteorder="little", signed=False)


class SeededRng:
    """Counter-based (Philox) generator; same seed and call order, same draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, dtype=None) -> torch.Tensor:
        values = self._gen.standard_normal(size=tuple(shape))
        return torch.from_numpy(values).to(dtype or torch_dtype())

    def uniform(self, shape, low=0.0, high=1.0, dtype=None) -> torch.Tensor:
        values = self._gen.uniform(low, high, size=tuple(shape))
        return torch.from_numpy(values).to(dtype or torch_dtype())

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key) -> "SeededRng":
        return SeededRng(stable_u64(f"{self.seed}:{key}"))


def set_determinism(seed: int):
    torch.manual_seed(seed % (2 ** 63))
    torch.use_deterministic_algorithms(True)


# ============================================================
# FLOP COUNTING
# ============================================================

_flop_state = threading.local()


class FlopCounter:
    """Counts multiply-adds of attention and dense layers inside a `with` block."""

    def __init__(self):
        self.attention = 0
        self.dense = 0

    @property
    def total(self) -> int:
        return self.attention + self.dense

    def __enter__(self):
        stack = getattr(_flop_state, "stack", None)
        if stack is None:
            stack = _flop_state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _flop_state.stack.pop()
        return False


def _count(kind: str, n: int):
    for counter in getattr(_flop_state, "stack", None) or ():
        setattr(counter, kind, getattr(counter, kind) + int(n))


# ============================================================
# INITIALIZATION
# ============================================================

def glorot_uniform_(tensor: torch.Tensor, fan_in: int, fan_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


# ============================================================
# FUNCTIONAL OPS
# ============================================================

def conv2d_same(inputs: torch.Tensor, kernels: torch.Tensor, bias: torch.Tensor,
                stride: int = 1) -> torch.Tensor:
    """Zero-padded cross-correlation on channels-last images.

    With stride 1 the spatial size is preserved; with stride 2 it becomes
    ceil(H / 2) x ceil(W / 2).
    """
    if kernels.dim() != 4 or kernels.shape[0] != kernels.shape[1] or kernels.shape[0] % 2 == 0:
        raise ShapeError(f"kernels must be [k, k, C_in, C_out] with odd k, got {tuple(kernels.shape)}")
    k, _, c_in, c_out = kernels.shape
    if inputs.dim() not in (3, 4) or inputs.shape[-1] != c_in:
        raise ShapeError(f"input {tuple(inputs.shape)} does not match kernel C_in={c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {tuple(bias.shape)}")
    batched = inputs.dim() == 4
    x = inputs if batched else inputs.unsqueeze(0)
    x = x.permute(0, 3, 1, 2)
    w = kernels.permute(3, 2, 0, 1)
    out = F.conv2d(x, w, bias, stride=stride, padding=k // 2).permute(0, 2, 3, 1)
    return out if batched else out.squeeze(0)


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """xW + b over the last axis."""
    if W.dim() != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {tuple(x.shape)}, W {tuple(W.shape)}, b {tuple(b.shape)}")
    _count("dense", x.numel() // W.shape[0] * W.shape[0] * W.shape[1])
    return x @ W + b


def gelu(x: torch.Tensor) -> torch.Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    return F.gelu(x, approximate="none")


def positional_encoding(n, d: int, dtype=None) -> torch.Tensor:
    """Sinusoidal encoding of step or position `n`; cos at odd, sin at even 1-based slots.

    `n` may be a scalar (returns [d]) or a 1-D tensor (returns [len(n), d]).
    """
    if d % 2:
        raise ShapeError(f"positional encoding width must be even, got {d}")
    dtype = dtype or torch_dtype()
    ns = torch.as_tensor(n, dtype=torch.float64)
    scalar = ns.dim() == 0
    ns = ns.reshape(-1, 1)
    i = torch.arange(1, d // 2 + 1, dtype=torch.float64)
    angles = ns / PE_BASE ** (2 * i / d)
    pe = torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1).reshape(ns.shape[0], d)
    pe = pe.to(dtype)
    return pe[0] if scalar else pe


def multi_head_attention(items: torch.Tensor, params: "MultiHeadAttention", heads: int,
                         key_mask: torch.Tensor = None, return_weights: bool = False):
    """Scaled dot-product self-attention over the item axis.

    items: [..., L, d]. key_mask: optional bool [..., L], True for keys that
    may be attended to. Every query row must see at least one key.
    """
    d = items.shape[-1]
    if heads < 1 or d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    L = items.shape[-2]
    if L < 1:
        raise ShapeError("attention needs at least one item")
    dh = d // heads
    lead = items.shape[:-2]

    def split_heads(t):
        return t.reshape(*lead, L, heads, dh).transpose(-3, -2)

    q = split_heads(params.query(items))
    k = split_heads(params.key(items))
    v = split_heads(params.value(items))
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    batch = int(np.prod(lead)) if lead else 1
    _count("attention", 2 * batch * heads * L * L * dh)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2).unsqueeze(-2), float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).transpose(-3, -2).reshape(*lead, L, d)
    out = params.out(out)
    return (out, weights) if return_weights else out


# ============================================================
# LAYERS
# ============================================================

class Dense(nn.Module):
    """Fully-connected layer with weight [n, m]."""

    def __init__(self, n: int, m: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n, m, dtype=torch_dtype()))
        self.bias = nn.Parameter(torch.zeros(m, dtype=torch_dtype()))
        glorot_uniform_(self.weight, n, m)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class SameConv2d(nn.Module):
    """Channels-last convolution with same padding."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(k, k, c_in, c_out, dtype=torch_dtype()))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=torch_dtype()))
        glorot_uniform_(self.weight, k * k * c_in, k * k * c_out)

    def forward(self, x):
        return conv2d_same(x, self.weight, self.bias, stride=self.stride)


class MultiHeadAttention(nn.Module):
    """Parameter holder for `multi_head_attention`."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ShapeError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Dense(d, d)
        self.key = Dense(d, d)
        self.value = Dense(d, d)
        self.out = Dense(d, d)

    def forward(self, items, key_mask=None):
        return multi_head_attention(items, self, self.heads, key_mask=key_mask)


def embedding_table(rows: int, width: int) -> nn.Parameter:
    table = torch.empty(rows, width, dtype=torch_dtype())
    with torch.no_grad():
        table.normal_(0.0, EMBED_INIT_STD)
    return nn.Parameter(table)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ============================================================
# OPTIMIZER
# ============================================================

class Adam(torch.optim.Optimizer):
    """Bias-corrected Adam. Refuses to step while any parameter lacks a gradient."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if isinstance(params, nn.Module):
            named = [(n, p) for n, p in params.named_parameters() if p.requires_grad]
            self._names = {id(p): n for n, p in named}
            params = [p for _, p in named]
        else:
            params = list(params)
            self._names = {id(p): f"param[{i}]" for i, p in enumerate(params)}
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    raise MissingGradientError(f"missing gradient for {self._names.get(id(p), 'parameter')}")

        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps = group["lr"], group["eps"]
            for p in group["params"]:
                grad = p.grad
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)

                state["step"] += 1
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                bias_correction1 = 1 - beta1 ** state["step"]
                bias_correction2 = 1 - beta2 ** state["step"]

                exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)

                denom = (exp_avg_sq.sqrt() / math.sqrt(bias_correction2)).add_(eps)
                p.addcdiv_(exp_avg, denom, value=-lr / bias_correction1)
        return loss


def adam_step(optimizer: Adam, lr: float = None):
    """One in-place update; `lr` overrides the learning rate of every group."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
