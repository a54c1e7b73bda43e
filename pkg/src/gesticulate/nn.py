"""Neural-net building blocks over the autodiff Tensor: linear, conv,
layer norm, attention, transformer block, AdamW, and LR schedules.

All parameter tensors are float64 and are created from an explicit
np.random.Generator so training runs are reproducible end to end.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Base class: recursive, deterministic parameter discovery by name."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{full}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={missing}, extra={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None):
        std = scale if scale is not None else 1.0 / math.sqrt(in_dim)
        self.weight = parameter(rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(count, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered * ad.power(var + self.eps, -0.5)
        return normed * self.gain + self.shift


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gaussian error linear unit."""
    cubed = x * x * x
    inner = (x + cubed * 0.044715) * math.sqrt(2.0 / math.pi)
    return x * (ad.tanh(inner) + 1.0) * 0.5


class Conv1d(Module):
    """1-D convolution over (B, T, C) via unfold + matmul.

    Padding keeps T_out = T / stride for the supported shapes: downsampling
    uses kernel = 2*stride with stride/2 padding; stride-1 uses an odd kernel
    with symmetric padding.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        if stride > 1:
            if kernel != 2 * stride or stride % 2 != 0:
                raise ValueError("downsampling conv needs kernel = 2*stride, even stride")
            self.pad = stride // 2
        else:
            if kernel % 2 != 1:
                raise ValueError("stride-1 conv needs an odd kernel")
            self.pad = (kernel - 1) // 2
        self.kernel = kernel
        self.stride = stride
        self.in_ch = in_ch
        self.weight = parameter(
            rng.normal(0.0, 1.0 / math.sqrt(kernel * in_ch), size=(kernel * in_ch, out_ch)))
        self.bias = parameter(np.zeros(out_ch))

    def out_len(self, T: int) -> int:
        return (T + 2 * self.pad - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        B, T, C = x.shape
        if C != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {C}")
        T_out = self.out_len(T)
        if T_out < 1:
            raise ValueError(f"sequence of {T} frames too short for this conv")
        padded = ad.pad_time(x, self.pad, self.pad) if self.pad else x
        idx = (np.arange(T_out)[:, None] * self.stride + np.arange(self.kernel)[None, :])
        windows = ad.gather_time(padded, idx)  # (B, T_out, K, C)
        flat = ad.reshape(windows, (B, T_out, self.kernel * C))
        return ad.matmul(flat, self.weight) + self.bias


class MultiHeadSelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool = False):
        if width % heads != 0:
            raise ValueError("width must be divisible by heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.causal = causal
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, T, W = x.shape
        q = ad.transpose(ad.reshape(self.wq(x), (B, T, self.heads, self.head_dim)),
                         (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(self.wk(x), (B, T, self.heads, self.head_dim)),
                         (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(self.wv(x), (B, T, self.heads, self.head_dim)),
                         (0, 2, 1, 3))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if self.causal:
            mask = np.triu(np.full((T, T), -1e30), k=1)
            scores = scores + Tensor(mask)
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, v)  # (B, H, T, Dh)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (B, T, W))
        return self.wo(merged)


class TransformerBlock(Module):
    """Pre-norm residual block: attention then a GELU MLP."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool = False, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadSelfAttention(width, heads, rng, causal=causal)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr_scale: float = 1.0):
        self.t += 1
        lr = self.lr * lr_scale
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cosine_warmup_scale(step: int, total_steps: int, warmup_steps: int) -> float:
    """LR multiplier: linear warmup then cosine decay to zero."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))
