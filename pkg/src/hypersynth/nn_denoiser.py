"""Noise-prediction U-Net with residual blocks, sinusoidal time embeddings
and multi-head self-attention, operating on a flat named-parameter map.

The forward pass is a pure function of (weights, config, x, t); gradients are
exact (reverse-mode differentiation of that function); the optimizer (Adam)
and the EMA shadow copy are implemented here so every update is inspectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch
import torch.nn.functional as F

from .errors import HypersynthError, NumericalError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    base_width: int = 32
    level_widths: Tuple[int, ...] = (1, 2)
    levels: int = 2
    attn_levels: Tuple[int, ...] = (1,)
    heads: int = 2
    time_embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if len(self.level_widths) != self.levels:
            raise HypersynthError("level_widths must have one entry per level")
        if self.time_embed_dim % 2:
            raise HypersynthError("time_embed_dim must be even")
        for i in self.attn_levels:
            if not 0 <= i < self.levels:
                raise HypersynthError(f"attention level {i} out of range")
            if self.width(i) % self.heads:
                raise HypersynthError(
                    f"heads ({self.heads}) must divide width {self.width(i)}"
                )
        if self.width(self.levels - 1) % self.heads:
            raise HypersynthError("heads must divide the bottleneck width")

    def width(self, level: int) -> int:
        return self.base_width * self.level_widths[level]


@dataclass
class DenoiserParams:
    """All weights plus the EMA shadow copy and Adam accumulators."""

    weights: Dict[str, torch.Tensor]
    ema: Dict[str, torch.Tensor]
    adam_m: Dict[str, torch.Tensor]
    adam_v: Dict[str, torch.Tensor]
    adam_step_count: int = 0


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _res_block_shapes(prefix: str, cin: int, cout: int, ted: int) -> dict:
    shapes = {
        f"{prefix}.norm1.g": (cin,), f"{prefix}.norm1.b": (cin,),
        f"{prefix}.conv1.w": (cout, cin, 3, 3), f"{prefix}.conv1.b": (cout,),
        f"{prefix}.temb.w": (cout, ted), f"{prefix}.temb.b": (cout,),
        f"{prefix}.norm2.g": (cout,), f"{prefix}.norm2.b": (cout,),
        f"{prefix}.conv2.w": (cout, cout, 3, 3), f"{prefix}.conv2.b": (cout,),
    }
    if cin != cout:
        shapes[f"{prefix}.skip.w"] = (cout, cin, 1, 1)
        shapes[f"{prefix}.skip.b"] = (cout,)
    return shapes


def _attn_shapes(prefix: str, ch: int) -> dict:
    return {
        f"{prefix}.norm.g": (ch,), f"{prefix}.norm.b": (ch,),
        f"{prefix}.qkv.w": (3 * ch, ch, 1, 1), f"{prefix}.qkv.b": (3 * ch,),
        f"{prefix}.proj.w": (ch, ch, 1, 1), f"{prefix}.proj.b": (ch,),
    }


def parameter_shapes(config: UNetConfig) -> Dict[str, tuple]:
    """Name -> shape for every tensor in the network, a pure function of the
    config."""
    ted = config.time_embed_dim
    p = config.in_channels
    w0 = config.width(0)
    shapes: Dict[str, tuple] = {
        "time.fc1.w": (ted, ted), "time.fc1.b": (ted,),
        "time.fc2.w": (ted, ted), "time.fc2.b": (ted,),
        "stem.w": (w0, p, 3, 3), "stem.b": (w0,),
    }
    c_prev = w0
    for i in range(config.levels):
        wi = config.width(i)
        shapes.update(_res_block_shapes(f"enc{i}.res", c_prev, wi, ted))
        if i in config.attn_levels:
            shapes.update(_attn_shapes(f"enc{i}.attn", wi))
        shapes[f"enc{i}.down.w"] = (wi, wi, 3, 3)
        shapes[f"enc{i}.down.b"] = (wi,)
        c_prev = wi
    cb = config.width(config.levels - 1)
    shapes.update(_res_block_shapes("mid.res1", cb, cb, ted))
    shapes.update(_attn_shapes("mid.attn", cb))
    shapes.update(_res_block_shapes("mid.res2", cb, cb, ted))
    c_prev = cb
    for i in reversed(range(config.levels)):
        wi = config.width(i)
        shapes[f"dec{i}.up.w"] = (wi, c_prev, 3, 3)
        shapes[f"dec{i}.up.b"] = (wi,)
        shapes.update(_res_block_shapes(f"dec{i}.res", 2 * wi, wi, ted))
        if i in config.attn_levels:
            shapes.update(_attn_shapes(f"dec{i}.attn", wi))
        c_prev = wi
    shapes.update({
        "final.norm.g": (w0,), "final.norm.b": (w0,),
        "final.w": (p, w0, 3, 3), "final.b": (p,),
    })
    return shapes


def param_count(config: UNetConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(config).values())


def init_params(config: UNetConfig,
                dtype: torch.dtype = torch.float32) -> DenoiserParams:
    """Seeded initialization; the final conv and attention projections start
    at zero so the untrained network predicts zero noise."""
    gen = torch.Generator().manual_seed(config.seed)
    weights: Dict[str, torch.Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        t = torch.empty(shape, dtype=dtype)
        if name.endswith(".g") or name.endswith("norm.g"):
            t.fill_(1.0)
        elif name.endswith(".b"):
            t.zero_()
        elif name in ("final.w",) or name.endswith("proj.w"):
            t.zero_()
        else:
            fan_in = math.prod(shape[1:]) if len(shape) > 1 else shape[0]
            limit = 1.0 / math.sqrt(fan_in)
            t.uniform_(-limit, limit, generator=gen)
        weights[name] = t
    ema = {k: v.clone() for k, v in weights.items()}
    zeros = lambda: {k: torch.zeros_like(v) for k, v in weights.items()}
    return DenoiserParams(weights=weights, ema=ema,
                          adam_m=zeros(), adam_v=zeros())


# ---------------------------------------------------------------------------
# Time embedding
# ---------------------------------------------------------------------------

def time_embed(t, dim: int, total_steps: int) -> torch.Tensor:
    """Sinusoidal embedding of timestep(s) t in 1..total_steps.

    Half the dims carry sin, half cos, with angular frequencies geometric
    from 1 down to 1/10000. Step 1 maps to phase 0 (sin parts 0, cos parts 1).
    """
    t_arr = torch.as_tensor(t, dtype=torch.float64)
    scalar = t_arr.ndim == 0
    t_arr = torch.atleast_1d(t_arr)
    if torch.any(t_arr < 1) or torch.any(t_arr > total_steps):
        raise HypersynthError(f"timestep out of range [1, {total_steps}]")
    half = dim // 2
    if half > 1:
        freqs = torch.exp(
            torch.arange(half, dtype=torch.float64)
            * (-math.log(10000.0) / (half - 1))
        )
    else:
        freqs = torch.ones(1, dtype=torch.float64)
    phase = (t_arr[:, None] - 1.0) * freqs[None, :]
    emb = torch.cat([torch.sin(phase), torch.cos(phase)], dim=1)
    return emb[0] if scalar else emb


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _gn(x, g, b):
    groups = math.gcd(8, x.shape[1])
    return F.group_norm(x, groups, g, b)


def _res_block(ws, prefix, x, emb):
    h = F.silu(_gn(x, ws[f"{prefix}.norm1.g"], ws[f"{prefix}.norm1.b"]))
    h = F.conv2d(h, ws[f"{prefix}.conv1.w"], ws[f"{prefix}.conv1.b"], padding=1)
    h = h + (emb @ ws[f"{prefix}.temb.w"].T
             + ws[f"{prefix}.temb.b"])[:, :, None, None]
    h = F.silu(_gn(h, ws[f"{prefix}.norm2.g"], ws[f"{prefix}.norm2.b"]))
    h = F.conv2d(h, ws[f"{prefix}.conv2.w"], ws[f"{prefix}.conv2.b"], padding=1)
    if f"{prefix}.skip.w" in ws:
        x = F.conv2d(x, ws[f"{prefix}.skip.w"], ws[f"{prefix}.skip.b"])
    return x + h


def attention_matrix(ws, prefix, x, heads):
    """Softmax attention weights (B, heads, n, n) and values (B, heads, d, n)
    for the block at ``prefix``; every row of the weights sums to 1."""
    B, C, H, W = x.shape
    n = H * W
    d = C // heads
    h = _gn(x, ws[f"{prefix}.norm.g"], ws[f"{prefix}.norm.b"])
    qkv = F.conv2d(h, ws[f"{prefix}.qkv.w"], ws[f"{prefix}.qkv.b"])
    qkv = qkv.reshape(B, 3, heads, d, n)
    q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
    att = torch.softmax(torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(d),
                        dim=-1)
    return att, v


def _attention(ws, prefix, x, heads):
    B, C, H, W = x.shape
    att, v = attention_matrix(ws, prefix, x, heads)
    out = torch.einsum("bhij,bhdj->bhdi", att, v).reshape(B, C, H, W)
    out = F.conv2d(out, ws[f"{prefix}.proj.w"], ws[f"{prefix}.proj.b"])
    return x + out


def unet_forward(weights: Dict[str, torch.Tensor], config: UNetConfig,
                 x: torch.Tensor, t, total_steps: int = 10000) -> torch.Tensor:
    """Predict the noise field for input x at timestep t.

    x: (B, p, H, W) or (p, H, W); t: scalar or per-batch-element timesteps.
    Spatial dims must be divisible by 2**levels. Output has the shape of x.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    B, C, H, W = x.shape
    if C != config.in_channels:
        raise HypersynthError(f"expected {config.in_channels} channels, got {C}")
    div = 2 ** config.levels
    if H % div or W % div:
        raise HypersynthError(
            f"spatial dims {H}x{W} must be divisible by {div}"
        )
    ws = weights
    emb = time_embed(t, config.time_embed_dim, total_steps).to(x.dtype)
    if emb.ndim == 1:
        emb = emb[None].expand(B, -1)
    emb = emb @ ws["time.fc1.w"].T + ws["time.fc1.b"]
    emb = F.silu(emb)
    emb = emb @ ws["time.fc2.w"].T + ws["time.fc2.b"]

    h = F.conv2d(x, ws["stem.w"], ws["stem.b"], padding=1)
    skips = []
    for i in range(config.levels):
        h = _res_block(ws, f"enc{i}.res", h, emb)
        if i in config.attn_levels:
            h = _attention(ws, f"enc{i}.attn", h, config.heads)
        skips.append(h)
        h = F.conv2d(h, ws[f"enc{i}.down.w"], ws[f"enc{i}.down.b"],
                     stride=2, padding=1)
    h = _res_block(ws, "mid.res1", h, emb)
    h = _attention(ws, "mid.attn", h, config.heads)
    h = _res_block(ws, "mid.res2", h, emb)
    for i in reversed(range(config.levels)):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.conv2d(h, ws[f"dec{i}.up.w"], ws[f"dec{i}.up.b"], padding=1)
        h = torch.cat([h, skips[i]], dim=1)
        h = _res_block(ws, f"dec{i}.res", h, emb)
        if i in config.attn_levels:
            h = _attention(ws, f"dec{i}.attn", h, config.heads)
    h = F.silu(_gn(h, ws["final.norm.g"], ws["final.norm.b"]))
    out = F.conv2d(h, ws["final.w"], ws["final.b"], padding=1)
    return out[0] if squeeze else out


def unet_backward(params: DenoiserParams, config: UNetConfig, x: torch.Tensor,
                  t, upstream_grad: torch.Tensor,
                  total_steps: int = 10000) -> Dict[str, torch.Tensor]:
    """Exact parameter gradients of the scalar sum(output * upstream_grad).

    The EMA shadow copy is never part of the graph.
    """
    ws = {k: v.detach().requires_grad_(True) for k, v in params.weights.items()}
    out = unet_forward(ws, config, x, t, total_steps)
    if out.shape != upstream_grad.shape:
        raise HypersynthError("upstream gradient shape mismatch")
    loss = (out * upstream_grad.to(out.dtype)).sum()
    names = list(ws)
    grads = torch.autograd.grad(loss, [ws[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(ws[n]))
            for n, g in zip(names, grads)}


# ---------------------------------------------------------------------------
# Optimizer and EMA
# ---------------------------------------------------------------------------

def adam_step(params: DenoiserParams, grads: Dict[str, torch.Tensor],
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for tensor {name!r}")
    params.adam_step_count += 1
    tstep = params.adam_step_count
    with torch.no_grad():
        for name, w in params.weights.items():
            g = grads[name]
            m, v = params.adam_m[name], params.adam_v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1 ** tstep)
            v_hat = v / (1 - beta2 ** tstep)
            w.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def ema_update(params: DenoiserParams, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * weights, elementwise.

    Accumulated in double precision and rounded once, so the stored value is
    within half an ulp of the exact recurrence.
    """
    with torch.no_grad():
        for name, w in params.weights.items():
            ema = params.ema[name]
            upd = ema.double().mul_(decay).add_(w.double(), alpha=1 - decay)
            params.ema[name] = upd.to(ema.dtype)
