"""Forward noising process, denoiser training loop, and ancestral sampling
over abundance patches.

The network predicts the injected noise; the reverse-step mean is derived
from that prediction. The per-step leading coefficient is 1/sqrt(1 - beta_t)
by default; the cumulative variant 1/sqrt(alpha_cum_t) is selectable for
comparison. The noise scale sigma_t is sqrt(beta_t), and the final reverse
step (t = 1) is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import nn_denoiser
from .errors import HypersynthError, NumericalError
from .hsi_core import Patch
from .nn_denoiser import DenoiserParams, UNetConfig, adam_step, ema_update, init_params
from .ntb import read_ntb, write_ntb
from .unmix_ls import simplex_project_columns


@dataclass(frozen=True)
class BetaSchedule:
    betas: np.ndarray
    alphas_cum: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or len(b) < 1:
            raise HypersynthError("schedule needs at least one step")
        if b.min() <= 0 or b.max() >= 1:
            raise HypersynthError("betas must lie strictly in (0, 1)")
        if len(b) > 1 and not np.all(np.diff(b) > 0):
            raise HypersynthError("betas must be strictly increasing")
        if len(b) > 1 and not np.all(np.diff(self.alphas_cum) < 0):
            raise HypersynthError("cumulative alphas must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.betas)


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> BetaSchedule:
    if not (0 < beta_start < beta_end < 1):
        raise HypersynthError("need 0 < beta_start < beta_end < 1")
    if T < 1:
        raise HypersynthError("T must be >= 1")
    betas = (np.array([beta_start]) if T == 1
             else np.linspace(beta_start, beta_end, T))
    return BetaSchedule(
        betas=betas,
        alphas_cum=np.cumprod(1.0 - betas),
        sigmas=np.sqrt(betas),
    )


def forward_sample(schedule: BetaSchedule, a0, t: int, eps):
    """Closed-form noising: sqrt(ac_t) * a0 + sqrt(1 - ac_t) * eps."""
    if not 1 <= t <= schedule.T:
        raise HypersynthError(f"timestep {t} out of range [1, {schedule.T}]")
    a0_arr = a0.data if isinstance(a0, Patch) else np.asarray(a0)
    eps_arr = eps.data if isinstance(eps, Patch) else np.asarray(eps)
    if a0_arr.shape != eps_arr.shape:
        raise HypersynthError("noise field shape must match the patch")
    ac = schedule.alphas_cum[t - 1]
    out = np.sqrt(ac) * a0_arr + np.sqrt(1.0 - ac) * eps_arr
    if isinstance(a0, Patch):
        return Patch(origin=a0.origin, data=out.astype(a0_arr.dtype),
                     source_id=a0.source_id)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9999
    loss: str = "l1"            # "l1" (default) or "l2"

    def __post_init__(self):
        if self.loss not in ("l1", "l2"):
            raise HypersynthError("loss must be 'l1' or 'l2'")


@dataclass
class TrainState:
    params: DenoiserParams
    net_config: UNetConfig
    train_config: TrainConfig
    schedule: BetaSchedule
    step: int = 0
    loss_history: List[float] = field(default_factory=list)
    rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))
    seed: int = 0


def make_train_state(net_config: UNetConfig, schedule: BetaSchedule,
                     train_config: TrainConfig = TrainConfig(),
                     seed: int = 0) -> TrainState:
    params = init_params(replace(net_config, seed=seed))
    return TrainState(params=params, net_config=net_config,
                      train_config=train_config, schedule=schedule,
                      rng=np.random.default_rng(seed), seed=seed)


def _batch_array(batch: Sequence[Union[Patch, np.ndarray]]) -> np.ndarray:
    if not batch:
        raise HypersynthError("batch must be non-empty")
    arrays = [b.data if isinstance(b, Patch) else np.asarray(b) for b in batch]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise HypersynthError("all patches in a batch must share one shape")
    return np.stack(arrays).astype(np.float32)


def train_step(state: TrainState, batch: Sequence[Union[Patch, np.ndarray]]) -> float:
    """One optimizer step: per-element (t, noise) draws, noise-prediction
    loss, backprop, Adam, EMA. Returns the scalar loss."""
    a0 = _batch_array(batch)
    B = a0.shape[0]
    T = state.schedule.T
    ts = state.rng.integers(1, T + 1, size=B)
    eps = state.rng.standard_normal(a0.shape).astype(np.float32)
    ac = state.schedule.alphas_cum[ts - 1].astype(np.float32)[:, None, None, None]
    x_t = np.sqrt(ac) * a0 + np.sqrt(1.0 - ac) * eps

    ws = {k: v.detach().requires_grad_(True)
          for k, v in state.params.weights.items()}
    pred = nn_denoiser.unet_forward(ws, state.net_config,
                                    torch.from_numpy(x_t),
                                    torch.from_numpy(ts), total_steps=T)
    target = torch.from_numpy(eps)
    if state.train_config.loss == "l1":
        loss = torch.mean(torch.abs(target - pred))
    else:
        loss = torch.mean((target - pred) ** 2)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NumericalError(f"non-finite training loss at step {state.step}")
    names = list(ws)
    grads = torch.autograd.grad(loss, [ws[n] for n in names], allow_unused=True)
    grad_map = {n: (g if g is not None else torch.zeros_like(ws[n]))
                for n, g in zip(names, grads)}
    tc = state.train_config
    adam_step(state.params, grad_map, tc.lr, tc.beta1, tc.beta2, tc.eps)
    ema_update(state.params, tc.ema_decay)
    state.step += 1
    state.loss_history.append(value)
    return value


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample(state: TrainState, n: int, size: Tuple[int, int], seed: int = 0,
           use_ema: bool = True, leading: str = "per_step",
           project_simplex: bool = False) -> List[Patch]:
    """Ancestral sampling of n patches from pure noise.

    ``leading`` selects the reverse-step leading coefficient: "per_step" for
    1/sqrt(1 - beta_t) (default) or "cumulative" for 1/sqrt(alpha_cum_t).
    Each patch draws its noise from an independently derived seed, so the
    output is invariant to batching.
    """
    if leading not in ("per_step", "cumulative"):
        raise HypersynthError("leading must be 'per_step' or 'cumulative'")
    if state.step == 0:
        raise NumericalError(
            "refusing to sample from untrained weights; train first or load "
            "a checkpoint"
        )
    if n == 0:
        return []
    h, w = size
    p = state.net_config.in_channels
    sched = state.schedule
    T = sched.T
    ws = state.params.ema if use_ema else state.params.weights

    rngs = [np.random.default_rng(ss)
            for ss in np.random.SeedSequence(seed).spawn(n)]
    x = np.stack([r.standard_normal((p, h, w)) for r in rngs]).astype(np.float32)

    for t in range(T, 0, -1):
        with torch.no_grad():
            eps_hat = nn_denoiser.unet_forward(
                ws, state.net_config, torch.from_numpy(x), t, total_steps=T
            ).numpy()
        beta = sched.betas[t - 1]
        ac = sched.alphas_cum[t - 1]
        coef = 1.0 / np.sqrt(ac) if leading == "cumulative" \
            else 1.0 / np.sqrt(1.0 - beta)
        x = coef * (x - beta / np.sqrt(1.0 - ac) * eps_hat)
        if t > 1:
            z = np.stack([r.standard_normal((p, h, w)) for r in rngs])
            x = x + sched.sigmas[t - 1] * z
        x = x.astype(np.float32)

    patches = [Patch(origin=(0, 0), data=x[i], source_id=f"generated-{i}")
               for i in range(n)]
    if project_simplex:
        patches = project_patches(patches)
    return patches


def project_patches(patches: Sequence[Patch]) -> List[Patch]:
    """Per-pixel simplex projection of each patch."""
    out = []
    for pt in patches:
        p, h, w = pt.data.shape
        flat = simplex_project_columns(pt.data.reshape(p, -1).astype(np.float64))
        out.append(Patch(origin=pt.origin,
                         data=flat.reshape(p, h, w).astype(np.float32),
                         source_id=pt.source_id))
    return out


# ---------------------------------------------------------------------------
# Checkpoints and loss history
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path, extra_meta: Optional[dict] = None) -> None:
    tensors = {}
    for name, t in state.params.weights.items():
        tensors[f"w/{name}"] = t.detach().numpy()
    for name, t in state.params.ema.items():
        tensors[f"ema/{name}"] = t.detach().numpy()
    for name, t in state.params.adam_m.items():
        tensors[f"adam_m/{name}"] = t.detach().numpy()
    for name, t in state.params.adam_v.items():
        tensors[f"adam_v/{name}"] = t.detach().numpy()
    tensors["schedule/betas"] = state.schedule.betas
    tensors["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
    net_cfg = asdict(state.net_config)
    net_cfg["level_widths"] = list(net_cfg["level_widths"])
    net_cfg["attn_levels"] = list(net_cfg["attn_levels"])
    meta = {
        "kind": "denoiser_checkpoint",
        "net_config": net_cfg,
        "train_config": asdict(state.train_config),
        "step": state.step,
        "adam_step_count": state.params.adam_step_count,
        "seed": state.seed,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_ntb(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = read_ntb(path)
    if meta.get("kind") != "denoiser_checkpoint":
        raise HypersynthError(f"{path} is not a denoiser checkpoint")
    cfg_d = dict(meta["net_config"])
    cfg_d["level_widths"] = tuple(cfg_d["level_widths"])
    cfg_d["attn_levels"] = tuple(cfg_d["attn_levels"])
    net_config = UNetConfig(**cfg_d)
    train_config = TrainConfig(**meta["train_config"])

    def group(prefix):
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v) for k, v in tensors.items()
                if k.startswith(prefix)}

    params = DenoiserParams(
        weights=group("w/"), ema=group("ema/"),
        adam_m=group("adam_m/"), adam_v=group("adam_v/"),
        adam_step_count=int(meta["adam_step_count"]),
    )
    betas = tensors["schedule/betas"].astype(np.float64)
    schedule = BetaSchedule(betas=betas, alphas_cum=np.cumprod(1 - betas),
                            sigmas=np.sqrt(betas))
    step = int(meta["step"])
    seed = int(meta.get("seed", 0))
    state = TrainState(
        params=params, net_config=net_config, train_config=train_config,
        schedule=schedule, step=step,
        loss_history=list(tensors.get("loss_history", np.empty(0))),
        rng=np.random.default_rng((seed, step)), seed=seed,
    )
    return state


def write_loss_csv(loss_history: Sequence[float], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(loss_history):
            writer.writerow([i, f"{v:.8g}"])
