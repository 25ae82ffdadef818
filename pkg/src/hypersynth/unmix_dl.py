"""Autoencoder unmixer: a per-pixel MLP encoder with a softmax head emits
abundances, and a single linear decoder (no bias, weights clamped to [0, 1])
reconstructs the spectra — its weight matrix is the endmember estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from .errors import HypersynthError, NumericalError
from .hsi_core import AbundanceStack, EndmemberMatrix, HyperCube, is_normalized
from .ntb import read_ntb, write_ntb
from .unmix_ls import UnmixResult, geometric_endmember_init


@dataclass(frozen=True)
class AeConfig:
    endmember_count: int
    hidden_widths: Tuple[int, ...] = (32, 16)
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    decoder_lr_factor: float = 0.1   # endmembers move slower than the encoder
    seed: int = 0

    def __post_init__(self):
        if self.endmember_count < 2:
            raise HypersynthError("endmember_count must be >= 2")
        if self.learning_rate <= 0:
            raise HypersynthError("learning_rate must be > 0")


class AeModel(torch.nn.Module):
    """Encoder MLP (C -> hidden -> p, softmax) + linear decoder (C x p)."""

    def __init__(self, bands: int, endmember_count: int,
                 hidden_widths: Tuple[int, ...] = (32, 16),
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.bands = bands
        self.endmember_count = endmember_count
        widths = [bands, *hidden_widths, endmember_count]
        self.encoder_layers = torch.nn.ModuleList(
            torch.nn.Linear(widths[i], widths[i + 1], dtype=dtype)
            for i in range(len(widths) - 1)
        )
        self.decoder_weight = torch.nn.Parameter(
            torch.rand(bands, endmember_count, dtype=dtype)
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for layer in self.encoder_layers[:-1]:
            h = torch.nn.functional.leaky_relu(layer(h), 0.1)
        return torch.softmax(self.encoder_layers[-1](h), dim=-1)

    def decode(self, a: torch.Tensor) -> torch.Tensor:
        return a @ self.decoder_weight.T

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def ae_loss(model: AeModel, x: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error over a pixel batch."""
    return torch.mean((model(x) - x) ** 2)


def _init_encoder(model: AeModel, generator: torch.Generator, scale: float = 1.0):
    for layer in model.encoder_layers:
        fan_in = layer.weight.shape[1]
        limit = scale / np.sqrt(fan_in)
        with torch.no_grad():
            layer.weight.uniform_(-limit, limit, generator=generator)
            layer.bias.zero_()


def ae_encode(model: AeModel, cube: HyperCube) -> AbundanceStack:
    if cube.bands != model.bands:
        raise HypersynthError(
            f"cube has {cube.bands} bands, model expects {model.bands}"
        )
    with torch.no_grad():
        x = torch.from_numpy(cube.pixels().T.astype(np.float32)) \
            .to(model.decoder_weight.dtype)
        a = model.encode(x).cpu().numpy().T
    return AbundanceStack(
        data=a.reshape(model.endmember_count, cube.height, cube.width)
        .astype(np.float32),
        strict_simplex=True,
    )


def ae_decode(model: AeModel, abundances: AbundanceStack) -> HyperCube:
    if abundances.channels != model.endmember_count:
        raise HypersynthError(
            f"stack has {abundances.channels} channels, model expects "
            f"{model.endmember_count}"
        )
    with torch.no_grad():
        a = torch.from_numpy(abundances.pixels().T.astype(np.float32)) \
            .to(model.decoder_weight.dtype)
        y = model.decode(a).cpu().numpy().T
    return HyperCube(
        data=y.reshape(model.bands, abundances.height, abundances.width)
        .astype(np.float32)
    )


def ae_train(cube: HyperCube, cfg: AeConfig) -> Tuple[AeModel, UnmixResult]:
    """Train the autoencoder with Adam on per-pixel batches.

    The decoder is initialized from the geometric endmember picks and clamped
    to [0, 1] after every optimizer step; the encoder starts from scaled
    symmetric uniform noise.
    """
    if not is_normalized(cube):
        raise HypersynthError("ae_train requires a normalized cube")
    p = cfg.endmember_count
    gen = torch.Generator().manual_seed(cfg.seed)
    model = AeModel(cube.bands, p, cfg.hidden_widths)
    _init_encoder(model, gen)
    e0 = geometric_endmember_init(cube, p, cfg.seed)
    with torch.no_grad():
        model.decoder_weight.copy_(
            torch.from_numpy(e0.signatures.astype(np.float32)))

    X = torch.from_numpy(cube.pixels().T.astype(np.float32))
    n = X.shape[0]
    encoder_params = [param for name, param in model.named_parameters()
                      if name != "decoder_weight"]
    opt = torch.optim.Adam([
        {"params": encoder_params, "lr": cfg.learning_rate},
        {"params": [model.decoder_weight],
         "lr": cfg.learning_rate * cfg.decoder_lr_factor},
    ])
    trace = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = X[order[start:start + cfg.batch_size]]
            loss = ae_loss(model, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.decoder_weight.clamp_(0.0, 1.0)
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise NumericalError(f"autoencoder training diverged at epoch {epoch}")
        trace.append(mean_loss)

    endmembers = EndmemberMatrix(
        signatures=model.decoder_weight.detach().numpy().astype(np.float64))
    abundances = ae_encode(model, cube)
    return model, UnmixResult(
        endmembers=endmembers,
        abundances=abundances,
        objective_trace=trace,
        method_tag="DL",
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_ae_model(model: AeModel, path) -> None:
    tensors = {name: param.detach().cpu().numpy()
               for name, param in model.named_parameters()}
    meta = {
        "kind": "ae_model",
        "bands": model.bands,
        "endmember_count": model.endmember_count,
        "hidden_widths": [layer.weight.shape[0]
                          for layer in model.encoder_layers[:-1]],
    }
    write_ntb(path, tensors, meta)


def load_ae_model(path) -> AeModel:
    tensors, meta = read_ntb(path)
    if meta.get("kind") != "ae_model":
        raise HypersynthError(f"{path} is not an autoencoder checkpoint")
    model = AeModel(meta["bands"], meta["endmember_count"],
                    tuple(meta["hidden_widths"]))
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model
