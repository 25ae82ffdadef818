"""Figure rendering for the report path: abundance-map panels, endmember
spectra, loss curves and violation histograms, written next to the delimited
outputs. PGM previews are emitted for raw per-channel inspection.

All PNGs are saved without timestamp metadata so artifacts are byte-stable
across reruns.
"""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import HypersynthError  # noqa: E402
from .hsi_core import EndmemberMatrix, Patch  # noqa: E402


def _save(fig, path):
    fig.savefig(path, metadata={"Date": None}, dpi=100)
    plt.close(fig)


def write_pgm(field: np.ndarray, path, lo: float = 0.0, hi: float = 1.0) -> None:
    """Write a single-channel field as a binary PGM (P5), values mapped from
    [lo, hi] to 0..255 with clipping."""
    if field.ndim != 2:
        raise HypersynthError("PGM preview expects a 2-D field")
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((field - lo) / span, 0.0, 1.0)
    byte = (scaled * 255.0 + 0.5).astype(np.uint8)
    h, w = byte.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(byte.tobytes())


def abundance_figure(data: np.ndarray, path, title: Optional[str] = None) -> None:
    """One panel per channel of a (p, h, w) abundance field."""
    p = data.shape[0]
    fig, axes = plt.subplots(1, p, figsize=(3 * p, 3.2))
    axes = np.atleast_1d(axes)
    for j, ax in enumerate(axes):
        im = ax.imshow(data[j], vmin=0, vmax=1, cmap="viridis")
        ax.set_title(f"channel {j}")
        ax.axis("off")
    fig.colorbar(im, ax=list(axes), fraction=0.03)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def montage_figure(patches: Sequence[Patch], path, cols: int = 4) -> None:
    """Grid of patches, first three channels mapped to RGB."""
    if not patches:
        raise HypersynthError("montage needs at least one patch")
    n = len(patches)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes[n:]:
        ax.axis("off")
    for ax, pt in zip(axes, patches):
        d = pt.data
        if d.shape[0] >= 3:
            rgb = np.clip(d[:3], 0, 1).transpose(1, 2, 0)
        else:
            rgb = np.clip(np.repeat(d[:1], 3, axis=0), 0, 1).transpose(1, 2, 0)
        ax.imshow(rgb)
        ax.axis("off")
    _save(fig, path)


def endmember_figure(endmembers: EndmemberMatrix, path,
                     wavelengths: Optional[Sequence[float]] = None,
                     reference: Optional[EndmemberMatrix] = None) -> None:
    """Spectra plot; a reference set, if given, is drawn dashed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.asarray(wavelengths) if wavelengths is not None \
        else np.arange(endmembers.bands)
    for j in range(endmembers.count):
        line, = ax.plot(x, endmembers.signatures[:, j], label=f"endmember {j}")
        if reference is not None:
            ax.plot(x, reference.signatures[:, j], "--",
                    color=line.get_color(), alpha=0.7)
    ax.set_xlabel("wavelength (nm)" if wavelengths is not None else "band")
    ax.set_ylabel("reflectance")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    _save(fig, path)


def loss_figure(loss_history: Sequence[float], path, window: int = 50) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    y = np.asarray(loss_history, dtype=np.float64)
    ax.plot(y, alpha=0.3, label="loss")
    if len(y) >= window:
        kernel = np.ones(window) / window
        ax.plot(np.arange(window - 1, len(y)),
                np.convolve(y, kernel, mode="valid"),
                label=f"moving mean ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    _save(fig, path)


def violation_histogram(patches: Sequence[Patch], path) -> None:
    """Histogram of per-pixel |channel sum - 1| over a patch set."""
    v = np.concatenate(
        [np.abs(pt.data.sum(axis=0) - 1.0).ravel() for pt in patches])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(v, bins=50)
    ax.set_xlabel("|sum of channels - 1|")
    ax.set_ylabel("pixels")
    _save(fig, path)
