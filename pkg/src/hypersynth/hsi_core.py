"""Core domain types for hyperspectral cubes and abundance stacks, plus the
HSC container format used to persist both.

Layout convention: band-sequential, i.e. arrays of shape (bands, height, width)
stored in C order. A cube flattened to a matrix has shape (C, S) with
S = height * width and pixels enumerated row-major.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ContainerError, HypersynthError

HSC_MAGIC = b"HSC1"
SIMPLEX_SUM_TOL = 1e-6


@dataclass(frozen=True)
class HyperCube:
    """A C-band image; the observation matrix of the linear mixing model."""

    data: np.ndarray                       # (bands, height, width), float32
    wavelengths: Optional[Tuple[float, ...]] = None
    nodata_mask: Optional[np.ndarray] = None   # (height, width) bool, True = invalid

    def __post_init__(self):
        if self.data.ndim != 3:
            raise HypersynthError("cube data must have shape (bands, height, width)")
        if not np.all(np.isfinite(self.data)):
            raise HypersynthError("cube data must be finite")
        if self.wavelengths is not None and len(self.wavelengths) != self.bands:
            raise HypersynthError(
                f"wavelength list has {len(self.wavelengths)} entries for "
                f"{self.bands} bands"
            )
        if self.nodata_mask is not None and self.nodata_mask.shape != (
            self.height,
            self.width,
        ):
            raise HypersynthError("nodata mask shape must match (height, width)")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """Return the (C, S) pixel matrix, pixels enumerated row-major."""
        return self.data.reshape(self.bands, -1)


@dataclass(frozen=True)
class EndmemberMatrix:
    """Pure spectral signatures, one per column; entries constrained to [0, 1]."""

    signatures: np.ndarray                 # (bands, count)

    def __post_init__(self):
        if self.signatures.ndim != 2:
            raise HypersynthError("endmember signatures must be a (C, p) matrix")
        s = self.signatures
        if not np.all(np.isfinite(s)):
            raise HypersynthError("endmember signatures must be finite")
        if s.min() < -1e-9 or s.max() > 1 + 1e-9:
            raise HypersynthError("endmember entries must lie in [0, 1]")
        if np.any(np.all(s == 0, axis=0)):
            raise HypersynthError("endmember matrix contains an all-zero column")

    @property
    def bands(self) -> int:
        return self.signatures.shape[0]

    @property
    def count(self) -> int:
        return self.signatures.shape[1]


@dataclass(frozen=True)
class AbundanceStack:
    """Per-pixel fractional composition over p channels.

    ``strict_simplex`` records whether every pixel is certified to be
    nonnegative and sum to one (within SIMPLEX_SUM_TOL).
    """

    data: np.ndarray                       # (channels, height, width)
    strict_simplex: bool = False

    def __post_init__(self):
        if self.data.ndim != 3:
            raise HypersynthError("stack data must have shape (channels, height, width)")
        if not np.all(np.isfinite(self.data)):
            raise HypersynthError("stack data must be finite")
        if self.strict_simplex:
            if self.data.min() < -1e-9:
                raise HypersynthError("strict-simplex stack has negative entries")
            sums = self.data.sum(axis=0)
            if np.max(np.abs(sums - 1.0)) > SIMPLEX_SUM_TOL:
                raise HypersynthError(
                    "strict-simplex stack violates per-pixel sum-to-one"
                )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Return the (p, S) abundance matrix, pixels enumerated row-major."""
        return self.data.reshape(self.channels, -1)


@dataclass(frozen=True)
class Patch:
    """A window cut from an abundance stack, with provenance."""

    origin: Tuple[int, int]                # (row, col) in the parent stack
    data: np.ndarray                       # (channels, h, w)
    source_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise HypersynthError("patch data must have shape (channels, h, w)")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


# ---------------------------------------------------------------------------
# HSC container I/O
# ---------------------------------------------------------------------------

def _write_container(path, kind: str, data: np.ndarray, wavelengths=None,
                     strict_simplex=None) -> None:
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    c, h, w = data.shape
    header = {
        "h": h,
        "w": w,
        "c": c,
        "layout": "bsq",
        "dtype": "f32le",
        "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
        "wavelengths": list(wavelengths) if wavelengths is not None else None,
        "kind": kind,
    }
    if kind == "abundance":
        header["strict_simplex"] = bool(strict_simplex)
    try:
        with open(path, "wb") as f:
            f.write(HSC_MAGIC + b"\n")
            f.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
            f.write(payload)
    except OSError as e:
        raise ContainerError(f"cannot write container {path}: {e}") from e


def _read_container(path):
    try:
        with open(path, "rb") as f:
            magic = f.readline().rstrip(b"\n")
            if magic != HSC_MAGIC:
                raise ContainerError(f"{path}: bad magic {magic!r}")
            header_line = f.readline()
            try:
                header = json.loads(header_line)
            except json.JSONDecodeError as e:
                raise ContainerError(f"{path}: malformed header: {e}") from e
            payload = f.read()
    except OSError as e:
        raise ContainerError(f"cannot read container {path}: {e}") from e

    for key in ("h", "w", "c", "layout", "dtype", "crc32", "kind"):
        if key not in header:
            raise ContainerError(f"{path}: header missing field {key!r}")
    if header["layout"] != "bsq" or header["dtype"] != "f32le":
        raise ContainerError(
            f"{path}: unsupported layout/dtype {header['layout']}/{header['dtype']}"
        )
    h, w, c = header["h"], header["w"], header["c"]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise ContainerError(
            f"{path}: payload holds {len(payload)} bytes, header declares "
            f"{expected} ({c} bands of {h}x{w})"
        )
    if (zlib.crc32(payload) & 0xFFFFFFFF) != header["crc32"]:
        raise ContainerError(f"{path}: payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
    bad = ~np.isfinite(data.ravel())
    if bad.any():
        offset = int(np.argmax(bad))
        raise ContainerError(f"{path}: non-finite value at payload offset {offset}")
    return header, data


def save_cube(cube: HyperCube, path) -> None:
    _write_container(path, "cube", cube.data, cube.wavelengths)


def load_cube(path) -> HyperCube:
    header, data = _read_container(path)
    if header["kind"] != "cube":
        raise ContainerError(f"{path}: expected kind 'cube', got {header['kind']!r}")
    wl = header.get("wavelengths")
    return HyperCube(data=data, wavelengths=tuple(wl) if wl else None)


def save_abundance(stack: AbundanceStack, path) -> None:
    _write_container(path, "abundance", stack.data,
                     strict_simplex=stack.strict_simplex)


def load_abundance(path) -> AbundanceStack:
    header, data = _read_container(path)
    if header["kind"] != "abundance":
        raise ContainerError(
            f"{path}: expected kind 'abundance', got {header['kind']!r}"
        )
    return AbundanceStack(data=data, strict_simplex=bool(header.get("strict_simplex")))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def drop_bands(cube: HyperCube, band_indices: Sequence[int]) -> HyperCube:
    """Remove the listed bands, preserving the order of the rest."""
    idx = list(band_indices)
    if len(set(idx)) != len(idx):
        raise HypersynthError("duplicate band index in drop list")
    for i in idx:
        if not (0 <= i < cube.bands):
            raise HypersynthError(f"band index {i} out of range [0, {cube.bands})")
    keep = [i for i in range(cube.bands) if i not in set(idx)]
    wl = None
    if cube.wavelengths is not None:
        wl = tuple(cube.wavelengths[i] for i in keep)
    return HyperCube(data=cube.data[keep], wavelengths=wl,
                     nodata_mask=cube.nodata_mask)


def patch_grid_count(H: int, W: int, h: int, w: int, sh: int, sw: int) -> int:
    """Closed-form count of full sliding windows; partial borders discarded."""
    if h > H or w > W:
        return 0
    return ((H - h) // sh + 1) * ((W - w) // sw + 1)


def extract_patches(stack: AbundanceStack, size: Tuple[int, int],
                    stride: Tuple[int, int], source_id: str = "") -> list:
    """Row-major sliding-window patches; windows that overrun the border are
    discarded rather than padded."""
    h, w = size
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise HypersynthError("stride must be >= 1")
    if h > stack.height or w > stack.width:
        raise HypersynthError(
            f"patch size {h}x{w} exceeds stack {stack.height}x{stack.width}"
        )
    patches = []
    for r in range(0, stack.height - h + 1, sh):
        for col in range(0, stack.width - w + 1, sw):
            patches.append(
                Patch(origin=(r, col),
                      data=stack.data[:, r:r + h, col:col + w].copy(),
                      source_id=source_id)
            )
    return patches


def normalize_cube(cube: HyperCube) -> HyperCube:
    """Per-band min-max scaling into [0, 1]; constant bands map to 0.

    Nodata pixels are excluded from the min/max statistics.
    """
    data = cube.data.astype(np.float32)
    if cube.nodata_mask is not None:
        valid = ~cube.nodata_mask
        stats = data[:, valid]
    else:
        stats = data.reshape(cube.bands, -1)
    lo = stats.min(axis=1)[:, None, None]
    hi = stats.max(axis=1)[:, None, None]
    span = hi - lo
    out = np.zeros_like(data)
    nonconst = (span > 0).ravel()
    out[nonconst] = (data[nonconst] - lo[nonconst]) / span[nonconst]
    out = np.clip(out, 0.0, 1.0)
    return HyperCube(data=out, wavelengths=cube.wavelengths,
                     nodata_mask=cube.nodata_mask)


def is_normalized(cube: HyperCube) -> bool:
    return cube.data.min() >= -1e-6 and cube.data.max() <= 1 + 1e-6
