"""Synthetic ground-truth scenes and quantitative evaluation.

Scenes realize the linear mixing model Y = E*A + N with known factors, so
recovery by any unmixer can be scored. Metrics: spectral angle (degrees),
RMSE, PSNR, SSIM, plus endmember matching (the factorization is invariant
to a simultaneous permutation of endmember columns and abundance channels,
so every recovery score is computed after matching).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal
from scipy.optimize import linear_sum_assignment

from .errors import HypersynthError, NumericalError
from .hsi_core import AbundanceStack, EndmemberMatrix, HyperCube, Patch


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic scene with known endmembers and abundances."""

    height: int
    width: int
    p: int
    bands: int
    smoothness: float = 3.0       # Gaussian-filter radius for abundance fields
    dirichlet_alpha: float = 0.5  # smaller -> sharper, more near-pure pixels
    snr_db: float = math.inf
    seed: int = 0

    def __post_init__(self):
        if self.p > self.bands:
            raise HypersynthError("scene needs p <= bands")
        if not (self.snr_db > 0):
            raise HypersynthError("snr_db must be positive (inf allowed)")


@dataclass
class EvalReport:
    """Quantitative comparison of generated patches against a reference set."""

    channel_mean_generated: List[float] = field(default_factory=list)
    channel_mean_reference: List[float] = field(default_factory=list)
    channel_var_generated: List[float] = field(default_factory=list)
    channel_var_reference: List[float] = field(default_factory=list)
    mean_gap: List[float] = field(default_factory=list)
    var_ratio: List[float] = field(default_factory=list)
    sum_violation_quantiles: dict = field(default_factory=dict)
    mean_nn_distance: float = 0.0
    matched_permutation: Optional[List[int]] = None
    sad_degrees: Optional[List[float]] = None
    abundance_rmse: Optional[float] = None
    psnr_per_channel: Optional[List[float]] = None
    ssim_per_channel: Optional[List[float]] = None

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    def to_csv(self, path) -> None:
        """Per-channel metric table."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["channel", "mean_gap", "var_ratio", "sad_degrees",
                             "psnr", "ssim"])
            n = len(self.mean_gap)
            for j in range(n):
                writer.writerow([
                    j,
                    f"{self.mean_gap[j]:.6g}",
                    f"{self.var_ratio[j]:.6g}",
                    f"{self.sad_degrees[j]:.6g}" if self.sad_degrees else "",
                    f"{self.psnr_per_channel[j]:.6g}" if self.psnr_per_channel else "",
                    f"{self.ssim_per_channel[j]:.6g}" if self.ssim_per_channel else "",
                ])


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _smooth_random_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    raw = rng.uniform(size=bands)
    smooth = ndimage.gaussian_filter1d(raw, sigma=max(1.0, bands / 10), mode="nearest")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo < 1e-12:
        return np.full(bands, 0.5)
    # Rescale into a comfortable sub-interval of [0, 1], random offset/gain.
    gain = rng.uniform(0.5, 0.95)
    off = rng.uniform(0.0, 1.0 - gain)
    return off + gain * (smooth - lo) / (hi - lo)


def generate_scene(spec: SceneSpec):
    """Build (cube, endmembers, abundances) with Y = E*A + N at the target SNR.

    Endmembers are smooth random spectra in [0, 1], rejection-sampled until
    pairwise spectral angles exceed 10 degrees. Abundance fields are
    Gaussian-smoothed white noise passed through a per-pixel softmax whose
    logits are scaled by 1/dirichlet_alpha (small alpha -> near-pure pixels).
    """
    rng = np.random.default_rng(spec.seed)

    sigs = []
    for _ in range(1000):
        cand = _smooth_random_spectrum(rng, spec.bands)
        if all(sad(cand, s) > 10.0 for s in sigs):
            sigs.append(cand)
        if len(sigs) == spec.p:
            break
    else:
        raise NumericalError(
            f"could not draw {spec.p} endmembers with pairwise SAD > 10 deg "
            f"after 1000 tries"
        )
    E = np.stack(sigs, axis=1)

    fields = rng.standard_normal((spec.p, spec.height, spec.width))
    fields = np.stack(
        [ndimage.gaussian_filter(f, sigma=spec.smoothness, mode="reflect")
         for f in fields]
    )
    fields = fields / max(fields.std(), 1e-12)
    logits = fields / spec.dirichlet_alpha
    logits -= logits.max(axis=0, keepdims=True)
    A = np.exp(logits)
    A /= A.sum(axis=0, keepdims=True)

    Y = E @ A.reshape(spec.p, -1)
    if math.isinf(spec.snr_db):
        noisy = Y
    else:
        noise = rng.standard_normal(Y.shape)
        # Scale so the realized SNR equals the request exactly.
        target_noise_power = np.mean(Y ** 2) / (10 ** (spec.snr_db / 10))
        noise *= math.sqrt(target_noise_power / np.mean(noise ** 2))
        # Clip into the physical range; endmembers live in a sub-interval of
        # [0, 1] so clipping is rare and barely moves the realized SNR.
        noisy = np.clip(Y + noise, 0.0, 1.0)

    cube = HyperCube(
        data=noisy.reshape(spec.bands, spec.height, spec.width).astype(np.float32)
    )
    endmembers = EndmemberMatrix(signatures=E)
    stack = AbundanceStack(data=A.astype(np.float32), strict_simplex=True)
    return cube, endmembers, stack


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def sad(u: np.ndarray, v: np.ndarray) -> float:
    """Spectral angle between two spectra, in degrees."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise HypersynthError("spectral angle undefined for zero vector")
    c = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise HypersynthError("rmse: shape mismatch")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise HypersynthError("psnr: shape mismatch")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(peak ** 2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise HypersynthError("ssim: expects two single-channel fields of equal shape")
    win = _gaussian_window()
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise HypersynthError("ssim: fields must be at least 11x11")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    def filt(x):
        return signal.convolve2d(x, win, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Endmember matching
# ---------------------------------------------------------------------------

def _sad_matrix(est: EndmemberMatrix, truth: EndmemberMatrix) -> np.ndarray:
    p = truth.count
    M = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            M[i, j] = sad(est.signatures[:, i], truth.signatures[:, j])
    return M


def match_endmembers(est: EndmemberMatrix, truth: EndmemberMatrix,
                     method: str = "auto") -> Tuple[List[int], List[float]]:
    """Minimum-total-SAD assignment of estimated columns to truth columns.

    Returns (perm, sads) where perm[j] is the estimated column matched to
    truth column j, and sads[j] the angle of that pair. Exhaustive search for
    p <= 6, Hungarian assignment otherwise (or on request).
    """
    if est.count != truth.count:
        raise HypersynthError("endmember count mismatch")
    p = truth.count
    M = _sad_matrix(est, truth)
    if method == "exhaustive" or (method == "auto" and p <= 6):
        best, best_perm = math.inf, None
        for perm in itertools.permutations(range(p)):
            total = sum(M[perm[j], j] for j in range(p))
            if total < best:
                best, best_perm = total, perm
        perm = list(best_perm)
    else:
        rows, cols = linear_sum_assignment(M)
        perm = [0] * p
        for r, c in zip(rows, cols):
            perm[c] = r
    return perm, [float(M[perm[j], j]) for j in range(p)]


def apply_permutation(stack: AbundanceStack, perm: Sequence[int]) -> AbundanceStack:
    """Reorder abundance channels so channel j corresponds to truth column j."""
    return AbundanceStack(data=stack.data[list(perm)],
                          strict_simplex=stack.strict_simplex)


def recovery_report(est_endmembers: EndmemberMatrix, est_abund: AbundanceStack,
                    truth_endmembers: EndmemberMatrix,
                    truth_abund: AbundanceStack) -> EvalReport:
    """Full recovery scorecard after permutation matching."""
    perm, sads = match_endmembers(est_endmembers, truth_endmembers)
    matched = apply_permutation(est_abund, perm)
    report = EvalReport(
        matched_permutation=perm,
        sad_degrees=sads,
        abundance_rmse=rmse(matched.data, truth_abund.data),
    )
    psnrs, ssims = [], []
    for j in range(truth_abund.channels):
        psnrs.append(psnr(matched.data[j], truth_abund.data[j]))
        if truth_abund.height >= 11 and truth_abund.width >= 11:
            ssims.append(ssim(matched.data[j], truth_abund.data[j]))
    report.psnr_per_channel = psnrs
    report.ssim_per_channel = ssims or None
    # Channel stats reuse the distribution fields.
    _fill_channel_stats(report, [Patch((0, 0), matched.data)],
                        [Patch((0, 0), truth_abund.data)])
    return report


# ---------------------------------------------------------------------------
# Sample-set statistics
# ---------------------------------------------------------------------------

def _downsample(patch_data: np.ndarray, target: int = 8) -> np.ndarray:
    p, h, w = patch_data.shape
    fh, fw = max(1, h // target), max(1, w // target)
    hh, ww = (h // fh) * fh, (w // fw) * fw
    x = patch_data[:, :hh, :ww].reshape(p, hh // fh, fh, ww // fw, fw)
    return x.mean(axis=(2, 4)).ravel()


def _fill_channel_stats(report: EvalReport, generated: Sequence[Patch],
                        reference: Sequence[Patch]) -> None:
    gen = np.stack([pt.data for pt in generated])
    ref = np.stack([pt.data for pt in reference])
    gm = gen.mean(axis=(0, 2, 3))
    rm = ref.mean(axis=(0, 2, 3))
    gv = gen.var(axis=(0, 2, 3))
    rv = ref.var(axis=(0, 2, 3))
    report.channel_mean_generated = [float(x) for x in gm]
    report.channel_mean_reference = [float(x) for x in rm]
    report.channel_var_generated = [float(x) for x in gv]
    report.channel_var_reference = [float(x) for x in rv]
    report.mean_gap = [float(abs(g - r)) for g, r in zip(gm, rm)]
    report.var_ratio = [float(g / r) if r > 0 else math.inf for g, r in zip(gv, rv)]


def sample_statistics(generated: Sequence[Patch],
                      reference: Sequence[Patch]) -> EvalReport:
    """Distribution comparison between a generated and a reference patch set."""
    if not generated or not reference:
        raise HypersynthError("sample_statistics needs non-empty patch sets")
    if generated[0].channels != reference[0].channels:
        raise HypersynthError("channel count mismatch between sets")
    report = EvalReport()
    _fill_channel_stats(report, generated, reference)

    violations = np.concatenate(
        [np.abs(pt.data.sum(axis=0) - 1.0).ravel() for pt in generated]
    )
    report.sum_violation_quantiles = {
        "q25": float(np.quantile(violations, 0.25)),
        "median": float(np.quantile(violations, 0.5)),
        "q75": float(np.quantile(violations, 0.75)),
        "max": float(violations.max()),
    }

    ref_vecs = np.stack([_downsample(pt.data) for pt in reference])
    dists = []
    for pt in generated:
        v = _downsample(pt.data)
        dists.append(np.min(np.linalg.norm(ref_vecs - v[None, :], axis=1)))
    report.mean_nn_distance = float(np.mean(dists))
    return report
