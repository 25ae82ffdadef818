"""Statistical unmixer: Metropolis-within-Gibbs sampling of the posterior
factorization likelihood * abundance-prior * endmember-prior.

Likelihood: isotropic Gaussian residual with deviation noise_sigma.
Abundance prior: per-pixel Dirichlet(alpha * 1). Endmember prior: uniform on
the unit box. Abundance moves use Dirichlet random-walk proposals with the
full Metropolis-Hastings correction (the proposal is asymmetric); endmember
entries are Gibbs-sampled from their conditional Gaussian truncated to [0, 1].
Point estimates are posterior means over the kept samples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np
from scipy.special import gammaln
from scipy.stats import truncnorm

from .errors import HypersynthError, NumericalError
from .hsi_core import AbundanceStack, EndmemberMatrix, HyperCube, is_normalized
from .unmix_ls import (UnmixResult, fcls_stack, geometric_endmember_init,
                       simplex_project_columns)

_PROPOSAL_FLOOR = 0.05     # additive concentration, keeps proposals proper
_ABUND_FLOOR = 1e-12


@dataclass(frozen=True)
class StConfig:
    endmember_count: int
    noise_sigma: Union[float, str] = 0.01   # numeric or "estimate"
    dirichlet_alpha: float = 1.0
    n_samples: int = 200
    burn_in: int = 100
    seed: int = 0
    proposal_concentration: float = 200.0   # kappa of the Dirichlet random walk

    def __post_init__(self):
        if self.endmember_count < 2:
            raise HypersynthError("endmember_count must be >= 2")
        if self.dirichlet_alpha <= 0:
            raise HypersynthError("dirichlet_alpha must be > 0")
        if not self.burn_in < self.n_samples:
            raise HypersynthError("burn_in must be < n_samples")
        if isinstance(self.noise_sigma, str) and self.noise_sigma != "estimate":
            raise HypersynthError("noise_sigma must be a float or 'estimate'")


def _resolved_sigma(cfg: StConfig) -> float:
    if isinstance(cfg.noise_sigma, str):
        raise HypersynthError("noise_sigma has not been resolved to a number")
    if cfg.noise_sigma <= 0:
        raise HypersynthError("noise_sigma must be > 0")
    return float(cfg.noise_sigma)


def neg_log_posterior(Y: np.ndarray, E: np.ndarray, A: np.ndarray,
                      cfg: StConfig) -> float:
    """Negative log posterior up to an additive constant.

    ||Y - EA||_F^2 / (2 sigma^2) - (alpha - 1) * sum log A. The Dirichlet and
    box-prior normalizing constants are dropped; for alpha = 1 the prior term
    is exactly zero.
    """
    sigma = _resolved_sigma(cfg)
    A = np.asarray(A, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if A.min() < -1e-9 or np.max(np.abs(A.sum(axis=0) - 1.0)) > 1e-6:
        raise HypersynthError("abundances must lie on the simplex")
    if E.min() < -1e-9 or E.max() > 1 + 1e-9:
        raise HypersynthError("endmembers must lie in [0, 1]")
    resid = Y - E @ A
    value = float((resid ** 2).sum()) / (2 * sigma ** 2)
    if cfg.dirichlet_alpha != 1.0:
        value -= (cfg.dirichlet_alpha - 1.0) * float(
            np.log(np.maximum(A, _ABUND_FLOOR)).sum())
    return value


def _dirichlet_logpdf(x: np.ndarray, conc: np.ndarray) -> np.ndarray:
    """Columnwise log density of Dirichlet(conc) at x; both (p, S)."""
    return (((conc - 1.0) * np.log(x)).sum(axis=0)
            + gammaln(conc.sum(axis=0)) - gammaln(conc).sum(axis=0))


def gibbs_unmix(cube: HyperCube, cfg: StConfig,
                init_endmembers: Optional[EndmemberMatrix] = None,
                sample_endmembers: bool = True,
                diagnostics: Optional[List[dict]] = None) -> UnmixResult:
    """Run the chain and return posterior-mean endmembers and abundances.

    ``init_endmembers`` fixes the starting endmembers (defaults to the
    geometric picks); ``sample_endmembers=False`` freezes them for the whole
    chain. ``diagnostics``, if a list, collects per-sweep Metropolis internals
    for detailed-balance checks.
    """
    if not is_normalized(cube):
        raise HypersynthError("gibbs_unmix requires a normalized cube")
    p = cfg.endmember_count
    Y = cube.pixels().astype(np.float64)
    S = Y.shape[1]
    rng = np.random.default_rng(cfg.seed)

    E = (init_endmembers or geometric_endmember_init(cube, p, cfg.seed)) \
        .signatures.astype(np.float64)
    A = fcls_stack(cube, EndmemberMatrix(signatures=E)) \
        .pixels().astype(np.float64)
    A = np.maximum(A, _ABUND_FLOOR)
    A /= A.sum(axis=0, keepdims=True)

    if isinstance(cfg.noise_sigma, str):
        resid = Y - E @ A
        cfg = dataclasses.replace(
            cfg, noise_sigma=max(float(np.sqrt(np.mean(resid ** 2))), 1e-3))
    sigma = _resolved_sigma(cfg)
    alpha = cfg.dirichlet_alpha
    kappa = cfg.proposal_concentration

    sum_A = np.zeros_like(A)
    sum_E = np.zeros_like(E)
    trace: List[float] = []
    kept = 0
    burn_accept = []

    resid = Y - E @ A
    ssq_cur = (resid ** 2).sum(axis=0)

    for sweep in range(cfg.n_samples):
        # --- abundance sweep: vectorized Metropolis over all pixels ---
        conc_fwd = kappa * A + _PROPOSAL_FLOOR
        prop = rng.standard_gamma(conc_fwd)
        prop = np.maximum(prop, _ABUND_FLOOR)
        prop /= prop.sum(axis=0, keepdims=True)

        ssq_prop = ((Y - E @ prop) ** 2).sum(axis=0)
        delta_nlp = (ssq_prop - ssq_cur) / (2 * sigma ** 2)
        if alpha != 1.0:
            delta_nlp -= (alpha - 1.0) * (np.log(prop) - np.log(A)).sum(axis=0)

        conc_rev = kappa * prop + _PROPOSAL_FLOOR
        log_q_corr = (_dirichlet_logpdf(A, conc_rev)
                      - _dirichlet_logpdf(prop, conc_fwd))
        log_alpha = -delta_nlp + log_q_corr
        log_u = np.log(rng.uniform(size=S))
        accept = log_u < log_alpha

        if diagnostics is not None:
            diagnostics.append({
                "delta_nlp": delta_nlp.copy(),
                "log_q_corr": log_q_corr.copy(),
                "log_u": log_u.copy(),
                "accepted": accept.copy(),
            })
        A[:, accept] = prop[:, accept]
        ssq_cur[accept] = ssq_prop[accept]
        rate = float(accept.mean())
        if sweep < cfg.burn_in:
            burn_accept.append(rate)
        if sweep == cfg.burn_in - 1 and burn_accept:
            if float(np.mean(burn_accept)) < 0.01:
                raise NumericalError(
                    f"chain failed to mix: acceptance rate "
                    f"{np.mean(burn_accept):.4f} over burn-in"
                )

        # --- endmember sweep: per-entry truncated-Gaussian Gibbs ---
        if sample_endmembers:
            R = Y - E @ A
            row_ssq = (A ** 2).sum(axis=1)
            for j in range(p):
                s = row_ssq[j]
                if s <= 0:
                    continue
                sd = sigma / np.sqrt(s)
                for c in range(E.shape[0]):
                    r_c = R[c] + E[c, j] * A[j]
                    m = float(r_c @ A[j]) / s
                    lo, hi = (0.0 - m) / sd, (1.0 - m) / sd
                    e_new = float(truncnorm.rvs(lo, hi, loc=m, scale=sd,
                                                random_state=rng))
                    R[c] = r_c - e_new * A[j]
                    E[c, j] = e_new
            ssq_cur = (R ** 2).sum(axis=0)

        if sweep >= cfg.burn_in:
            sum_A += A
            sum_E += E
            kept += 1
            trace.append(neg_log_posterior(Y, E, A, cfg))

    mean_A = simplex_project_columns(sum_A / kept)
    mean_E = np.clip(sum_E / kept, 0.0, 1.0)
    for j in range(p):
        if not mean_E[:, j].any():
            mean_E[:, j] = 1e-6
    h, w = cube.height, cube.width
    return UnmixResult(
        endmembers=EndmemberMatrix(signatures=mean_E),
        abundances=AbundanceStack(data=mean_A.reshape(p, h, w).astype(np.float32),
                                  strict_simplex=True),
        objective_trace=trace,
        method_tag="ST",
    )
