"""Least-squares blind unmixing: geometric endmember initialization,
per-pixel fully constrained least squares (FCLS), and a regularized
alternating minimization with projected-gradient inner updates.

Objective:  0.5*||Y - E A||_F^2 + xi * TV(A) + gamma * vol(E)
with A columns on the probability simplex and E entries in [0, 1].
TV is the anisotropic total variation of each abundance channel; vol is the
mean-centered column spread sum_j ||e_j - mean(e)||^2, penalizing volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import HypersynthError, NumericalError
from .hsi_core import (AbundanceStack, EndmemberMatrix, HyperCube,
                       is_normalized, normalize_cube)


@dataclass(frozen=True)
class LsConfig:
    endmember_count: int
    xi: float = 1e-3
    gamma: float = 1e-3
    max_outer_iters: int = 50
    inner_iters: int = 10
    tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.endmember_count < 2:
            raise HypersynthError("endmember_count must be >= 2")
        if self.xi < 0 or self.gamma < 0:
            raise HypersynthError("regularizer weights must be >= 0")
        if self.tol <= 0:
            raise HypersynthError("tol must be > 0")


@dataclass
class UnmixResult:
    endmembers: EndmemberMatrix
    abundances: AbundanceStack
    objective_trace: List[float] = field(default_factory=list)
    method_tag: str = "LS"


# ---------------------------------------------------------------------------
# Simplex projection
# ---------------------------------------------------------------------------

def simplex_project_columns(M: np.ndarray) -> np.ndarray:
    """Project every column of (p, n) M onto the probability simplex."""
    p = M.shape[0]
    u = -np.sort(-M, axis=0)
    cssv = np.cumsum(u, axis=0) - 1.0
    ind = np.arange(1, p + 1, dtype=M.dtype)[:, None]
    cond = u - cssv / ind > 0
    rho = cond.sum(axis=0)
    theta = cssv[rho - 1, np.arange(M.shape[1])] / rho
    return np.maximum(M - theta[None, :], 0.0)


def simplex_project(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto {x >= 0, sum x = 1}."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise HypersynthError("simplex_project: input must be finite")
    return simplex_project_columns(v[:, None])[:, 0]


# ---------------------------------------------------------------------------
# Geometric initialization (iterated orthogonal-subspace projection)
# ---------------------------------------------------------------------------

def geometric_endmember_init(cube: HyperCube, p: int, seed: int = 0) -> EndmemberMatrix:
    """Pick p pixel spectra by iterated orthogonal-subspace projection.

    First pick the max-norm pixel; each next pick maximizes the residual norm
    after projecting out the span of the picks so far. Deterministic given the
    data; the seed only breaks exact ties.
    """
    if p > cube.bands or p > cube.n_pixels:
        raise HypersynthError("p must not exceed band or pixel count")
    if not is_normalized(cube):
        cube = normalize_cube(cube)
    X = cube.pixels().astype(np.float64)
    scale = max(1.0, float((X ** 2).sum(axis=0).max()))
    R = X.copy()
    picks: List[int] = []
    rng = np.random.default_rng(seed)
    for k in range(p):
        norms = (R ** 2).sum(axis=0)
        best = norms.max()
        if best <= 1e-10 * scale:
            raise NumericalError(
                f"cube is rank-deficient: achieved rank {k}, requested {p}"
            )
        ties = np.flatnonzero(norms >= best * (1 - 1e-12))
        j = int(ties[0]) if len(ties) == 1 else int(rng.choice(ties))
        picks.append(j)
        q = R[:, j] / np.linalg.norm(R[:, j])
        R -= np.outer(q, q @ R)
    E = np.clip(X[:, picks], 0.0, 1.0)
    return EndmemberMatrix(signatures=E)


# ---------------------------------------------------------------------------
# Fully constrained least squares
# ---------------------------------------------------------------------------

def fcls_solve(y: np.ndarray, E: EndmemberMatrix, kkt_tol: float = 1e-8) -> np.ndarray:
    """Solve argmin ||y - E a||^2 s.t. a >= 0, sum a = 1 by an active-set
    method on the equality-constrained KKT system."""
    A = E.signatures.astype(np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    C, p = A.shape
    if np.linalg.matrix_rank(A) < p:
        raise NumericalError("endmember matrix is rank-deficient")
    if p == 1:
        return np.array([1.0])
    G = A.T @ A
    b = A.T @ y

    passive = np.ones(p, dtype=bool)
    a = np.full(p, 1.0 / p)
    lam = 0.0
    for _ in range(4 * p * p + 20):
        idx = np.flatnonzero(passive)
        k = len(idx)
        M = np.zeros((k + 1, k + 1))
        M[:k, :k] = G[np.ix_(idx, idx)]
        M[:k, k] = 1.0
        M[k, :k] = 1.0
        rhs = np.concatenate([b[idx], [1.0]])
        sol = np.linalg.solve(M, rhs)
        a_p, lam = sol[:k], sol[k]
        if a_p.min() < -1e-12:
            # Deactivate the most negative coordinate.
            passive[idx[np.argmin(a_p)]] = False
            continue
        a = np.zeros(p)
        a[idx] = np.maximum(a_p, 0.0)
        # Dual feasibility on the active set: mu_j = g_j + lam >= 0.
        g = G @ a - b
        mu = g + lam
        active = np.flatnonzero(~passive)
        if len(active) and mu[active].min() < -kkt_tol:
            passive[active[np.argmin(mu[active])]] = True
            continue
        break
    else:
        raise NumericalError("FCLS active-set iteration did not converge")

    a = a / a.sum()
    g = G @ a - b
    lam = -g[a > 1e-12].mean() if np.any(a > 1e-12) else lam
    kkt = max(abs(a.sum() - 1.0),
              float(np.max(np.abs(g + lam) * (a > 1e-12))))
    if kkt > kkt_tol:
        raise NumericalError(f"FCLS KKT residual {kkt:.2e} above tolerance")
    return a


def fcls_stack(cube: HyperCube, E: EndmemberMatrix) -> AbundanceStack:
    """Per-pixel FCLS over a whole cube."""
    X = cube.pixels()
    A = np.empty((E.count, X.shape[1]))
    for s in range(X.shape[1]):
        A[:, s] = fcls_solve(X[:, s], E)
    return AbundanceStack(
        data=A.reshape(E.count, cube.height, cube.width).astype(np.float32),
        strict_simplex=True,
    )


# ---------------------------------------------------------------------------
# Regularized alternating minimization
# ---------------------------------------------------------------------------

def _tv_value(A3: np.ndarray) -> float:
    return float(np.abs(np.diff(A3, axis=1)).sum() +
                 np.abs(np.diff(A3, axis=2)).sum())


def _tv_subgrad(A3: np.ndarray) -> np.ndarray:
    g = np.zeros_like(A3)
    dv = np.sign(np.diff(A3, axis=1))
    g[:, 1:, :] += dv
    g[:, :-1, :] -= dv
    dh = np.sign(np.diff(A3, axis=2))
    g[:, :, 1:] += dh
    g[:, :, :-1] -= dh
    return g


def _objective(Y, E, A3, xi, gamma):
    A = A3.reshape(A3.shape[0], -1)
    resid = Y - E @ A
    f = 0.5 * float((resid ** 2).sum())
    if xi > 0:
        f += xi * _tv_value(A3)
    if gamma > 0:
        f += gamma * float(((E - E.mean(axis=1, keepdims=True)) ** 2).sum())
    return f


def _pg_descend(x, grad_fn, obj_fn, project, iters, step):
    """Projected gradient with step-halving; accepts only decreasing moves.

    Returns (x, step); the returned step carries momentum between calls.
    """
    f0 = obj_fn(x)
    for _ in range(iters):
        g = grad_fn(x)
        s = step
        while True:
            x_new = project(x - s * g)
            f1 = obj_fn(x_new)
            if f1 <= f0 - 1e-15:
                x, f0, step = x_new, f1, min(s * 1.5, 1e6)
                break
            s *= 0.5
            if s < 1e-15:
                return x, step
    return x, step


def alternating_minimize(cube: HyperCube, cfg: LsConfig,
                         init_endmembers: Optional[EndmemberMatrix] = None,
                         init_abundances: Optional[AbundanceStack] = None,
                         update_endmembers: bool = True) -> UnmixResult:
    """Alternating projected-gradient minimization of the regularized
    reconstruction objective. The objective trace is non-increasing by
    construction (moves are accepted only when they decrease it)."""
    if not is_normalized(cube):
        raise HypersynthError("alternating_minimize requires a normalized cube")
    p = cfg.endmember_count
    Y = cube.pixels().astype(np.float64)
    h, w = cube.height, cube.width

    E = (init_endmembers or geometric_endmember_init(cube, p, cfg.seed)) \
        .signatures.astype(np.float64)
    if init_abundances is not None:
        A3 = init_abundances.data.astype(np.float64)
    else:
        A3 = fcls_stack(cube, EndmemberMatrix(signatures=E)) \
            .data.astype(np.float64)

    xi, gamma = cfg.xi, cfg.gamma
    trace = [_objective(Y, E, A3, xi, gamma)]
    lip_a = max(float(np.linalg.norm(E.T @ E, 2)), 1e-9)
    step_a = 1.0 / lip_a
    step_e = 1.0

    for _ in range(cfg.max_outer_iters):
        # Abundance update: projected gradient on the simplex.
        def grad_a(A3v):
            A = A3v.reshape(p, -1)
            g = (E.T @ (E @ A - Y)).reshape(A3v.shape)
            if xi > 0:
                g = g + xi * _tv_subgrad(A3v)
            return g

        def proj_a(A3v):
            flat = simplex_project_columns(A3v.reshape(p, -1))
            return flat.reshape(A3v.shape)

        A3, step_a = _pg_descend(
            A3, grad_a, lambda x: _objective(Y, E, x, xi, gamma),
            proj_a, cfg.inner_iters, step_a)

        if update_endmembers:
            A = A3.reshape(p, -1)

            def grad_e(Ev):
                g = (Ev @ A - Y) @ A.T
                if gamma > 0:
                    g = g + 2 * gamma * (Ev - Ev.mean(axis=1, keepdims=True))
                return g

            E, step_e = _pg_descend(
                E, grad_e, lambda x: _objective(Y, x, A3, xi, gamma),
                lambda x: np.clip(x, 0.0, 1.0), cfg.inner_iters, step_e)

        f = _objective(Y, E, A3, xi, gamma)
        if f > 10 * trace[0] + 1e-12:
            raise NumericalError("alternating minimization diverged")
        prev = trace[-1]
        trace.append(f)
        if prev - f < cfg.tol * max(abs(prev), 1e-12):
            break

    # Guard against a clamp driving a column to zero everywhere.
    for j in range(p):
        if not E[:, j].any():
            E[:, j] = 1e-6
    A3 = simplex_project_columns(A3.reshape(p, -1)).reshape(A3.shape)
    return UnmixResult(
        endmembers=EndmemberMatrix(signatures=E),
        abundances=AbundanceStack(data=A3.astype(np.float32), strict_simplex=True),
        objective_trace=trace,
        method_tag="LS",
    )
