import numpy as np
import pytest
from mpmath import mp, mpf

from hypersynth import synth_eval as se
from hypersynth.errors import HypersynthError, NumericalError
from hypersynth.unmix_ls import fcls_stack
from hypersynth.unmix_st import StConfig, gibbs_unmix, neg_log_posterior


def test_config_validation():
    with pytest.raises(HypersynthError):
        StConfig(endmember_count=1)
    with pytest.raises(HypersynthError):
        StConfig(endmember_count=3, dirichlet_alpha=0.0)
    with pytest.raises(HypersynthError):
        StConfig(endmember_count=3, n_samples=10, burn_in=10)
    with pytest.raises(HypersynthError):
        StConfig(endmember_count=3, noise_sigma="guess")


# ---------------------------------------------------------------------------
# neg_log_posterior
# ---------------------------------------------------------------------------

def _simplex_cols(rng, p, n):
    A = rng.dirichlet(np.ones(p), size=n).T
    return np.maximum(A, 1e-9) / np.maximum(A, 1e-9).sum(axis=0)


def test_exact_fit_alpha_one_is_zero(rng):
    E = rng.uniform(0.1, 0.9, size=(6, 3))
    A = _simplex_cols(rng, 3, 10)
    Y = E @ A
    cfg = StConfig(endmember_count=3, noise_sigma=0.1, dirichlet_alpha=1.0)
    assert neg_log_posterior(Y, E, A, cfg) == 0.0


def test_doubling_residual_quadruples_likelihood(rng):
    E = rng.uniform(0.1, 0.9, size=(6, 3))
    A = _simplex_cols(rng, 3, 10)
    R = rng.normal(size=(6, 10))
    cfg = StConfig(endmember_count=3, noise_sigma=0.05, dirichlet_alpha=1.0)
    v1 = neg_log_posterior(E @ A + 0.01 * R, E, A, cfg)
    v2 = neg_log_posterior(E @ A + 0.02 * R, E, A, cfg)
    assert v2 == pytest.approx(4 * v1, rel=1e-9)


def test_matches_high_precision_evaluation(rng):
    E = rng.uniform(0.1, 0.9, size=(4, 3))
    A = _simplex_cols(rng, 3, 5)
    Y = E @ A + 0.02 * rng.normal(size=(4, 5))
    cfg = StConfig(endmember_count=3, noise_sigma=0.05, dirichlet_alpha=0.7)
    got = neg_log_posterior(Y, E, A, cfg)
    mp.dps = 50
    resid = Y - E @ A
    ssq = mpf(0)
    for v in resid.ravel():
        ssq += mpf(repr(float(v))) ** 2
    expect = ssq / (2 * mpf("0.05") ** 2)
    logsum = mpf(0)
    from mpmath import log
    for v in A.ravel():
        logsum += log(mpf(repr(float(v))))
    expect -= (mpf("0.7") - 1) * logsum
    assert abs(got - float(expect)) < 1e-9 * abs(float(expect))


def test_rejects_off_simplex(rng):
    E = rng.uniform(0.1, 0.9, size=(4, 3))
    cfg = StConfig(endmember_count=3, noise_sigma=0.05)
    A = np.full((3, 5), 0.5)
    with pytest.raises(HypersynthError, match="simplex"):
        neg_log_posterior(E @ A, E, A, cfg)


def test_rejects_out_of_box_endmembers(rng):
    A = _simplex_cols(rng, 3, 5)
    E = np.full((4, 3), 1.5)
    cfg = StConfig(endmember_count=3, noise_sigma=0.05)
    with pytest.raises(HypersynthError, match="0, 1"):
        neg_log_posterior(E @ A, E, A, cfg)


# ---------------------------------------------------------------------------
# Chain behavior
# ---------------------------------------------------------------------------

def test_metropolis_rule_consistency(scene_small):
    # Every recorded decision must satisfy: accepted iff
    # log(u) < -delta_nlp + log_q_corr (asymmetric-proposal correction).
    cube, E, _ = scene_small
    cfg = StConfig(endmember_count=3, noise_sigma=0.01, n_samples=20,
                   burn_in=5, seed=0)
    diag = []
    gibbs_unmix(cube, cfg, init_endmembers=E, sample_endmembers=False,
                diagnostics=diag)
    assert len(diag) == 20
    checked = 0
    for rec in diag:
        should = rec["log_u"] < -rec["delta_nlp"] + rec["log_q_corr"]
        assert np.array_equal(should, rec["accepted"])
        # No move that increases the posterior by more than -log(u) may pass.
        worse = rec["delta_nlp"] - rec["log_q_corr"] > -rec["log_u"]
        assert not np.any(worse & rec["accepted"])
        checked += int(rec["accepted"].sum())
    assert checked > 0


def test_result_on_simplex(scene_small):
    cube, _, _ = scene_small
    cfg = StConfig(endmember_count=3, noise_sigma=0.01, n_samples=12,
                   burn_in=4, seed=0)
    result = gibbs_unmix(cube, cfg)
    assert result.abundances.strict_simplex
    assert result.method_tag == "ST"
    sums = result.abundances.data.sum(axis=0)
    assert np.abs(sums - 1.0).max() < 1e-6
    E = result.endmembers.signatures
    assert E.min() >= 0 and E.max() <= 1


def test_single_kept_sample(scene_small):
    cube, E, _ = scene_small
    cfg = StConfig(endmember_count=3, noise_sigma=0.01, n_samples=6,
                   burn_in=5, seed=1)
    result = gibbs_unmix(cube, cfg, init_endmembers=E)
    assert len(result.objective_trace) == 1


def test_chain_reproducible(scene_small):
    cube, _, _ = scene_small
    cfg = StConfig(endmember_count=3, noise_sigma=0.01, n_samples=10,
                   burn_in=3, seed=42)
    r1 = gibbs_unmix(cube, cfg)
    r2 = gibbs_unmix(cube, cfg)
    assert np.array_equal(r1.abundances.data, r2.abundances.data)
    assert np.array_equal(r1.endmembers.signatures, r2.endmembers.signatures)
    assert r1.objective_trace == r2.objective_trace


def test_mixing_failure_raises(scene30):
    # An absurdly tight likelihood with wild proposals rejects everything.
    cube, _, _ = scene30
    cfg = StConfig(endmember_count=3, noise_sigma=1e-6,
                   proposal_concentration=1.0, n_samples=20, burn_in=10,
                   seed=0)
    with pytest.raises(NumericalError, match="acceptance rate"):
        gibbs_unmix(cube, cfg)


def test_fixed_endmembers_match_fcls(scene_small):
    # With endmembers frozen at truth and a tight noise model, the posterior
    # mean must sit close to the FCLS point estimate.
    cube, E, _ = scene_small
    cfg = StConfig(endmember_count=3, noise_sigma=0.003,
                   proposal_concentration=400.0, n_samples=120, burn_in=60,
                   seed=0)
    result = gibbs_unmix(cube, cfg, init_endmembers=E,
                         sample_endmembers=False)
    oracle = fcls_stack(cube, E)
    assert np.abs(result.abundances.data - oracle.data).max() < 0.05


def test_blind_recovery_sad(st_result, scene30):
    _, E, _ = scene30
    _, sads = se.match_endmembers(st_result.endmembers, E)
    assert max(sads) < 8.0
