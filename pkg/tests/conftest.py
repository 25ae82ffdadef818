"""Shared fixtures: oracle scenes and the blind-unmixing runs that several
test modules score. Session-scoped so each expensive run happens once."""

import numpy as np
import pytest
import torch

from hypersynth import synth_eval as se
from hypersynth.unmix_dl import AeConfig, ae_train
from hypersynth.unmix_ls import LsConfig, alternating_minimize
from hypersynth.unmix_st import StConfig, gibbs_unmix

torch.set_num_threads(1)

# Scene and solver settings used by both the module tests and the acceptance
# suite. 64x64 pixels, 3 materials, 32 bands, 30 dB noise.
SCENE30 = se.SceneSpec(height=64, width=64, p=3, bands=32,
                       dirichlet_alpha=0.2, snr_db=30.0, seed=1)
LS_CFG = LsConfig(endmember_count=3, xi=0.02, gamma=1e-3,
                  max_outer_iters=50, inner_iters=10, seed=0)
DL_CFG = AeConfig(endmember_count=3, hidden_widths=(64, 32), epochs=300,
                  batch_size=256, learning_rate=3e-3, decoder_lr_factor=0.01,
                  seed=0)
ST_CFG = StConfig(endmember_count=3, noise_sigma="estimate",
                  n_samples=60, burn_in=30, seed=0)


@pytest.fixture(scope="session")
def scene30():
    return se.generate_scene(SCENE30)


@pytest.fixture(scope="session")
def scene_small():
    """Tiny noiseless scene for fast solver checks."""
    return se.generate_scene(
        se.SceneSpec(height=16, width=16, p=3, bands=16,
                     dirichlet_alpha=0.3, seed=3))


@pytest.fixture(scope="session")
def ls_result(scene30):
    cube, _, _ = scene30
    return alternating_minimize(cube, LS_CFG)


@pytest.fixture(scope="session")
def dl_trained(scene30):
    cube, _, _ = scene30
    return ae_train(cube, DL_CFG)


@pytest.fixture(scope="session")
def st_result(scene30):
    cube, _, _ = scene30
    return gibbs_unmix(cube, ST_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
