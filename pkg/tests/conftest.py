import numpy as np
import pytest

from emofuse.config import RunConfig
from emofuse.dataio import SyntheticSpec, gen_synthetic


@pytest.fixture
def small_cfg():
    return RunConfig(d_z=8, M=2, C=4, d_p=8, d_h=8, ae_init_scale=0.3, lr=1e-3)


@pytest.fixture
def small_records():
    return gen_synthetic(SyntheticSpec(C=4, d_z=8, m=3, n=2, records=6, inconsistency_rate=0.3, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
