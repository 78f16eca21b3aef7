import numpy as np
import pytest

from fdp.config import FrmTrainConfig, PhantomConfig, RunConfig
from fdp.volume import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_phantom():
    '''
    A 12 x 32 x 32 phantom: fast, and still deep enough to place lesions.
    '''
    return PhantomConfig(dims=(12, 32, 32), lesion_radius=(2.0, 4.0))


@pytest.fixture
def random_volume(rng):
    def make(dims=(4, 16, 16), mask=False):
        voxels = rng.random(dims)
        bits = rng.random(dims) > 0.5 if mask else None
        return Volume(voxels, mask=bits)
    return make


@pytest.fixture
def small_run(small_phantom):
    return RunConfig(
        phantom=small_phantom,
        frm=FrmTrainConfig(contexts=8, epochs=2, batch_size=8),
        rank=4,
    )


@pytest.fixture
def run_config_file(tmp_path, small_run):
    path = tmp_path / 'run.json'
    small_run.save(path)
    return path
