import numpy as np
import pytest

from evoalign.data import TeacherSpec, generate_synthetic
from evoalign.genome import Genome, LayerGene

SMALL_SHAPE = (3, 16, 16)


def small_teacher() -> Genome:
    # maps 14, 7, 5
    return Genome((LayerGene.conv(3, 1, 64), LayerGene.pool(2), LayerGene.conv(3, 1, 64)), 2, 0x51A11)


@pytest.fixture(scope="session")
def small_spec():
    return TeacherSpec(teacher=small_teacher(), taps=(("V2", 0), ("V4", 1), ("IT", 2)), voxels=12,
                       n_subjects=2, repeats=2, noise_sigma=0.5)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_synthetic(small_spec, n_stimuli=40, input_shape=SMALL_SHAPE, master_seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
