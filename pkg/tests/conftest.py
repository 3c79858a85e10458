import numpy as np
import pytest

from cosda.domains import DomainSequenceSpec, make_sequence
from cosda.model import MlpConfig, PretrainConfig, init_classifier, pretrain


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sequence():
    spec = DomainSequenceSpec(samples_per_domain=300, domain_params=[0.0, 30.0, 60.0], seed=3)
    return make_sequence(spec)


@pytest.fixture(scope="session")
def source_model(small_sequence):
    source, _ = small_sequence
    model = init_classifier(MlpConfig([2, 16, 16, 2], init_seed=3))
    pretrain(model, source.train.features, source.train.labels, PretrainConfig(epochs=15),
             np.random.default_rng(3))
    return model
