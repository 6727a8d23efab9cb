import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from moewaitk.data import Vocab
from moewaitk.model import ModelConfig, Transformer

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vocab():
    return Vocab.build(32)


def tiny_config(**kw):
    base = dict(num_layers=1, d_model=8, num_heads=2, d_ff=8, src_vocab=12, tgt_vocab=12,
                expert_lagging=[1, 3], max_seq_len=10, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    """Default-shaped but tiny model with randomised gates so gated mode is non-trivial."""
    cfg = ModelConfig(num_layers=2, d_model=16, num_heads=4, d_ff=32, src_vocab=40, tgt_vocab=40,
                      expert_lagging=[1, 3, 5, "inf"], max_seq_len=20, dropout=0.1)
    model = Transformer(cfg, seed=3)
    rng = np.random.default_rng(0)
    for name in model.gate_names():
        model.params[name].data[...] = rng.normal(0, 1, model.params[name].data.shape)
    return model
