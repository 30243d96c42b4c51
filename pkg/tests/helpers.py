"""Small models and batches shared by the unit tests."""

import numpy as np

from modbal.data import Batch, DataConfig
from modbal.models import MODALITIES, ModelConfig, MultiModalModel

SMALL_DIMS = {"R": 6, "L": 5, "M": 4, "W": 3}


def small_model(fusion="concat", seed=0, joints=4, dims=None):
    cfg = ModelConfig(fusion=fusion, feature_dim=8, hidden=(10,), input_dims=dict(dims or SMALL_DIMS),
                      joints=joints, attn_ff_dim=12)
    return MultiModalModel(cfg, seed=seed)


def random_batch(rng, batch=6, joints=4, dims=None):
    dims = dims or SMALL_DIMS
    inputs = {m: rng.normal(size=(batch, dims[m])) for m in MODALITIES}
    return Batch(inputs, rng.normal(size=(batch, joints, 3)) * 50, np.arange(batch))


def small_data_config(**kw):
    base = dict(n_samples=200, joints=4, latent_dim=6, input_dims=dict(SMALL_DIMS), seed=0)
    base.update(kw)
    return DataConfig(**base)


def small_experiment(epochs=3, window=2, seed=0, fusion="concat", **data_kw):
    """A seconds-scale experiment on the small synthetic profile."""
    from modbal.config import ExperimentConfig

    cfg = ExperimentConfig()
    cfg.data = small_data_config(seed=seed, **data_kw)
    cfg.model.fusion, cfg.model.feature_dim, cfg.model.hidden, cfg.model.attn_ff_dim = fusion, 8, (10,), 12
    cfg.run.epochs, cfg.run.batch_size, cfg.run.seed, cfg.run.log_every = epochs, 32, seed, 0
    cfg.balance.window_epochs, cfg.balance.fim_sample_size = window, 16
    return cfg

# PASS/FAIL lines from the acceptance gate, printed in the terminal summary
ACCEPTANCE = []
