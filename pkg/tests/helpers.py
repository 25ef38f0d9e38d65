"""Small-model fixtures shared by the training, checkpoint and CLI tests."""

from __future__ import annotations

from functools import lru_cache

from sgan.losses import LossWeights
from sgan.networks import DiscriminatorConfig, GeneratorConfig
from sgan.phantom import PhantomParams, generate_phantom
from sgan.training import Normalizer, SGANModel, TrainConfig

TINY_G = GeneratorConfig(base_width=4, n_residual_blocks=2)
TINY_D = DiscriminatorConfig(base_width=4)
TINY_PHANTOM = PhantomParams(size=32, seed=3)


@lru_cache(maxsize=None)
def tiny_samples(n: int = 8):
    return tuple(generate_phantom(TINY_PHANTOM, i) for i in range(n))


def tiny_model(seed: int = 0, weights: LossWeights = LossWeights(), epochs: int = 4, samples=None) -> SGANModel:
    samples = samples or tiny_samples()
    cfg = TrainConfig(total_epochs=epochs, decay_start_epoch=epochs // 2, batch_size=4, seed=seed)
    return SGANModel.create(TINY_G, TINY_D, weights, cfg, Normalizer.fit(samples))


def tiny_arrays(model: SGANModel, samples=None):
    samples = samples or tiny_samples()
    return model.normalizer.inputs(samples), model.normalizer.targets(samples)
