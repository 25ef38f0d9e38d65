"""Adversarial, reconstruction and combined generator objectives."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    adversarial: float = 0.005
    reconstruction: float = 0.8
    steerable: float = 0.145

    def __post_init__(self):
        if min(self.adversarial, self.reconstruction, self.steerable) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def baseline(cls) -> LossWeights:
        """Same weights with the steerable term switched off."""
        return cls(steerable=0.0)


def adversarial_loss_d(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """-mean log D(real) - mean log(1 - D(fake)), computed from logits.

    ``-log sigmoid(l) = softplus(-l)`` and ``-log(1 - sigmoid(l)) = softplus(l)``,
    so no probability is ever materialised.
    """
    if real_logits.shape != fake_logits.shape:
        raise ValueError(f"logit grids differ: {real_logits.shape} vs {fake_logits.shape}")
    return T.add(T.mean(T.softplus(T.neg(real_logits))), T.mean(T.softplus(fake_logits)))


def adversarial_loss_g(fake_logits: Tensor, mode: str = "non_saturating") -> Tensor:
    """Generator adversarial term.

    ``saturating`` is ``mean log(1 - D(fake))``, to be minimised; it flattens
    out when the discriminator is confident. ``non_saturating`` is
    ``-mean log D(fake)``.
    """
    if mode == "non_saturating":
        return T.mean(T.softplus(T.neg(fake_logits)))
    if mode == "saturating":
        return T.neg(T.mean(T.softplus(fake_logits)))
    raise ValueError(f"unknown adversarial mode {mode!r}")


def reconstruction_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Mean absolute difference."""
    if y.shape != y_hat.shape:
        raise ValueError(f"reconstruction_loss: shapes {y.shape} and {y_hat.shape} differ")
    return T.mean(T.abs(T.sub(y_hat, y)))


def total_generator_loss(adv, rec, steer, w: LossWeights) -> Tensor:
    total = T.add(T.scale(T._as_tensor(adv), w.adversarial), T.scale(T._as_tensor(rec), w.reconstruction))
    return T.add(total, T.scale(T._as_tensor(steer), w.steerable))
