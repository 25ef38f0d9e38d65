import math

import numpy as np
import pytest

from sgan import tensor as T
from sgan.losses import (
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    reconstruction_loss,
    total_generator_loss,
)
from sgan.networks import (
    DiscriminatorConfig,
    DiscriminatorNet,
    GeneratorConfig,
    GeneratorNet,
    ResidualBlock,
    patch_grid_size,
)
from sgan.tensor import Tensor

from oracles import gradcheck, log_sigmoid

SMALL_G = GeneratorConfig(base_width=4, n_residual_blocks=2)
SMALL_D = DiscriminatorConfig(base_width=4)


# -- generator ----------------------------------------------------------------


def test_generator_shape_and_range(rng):
    net = GeneratorNet(GeneratorConfig(base_width=4), seed=0)
    out = net(Tensor(rng.standard_normal((1, 2, 64, 64))))
    assert out.shape == (1, 1, 64, 64)
    assert (np.abs(out.data) < 1).all()


@pytest.mark.parametrize("size", [8, 16, 24, 40])
def test_generator_preserves_size(rng, size):
    out = GeneratorNet(SMALL_G)(Tensor(rng.standard_normal((2, 2, size, size))))
    assert out.shape == (2, 1, size, size)


def test_generator_rejects_non_multiple(rng):
    with pytest.raises(ValueError, match="multiple of 8"):
        GeneratorNet(SMALL_G)(Tensor(rng.standard_normal((1, 2, 20, 16))))


def test_generator_deterministic(rng):
    x = Tensor(rng.standard_normal((2, 2, 16, 16)))
    a, b = GeneratorNet(SMALL_G, seed=3), GeneratorNet(SMALL_G, seed=3)
    a.eval(), b.eval()
    for net in (a, b):  # eval mode needs running stats
        net.train()
        net(x)
        net.eval()
    assert a(x).data.tobytes() == b(x).data.tobytes() == a(x).data.tobytes()


def test_generator_layout():
    net = GeneratorNet(GeneratorConfig(base_width=8))
    kinds = [(type(l.conv).__name__, l.conv.stride, l.norm is not None, l.act) for l in net.layers if hasattr(l, "conv")]
    assert kinds[0] == ("Conv2d", 1, True, "relu")
    assert [k[1] for k in kinds[1:4]] == [2, 2, 2]
    assert all(k[0] == "ConvTranspose2d" for k in kinds[4:7])
    assert kinds[-1] == ("Conv2d", 1, False, "tanh")
    res = [l for l in net.layers if isinstance(l, ResidualBlock)]
    assert len(res) == 9


def test_residual_block_preserves_channels(rng):
    blk = ResidualBlock(6, SMALL_G, np.random.default_rng(0))
    assert blk(Tensor(rng.standard_normal((2, 6, 5, 5)))).shape == (2, 6, 5, 5)


def test_config_invariants():
    with pytest.raises(ValueError):
        GeneratorConfig(n_downsample=2, n_upsample=3)
    assert GeneratorConfig().bottleneck_width == 512


def test_init_statistics():
    net = GeneratorNet(GeneratorConfig(base_width=16), seed=0)
    convs = np.concatenate([p.data.ravel() for n, p in net.named_parameters() if n.endswith("weight")])
    gammas = np.concatenate([p.data.ravel() for n, p in net.named_parameters() if n.endswith("gamma")])
    betas = np.concatenate([p.data.ravel() for n, p in net.named_parameters() if n.endswith("beta")])
    assert abs(convs.mean()) < 1e-3 and abs(convs.std() - 0.02) < 1e-3
    assert abs(gammas.mean() - 1) < 5e-3 and abs(gammas.std() - 0.02) < 5e-3
    assert (betas == 0).all()


# -- discriminator ------------------------------------------------------------


@pytest.mark.parametrize("size,grid", [(64, 6), (32, 2)])
def test_patch_grid(rng, size, grid):
    # 64 -> 32 -> 16 -> 8 -> 7 -> 6 and 32 -> 16 -> 8 -> 4 -> 3 -> 2
    assert patch_grid_size(size) == grid
    d = DiscriminatorNet(SMALL_D)
    out = d(Tensor(rng.standard_normal((2, 2, size, size))), Tensor(rng.standard_normal((2, 1, size, size))))
    assert out.shape == (2, 1, grid, grid)


def test_patch_grid_above_one_from_32():
    # the pinned stack shrinks 16 -> 8 -> 4 -> 2 -> 1 -> 0, so 32 is the smallest usable multiple of 8
    assert patch_grid_size(16) == 0 and patch_grid_size(24) == 1
    for s in range(32, 129, 8):
        assert patch_grid_size(s) > 1


def test_discriminator_too_small_input_errors(rng):
    with pytest.raises(ValueError):
        DiscriminatorNet(SMALL_D)(Tensor(np.zeros((1, 2, 16, 16))), Tensor(np.zeros((1, 1, 16, 16))))


def test_discriminator_logits_unbounded(rng):
    d = DiscriminatorNet(SMALL_D)
    d.layers[-1].conv.weight.data *= 1e3
    out = d(Tensor(rng.standard_normal((1, 2, 32, 32))), Tensor(rng.standard_normal((1, 1, 32, 32))))
    assert np.abs(out.data).max() > 1


def test_discriminator_misaligned(rng):
    with pytest.raises(ValueError, match="aligned"):
        DiscriminatorNet(SMALL_D)(Tensor(np.zeros((1, 2, 32, 32))), Tensor(np.zeros((1, 1, 16, 32))))


# -- losses -----------------------------------------------------------------


def test_adversarial_at_zero_logits():
    z = Tensor(np.zeros((2, 1, 3, 3)))
    assert abs(adversarial_loss_d(z, z).item() - 2 * math.log(2)) <= 1e-12
    assert abs(adversarial_loss_g(z, "saturating").item() - math.log(0.5)) <= 1e-12
    assert abs(adversarial_loss_g(z, "non_saturating").item() - math.log(2)) <= 1e-12


def test_adversarial_limits():
    big = Tensor(np.full((1, 1, 2, 2), 800.0))
    assert adversarial_loss_d(big, -big).item() == 0.0
    assert adversarial_loss_g(big, "non_saturating").item() == 0.0


def test_adversarial_matches_scalar_reference(rng):
    real, fake = 4 * rng.standard_normal((2, 1, 3, 3)), 4 * rng.standard_normal((2, 1, 3, 3))
    ref_d = -np.mean([log_sigmoid(v) for v in real.ravel()]) - np.mean([log_sigmoid(-v) for v in fake.ravel()])
    assert abs(adversarial_loss_d(Tensor(real), Tensor(fake)).item() - ref_d) <= 1e-12
    ref_sat = np.mean([log_sigmoid(-v) for v in fake.ravel()])  # log(1 - sigma(l)) = log sigma(-l)
    ref_ns = -np.mean([log_sigmoid(v) for v in fake.ravel()])
    assert abs(adversarial_loss_g(Tensor(fake), "saturating").item() - ref_sat) <= 1e-12
    assert abs(adversarial_loss_g(Tensor(fake), "non_saturating").item() - ref_ns) <= 1e-12


def test_non_saturating_gradient_is_sigma_minus_one(rng):
    logits = rng.standard_normal(5)
    t = Tensor(logits, requires_grad=True)
    adversarial_loss_g(t, "non_saturating").backward()
    np.testing.assert_allclose(t.grad * 5, 1 / (1 + np.exp(-logits)) - 1, atol=1e-14)
    assert gradcheck(lambda a: adversarial_loss_g(a[0], "non_saturating"), [logits], rng) < 1e-8


def test_unknown_mode():
    with pytest.raises(ValueError):
        adversarial_loss_g(Tensor(np.zeros(2)), "wgan")


def test_reconstruction_examples():
    y = Tensor(np.array([1.0, 1.0]))
    assert reconstruction_loss(y, y).item() == 0.0
    assert reconstruction_loss(y, Tensor(np.array([0.0, 2.0]))).item() == 1.0
    with pytest.raises(ValueError):
        reconstruction_loss(y, Tensor(np.zeros(3)))
    yh = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    reconstruction_loss(y, yh).backward()
    np.testing.assert_array_equal(yh.grad, 0.0)


def test_total_loss_examples():
    one = Tensor(1.0)
    assert total_generator_loss(one, one, one, LossWeights()).item() == pytest.approx(0.95, abs=1e-15)
    assert total_generator_loss(one, one, one, LossWeights(0, 0, 0)).item() == 0.0
    assert total_generator_loss(Tensor(3.0), Tensor(2.0), Tensor(7.0), LossWeights(0, 1, 0)).item() == 2.0


def test_total_loss_linear_in_each_weight(rng):
    adv, rec, steer = (float(v) for v in rng.uniform(0, 2, 3))
    w = LossWeights()
    base = total_generator_loss(Tensor(adv), Tensor(rec), Tensor(steer), w).item()
    doubled = total_generator_loss(Tensor(adv), Tensor(rec), Tensor(steer), LossWeights(w.adversarial, w.reconstruction,
                                                                                        2 * w.steerable)).item()
    assert abs((doubled - base) - w.steerable * steer) <= 1e-12
    for field in ("adversarial", "reconstruction", "steerable"):
        vals = [total_generator_loss(Tensor(adv), Tensor(rec), Tensor(steer), LossWeights(**{**vars(w), field: s})).item()
                for s in (0.0, 1.0, 2.0)]
        assert abs((vals[2] - vals[1]) - (vals[1] - vals[0])) <= 1e-12


def test_weights_defaults_and_baseline():
    w = LossWeights()
    assert (w.adversarial, w.reconstruction, w.steerable) == (0.005, 0.8, 0.145)
    b = LossWeights.baseline()
    assert (b.adversarial, b.reconstruction, b.steerable) == (0.005, 0.8, 0.0)
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)
