import math

import numpy as np
import pytest

from sgan.losses import LossWeights
from sgan.training import (
    LossLog,
    Normalizer,
    TrainConfig,
    batches_per_epoch,
    denormalize_volume,
    epoch_order,
    fit,
    lr_at_epoch,
    normalize_volume,
    synthesize,
    train_step,
)

from helpers import tiny_arrays, tiny_model, tiny_samples


# -- schedule -----------------------------------------------------------------


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at_epoch(10, cfg) == 2e-4
    assert lr_at_epoch(30, cfg) == 2e-4
    assert lr_at_epoch(40, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at_epoch(50, cfg) == 0.0
    for bad in (0, 51):
        with pytest.raises(ValueError):
            lr_at_epoch(bad, cfg)


def test_lr_schedule_linear_after_decay():
    cfg = TrainConfig()
    vals = [lr_at_epoch(e, cfg) for e in range(30, 51)]
    steps = np.diff(vals)
    np.testing.assert_allclose(steps, -2e-4 / 20, atol=1e-18)


def test_train_config_invariant():
    with pytest.raises(ValueError):
        TrainConfig(total_epochs=10, decay_start_epoch=10)


# -- normalisation ----------------------------------------------------------


def test_normalize_volume_moments_and_round_trip(rng):
    v = 3 + 2 * rng.standard_normal((4, 8, 8))
    z, stats = normalize_volume(v)
    assert abs(z.mean()) < 1e-10 and abs(z.std() - 1) < 1e-10
    np.testing.assert_allclose(denormalize_volume(z, stats), v, atol=1e-10)


def test_normalize_uses_stack_statistics():
    a, b = np.zeros((4, 4)), np.ones((4, 4))
    a[0, 0], b[0, 0] = 1.0, 2.0  # keep each slice non-constant
    z, (mean, _) = normalize_volume(np.stack([a, b]))
    per_slice = [normalize_volume(s)[1][0] for s in (a, b)]
    assert per_slice[0] != per_slice[1]
    assert mean == pytest.approx(np.stack([a, b]).mean())
    assert z[0].mean() < 0 < z[1].mean()


def test_normalize_rejects_constant():
    with pytest.raises(ValueError):
        normalize_volume(np.ones((2, 3, 3)))


def test_normalizer_targets_fit_tanh_and_restore():
    samples = tiny_samples()
    norm = Normalizer.fit(samples)
    y = norm.targets(samples)
    assert np.abs(y).max() == pytest.approx(1.0)
    np.testing.assert_allclose(norm.restore(y[:, 0]), np.stack([s.mra for s in samples]), atol=1e-12)
    assert Normalizer.from_dict(norm.to_dict()) == norm


# -- train_step -------------------------------------------------------------


def test_first_step_losses_finite_and_d_loss_in_band():
    model = tiny_model()
    x, y = tiny_arrays(model)
    rec = train_step(model, x[:4], y[:4])
    assert all(math.isfinite(v) for v in rec.as_tuple())
    assert 0.5 < rec.d_loss < 3.0
    w = model.weights
    assert rec.g_total == pytest.approx(w.adversarial * rec.g_adv + w.reconstruction * rec.g_rec + w.steerable * rec.g_steer)


def test_train_step_deterministic():
    recs = []
    for _ in range(2):
        model = tiny_model(seed=5)
        x, y = tiny_arrays(model)
        recs.append([train_step(model, x[:4], y[:4]).as_tuple() for _ in range(2)])
    assert recs[0] == recs[1]


def test_gradient_flow_isolation(monkeypatch):
    model = tiny_model()
    x, y = tiny_arrays(model)
    g_before = [p.data.copy() for p in model.G.parameters()]
    seen = {}

    d_step, g_step = model.opt_d.step, model.opt_g.step

    def checked_d_step():
        d_step()
        seen["d_after_d_step"] = [p.data.copy() for p in model.D.parameters()]
        seen["g_during_d_step"] = [p.data.copy() for p in model.G.parameters()]

    def checked_g_step():
        seen["g_grads"] = [None if p.grad is None else p.grad.copy() for p in model.G.parameters()]
        seen["g_before_g_step"] = [p.data.copy() for p in model.G.parameters()]
        g_step()

    monkeypatch.setattr(model.opt_d, "step", checked_d_step)
    monkeypatch.setattr(model.opt_g, "step", checked_g_step)
    train_step(model, x[:4], y[:4])

    # the D update leaves G alone
    for a, b in zip(g_before, seen["g_during_d_step"]):
        np.testing.assert_array_equal(a, b)
    # the G update leaves D alone
    for a, p in zip(seen["d_after_d_step"], model.D.parameters()):
        np.testing.assert_array_equal(a, p.data)
    # every G parameter with a nonzero gradient moved
    moved = 0
    for g, before, p in zip(seen["g_grads"], seen["g_before_g_step"], model.G.parameters()):
        if g is not None and np.any(g != 0):
            assert np.any(p.data != before)
            moved += 1
    assert moved == len(model.G.parameters())
    assert all(p.requires_grad for p in model.D.parameters())


def test_baseline_steerable_term_logged_but_inert():
    model = tiny_model(weights=LossWeights.baseline())
    x, y = tiny_arrays(model)
    rec = train_step(model, x[:4], y[:4])
    assert rec.g_steer > 0
    assert rec.g_total == pytest.approx(0.005 * rec.g_adv + 0.8 * rec.g_rec)


def test_non_finite_loss_names_term(monkeypatch):
    import sgan.training as tr

    model = tiny_model()
    x, y = tiny_arrays(model)
    monkeypatch.setattr(tr, "reconstruction_loss", lambda y, y_hat: tr.Tensor(np.nan))
    with pytest.raises(FloatingPointError, match="g_rec"):
        train_step(model, x[:4], y[:4])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_op_names_term(monkeypatch):
    import sgan.training as tr

    model = tiny_model()
    x, y = tiny_arrays(model)
    monkeypatch.setattr(tr, "steerable_loss", lambda a, b, bank: tr.Tensor(1e308) * 1e308)
    with pytest.raises(FloatingPointError, match="g_steer"):
        train_step(model, x[:4], y[:4])


def test_pure_l1_reconstruction_decreases():
    sample = tiny_samples()[0]
    batch = [sample] * 4
    model = tiny_model(weights=LossWeights(0.0, 1.0, 0.0), samples=batch)
    x, y = tiny_arrays(model, batch)
    rec = [train_step(model, x, y).g_rec for _ in range(50)]
    assert all(b < a for a, b in zip(rec, rec[1:]))


# -- epochs, logging, synthesis ---------------------------------------------


def test_epoch_order_depends_only_on_seed_and_epoch():
    np.testing.assert_array_equal(epoch_order(1, 3, 10), epoch_order(1, 3, 10))
    assert not np.array_equal(epoch_order(1, 3, 10), epoch_order(1, 4, 10))
    assert sorted(epoch_order(2, 1, 10)) == list(range(10))
    assert batches_per_epoch(10, 4) == 3


def test_fit_writes_one_row_per_epoch(tmp_path):
    model = tiny_model(epochs=2)
    x, y = tiny_arrays(model)
    recs = fit(model, x, y, loss_csv=tmp_path / "losses.csv")
    rows = (tmp_path / "losses.csv").read_text().splitlines()
    assert rows[0] == "epoch,lr,d_loss,g_adv,g_rec,g_steer,g_total"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]
    assert len(recs) == 4 and model.epoch == 2 and model.global_step == 4
    first = [float(v) for v in rows[1].split(",")[2:]]
    np.testing.assert_allclose(first, np.mean([r.as_tuple() for r in recs[:2]], axis=0), rtol=0, atol=0)


def test_loss_log_truncate(tmp_path):
    log = LossLog(tmp_path / "l.csv")
    for e in range(1, 4):
        log.append(e, 1e-4, [0.0] * 5)
    log.truncate_to(1)
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 2


def test_synthesize_range_and_shape():
    model = tiny_model(epochs=1)
    x, y = tiny_arrays(model)
    fit(model, x, y)
    outs = synthesize(model, tiny_samples()[:3])
    assert len(outs) == 3 and outs[0].shape == (32, 32)
    assert all((o >= 0).all() and (o <= 1).all() for o in outs)
    again = synthesize(model, tiny_samples()[:3])
    assert all(a.tobytes() == b.tobytes() for a, b in zip(outs, again))
