"""Alternating discriminator / generator updates, schedules and normalisation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import LossWeights, adversarial_loss_d, adversarial_loss_g, reconstruction_loss, total_generator_loss
from .networks import DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet
from .optim import Adam
from .phantom import SamplePair
from .steerable import FilterBank, build_filter_bank, steerable_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_FIELDS = ("d_loss", "g_adv", "g_rec", "g_steer", "g_total")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    total_epochs: int = 50
    decay_start_epoch: int = 30
    batch_size: int = 4
    seed: int = 0
    adversarial_mode: str = "non_saturating"
    filter_count: int = 20
    filter_size: int = 5
    filter_sigma: float = 1.0

    def __post_init__(self):
        if not 0 <= self.decay_start_epoch < self.total_epochs:
            raise ValueError("decay_start_epoch must be smaller than total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``decay_start_epoch``, then linear down to 0 at ``total_epochs``."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    if epoch <= cfg.decay_start_epoch:
        return cfg.learning_rate
    return cfg.learning_rate * (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.decay_start_epoch)


# -- normalisation ------------------------------------------------------------


def normalize_volume(images: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Z-score a stack of slices with one mean/std for the whole stack."""
    v = np.asarray(images, dtype=np.float64)
    mean, std = float(v.mean()), float(v.std())
    if std == 0.0:
        raise ValueError("cannot normalise a constant stack (std = 0)")
    return (v - mean) / std, (mean, std)


def denormalize_volume(images: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return np.asarray(images) * std + mean


@dataclass(frozen=True)
class Normalizer:
    """Stack statistics per channel.

    Inputs are z-scored. The target is z-scored and then divided by
    ``target_scale`` (its largest absolute z-score on the training stack) so
    that it fits the generator's tanh range.
    """

    t1: tuple[float, float]
    t2: tuple[float, float]
    mra: tuple[float, float]
    target_scale: float

    @classmethod
    def fit(cls, samples: Sequence[SamplePair]) -> Normalizer:
        _, s1 = normalize_volume(np.stack([s.t1 for s in samples]))
        _, s2 = normalize_volume(np.stack([s.t2 for s in samples]))
        z, sm = normalize_volume(np.stack([s.mra for s in samples]))
        return cls(s1, s2, sm, float(np.abs(z).max()))

    def inputs(self, samples: Sequence[SamplePair]) -> np.ndarray:
        t1 = (np.stack([s.t1 for s in samples]) - self.t1[0]) / self.t1[1]
        t2 = (np.stack([s.t2 for s in samples]) - self.t2[0]) / self.t2[1]
        return np.stack([t1, t2], axis=1)

    def targets(self, samples: Sequence[SamplePair]) -> np.ndarray:
        z = (np.stack([s.mra for s in samples]) - self.mra[0]) / self.mra[1]
        return (z / self.target_scale)[:, None]

    def restore(self, output: np.ndarray) -> np.ndarray:
        """Generator output back to [0, 1] intensities."""
        return np.clip(denormalize_volume(np.asarray(output) * self.target_scale, self.mra), 0.0, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(tuple(d["t1"]), tuple(d["t2"]), tuple(d["mra"]), float(d["target_scale"]))


# -- model bundle -------------------------------------------------------------


@dataclass
class SGANModel:
    """Everything mutated by training: networks, optimizers, progress counters."""

    G: GeneratorNet
    D: DiscriminatorNet
    opt_g: Adam
    opt_d: Adam
    weights: LossWeights
    train_cfg: TrainConfig
    bank: FilterBank
    normalizer: Normalizer | None = None
    epoch: int = 0  # completed epochs
    step_in_epoch: int = 0
    global_step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        gen_cfg: GeneratorConfig = GeneratorConfig(),
        disc_cfg: DiscriminatorConfig = DiscriminatorConfig(),
        weights: LossWeights = LossWeights(),
        train_cfg: TrainConfig = TrainConfig(),
        normalizer: Normalizer | None = None,
    ) -> SGANModel:
        seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
        G = GeneratorNet(gen_cfg, seed=int(seeds[0].generate_state(1)[0]))
        D = DiscriminatorNet(disc_cfg, seed=int(seeds[1].generate_state(1)[0]))
        hp = dict(lr=train_cfg.learning_rate, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
        bank = build_filter_bank(train_cfg.filter_count, train_cfg.filter_size, train_cfg.filter_sigma)
        return cls(G, D, Adam(G.parameters(), **hp), Adam(D.parameters(), **hp), weights, train_cfg, bank, normalizer)

    def set_lr(self, lr: float) -> None:
        self.opt_g.lr = lr
        self.opt_d.lr = lr


@dataclass(frozen=True)
class StepRecord:
    d_loss: float
    g_adv: float
    g_rec: float
    g_steer: float
    g_total: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in LOSS_FIELDS)


def _set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag


def _finite(name: str, value: Tensor) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise FloatingPointError(f"loss term {name} is not finite ({v})")
    return v


def _term(name: str, compute: Callable[[], Tensor]) -> tuple[Tensor, float]:
    """Evaluate one loss term; any non-finite value is reported under its name."""
    try:
        value = compute()
    except FloatingPointError as exc:
        raise FloatingPointError(f"loss term {name} is not finite: {exc}") from None
    return value, _finite(name, value)


def train_step(model: SGANModel, x: np.ndarray, y: np.ndarray) -> StepRecord:
    """One discriminator update on a detached fake, then one generator update."""
    G, D, w = model.G, model.D, model.weights
    G.train()
    D.train()
    xt, yt = Tensor(x), Tensor(y)

    fake = G(xt)

    model.opt_d.zero_grad()
    d_loss, d_val = _term("d_loss", lambda: adversarial_loss_d(D(xt, yt), D(xt, fake.detach())))
    d_loss.backward()
    model.opt_d.step()

    model.opt_g.zero_grad()
    _set_requires_grad(D.parameters(), False)
    try:
        adv, adv_val = _term("g_adv", lambda: adversarial_loss_g(D(xt, fake), model.train_cfg.adversarial_mode))
        rec, rec_val = _term("g_rec", lambda: reconstruction_loss(yt, fake))
        # the steerable term is still logged when its weight is zero, but kept off the graph
        steer_input = fake if w.steerable > 0 else fake.detach()
        steer, steer_val = _term("g_steer", lambda: steerable_loss(yt, steer_input, model.bank))
        total, total_val = _term("g_total", lambda: total_generator_loss(adv, rec, steer, w))
        record = StepRecord(d_val, adv_val, rec_val, steer_val, total_val)
        total.backward()
    finally:
        _set_requires_grad(D.parameters(), True)
    model.opt_g.step()
    model.global_step += 1
    return record


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for a 1-based epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _fmt(v: float) -> str:
    return repr(float(v))


class LossLog:
    """Per-epoch mean losses written as CSV."""

    header = ("epoch", "lr") + LOSS_FIELDS

    def __init__(self, path: Path | None):
        self.path = path
        if path is not None and not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.header)

    def append(self, epoch: int, lr: float, means: Sequence[float]) -> None:
        if self.path is None:
            return
        with self.path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([epoch, _fmt(lr)] + [_fmt(m) for m in means])

    def truncate_to(self, epoch: int) -> None:
        """Drop rows after ``epoch`` (used when resuming)."""
        if self.path is None or not self.path.exists():
            return
        with self.path.open() as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= epoch]
        with self.path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(keep)


def fit(
    model: SGANModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int | None = None,
    max_steps: int | None = None,
    loss_csv: Path | None = None,
    on_epoch_end: Callable[[SGANModel], None] | None = None,
    on_step: Callable[[SGANModel, StepRecord], None] | None = None,
) -> list[StepRecord]:
    """Train from ``model.epoch`` / ``model.step_in_epoch`` up to ``epochs``.

    ``x``/``y`` are the already-normalised training arrays. ``max_steps``
    stops early (mid-epoch if needed) after that many steps in this call.
    Returns every step record produced.
    """
    cfg = model.train_cfg
    epochs = cfg.total_epochs if epochs is None else epochs
    if epochs > cfg.total_epochs:
        raise ValueError(f"epochs {epochs} exceeds the schedule length {cfg.total_epochs}")
    n = x.shape[0]
    nb = batches_per_epoch(n, cfg.batch_size)
    logger = LossLog(loss_csv)
    records: list[StepRecord] = []
    while model.epoch < epochs:
        e = model.epoch + 1
        lr = lr_at_epoch(e, cfg)
        model.set_lr(lr)
        order = epoch_order(cfg.seed, e, n)
        epoch_records = model.extra.setdefault("epoch_sums", [])
        for b in range(model.step_in_epoch, nb):
            if max_steps is not None and len(records) >= max_steps:
                return records
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            rec = train_step(model, x[idx], y[idx])
            records.append(rec)
            epoch_records.append(rec.as_tuple())
            model.step_in_epoch = b + 1
            if on_step is not None:
                on_step(model, rec)
        means = np.mean(np.asarray(epoch_records), axis=0)
        logger.append(e, lr, means)
        log.info("epoch %d lr %.2e " + " ".join(f"{k} %.4f" for k in LOSS_FIELDS), e, lr, *means)
        model.extra["epoch_sums"] = []
        model.epoch = e
        model.step_in_epoch = 0
        if on_epoch_end is not None:
            on_epoch_end(model)
    return records


def synthesize(model: SGANModel, samples: Sequence[SamplePair], batch_size: int = 8) -> list[np.ndarray]:
    """Generated mra images in [0, 1], one per sample, eval-mode batch norm."""
    if model.normalizer is None:
        raise ValueError("model has no input normaliser; it was never fitted to data")
    model.G.eval()
    outs = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            out = model.G(Tensor(model.normalizer.inputs(chunk))).data[:, 0]
            outs.extend(model.normalizer.restore(out))
    model.G.train()
    return outs


def config_from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)
