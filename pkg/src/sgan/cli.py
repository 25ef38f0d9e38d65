"""Command-line entry point: ``sgan <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .evaluation import SegParams, evaluate_test_set
from .experiment import MODES, default_decay_start, run_ablation, weights_for
from .networks import DiscriminatorConfig, GeneratorConfig
from .phantom import Manifest, PhantomParams, build_dataset, load_split, read_pgm, sample_paths, write_pgm
from .steerable import build_filter_bank
from .training import SGANModel, TrainConfig, Normalizer, config_from_dict, fit, synthesize

log = logging.getLogger("sgan")

SECTIONS = {
    "phantom": PhantomParams,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "train": TrainConfig,
    "segmentation": SegParams,
}


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - set(SECTIONS) - {"weights", "mode", "paths"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _section(cfg: dict, name: str, overrides: dict):
    cls = SECTIONS[name]
    values = dict(cfg.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("scales", "n_vessels", "width_range", "n_distractors"):
        if key in values and isinstance(values[key], list):
            values[key] = tuple(values[key])
    return config_from_dict(cls, values)


def _echo(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **resolved}
    (out_dir / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    params = _section(cfg, "phantom", {"seed": args.seed, "size": args.size})
    out = Path(args.out)
    manifest = build_dataset(params, args.train, args.test, out, overwrite=args.overwrite)
    _echo(out, "gen-data", {"phantom": params.to_dict(), "train": args.train, "test": args.test})
    print(f"wrote {len(manifest.train)} train + {len(manifest.test)} test samples to {out}")
    return 0


def _train_config(cfg: dict, args) -> TrainConfig:
    base = dict(cfg.get("train", {}))
    epochs = args.epochs if args.epochs is not None else base.get("total_epochs", 50)
    overrides = {
        "total_epochs": epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "adversarial_mode": args.adv_mode,
        "decay_start_epoch": args.decay_start,
    }
    if overrides["decay_start_epoch"] is None and "decay_start_epoch" not in base:
        overrides["decay_start_epoch"] = default_decay_start(epochs)
    return _section(cfg, "train", overrides)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    mode = args.mode or cfg.get("mode", "sgan")
    if mode not in MODES:
        raise UsageError(f"invalid mode {mode!r}")
    train_samples = load_split(args.data, "train")

    if args.resume:
        from .checkpoint import checkpoint_load

        resume = Path(args.resume)
        if not resume.exists() and resume.with_name(resume.name + ".sgan").exists():
            resume = resume.with_name(resume.name + ".sgan")
        model = checkpoint_load(resume)
        log.info("resumed from %s at epoch %d step %d", args.resume, model.epoch, model.step_in_epoch)
    else:
        width = args.base_width
        gen = _section(cfg, "generator", {"base_width": width})
        disc = _section(cfg, "discriminator", {"base_width": width})
        weights = weights_for(mode)
        if "weights" in cfg and mode == "sgan":
            weights = replace(weights, **cfg["weights"])
        elif "weights" in cfg:
            weights = replace(weights, **{**cfg["weights"], "steerable": 0.0})
        model = SGANModel.create(gen, disc, weights, _train_config(cfg, args), Normalizer.fit(train_samples))

    _echo(
        out,
        "train",
        {
            "mode": mode,
            "data": str(args.data),
            "resume": args.resume,
            "generator": asdict(model.G.cfg),
            "discriminator": asdict(model.D.cfg),
            "weights": asdict(model.weights),
            "train": asdict(model.train_cfg),
            "checkpoint_every": args.ckpt_every,
        },
    )
    from .checkpoint import checkpoint_save

    csv_path = out / "losses.csv"
    if args.resume and csv_path.exists():
        from .training import LossLog

        LossLog(csv_path).truncate_to(model.epoch)

    def on_epoch_end(m):
        if args.ckpt_every and m.epoch % args.ckpt_every == 0:
            checkpoint_save(m, out / f"ckpt_epoch{m.epoch}.sgan")

    norm = model.normalizer
    fit(
        model,
        norm.inputs(train_samples),
        norm.targets(train_samples),
        max_steps=args.max_steps,
        loss_csv=csv_path,
        on_epoch_end=on_epoch_end,
    )
    checkpoint_save(model, out / "final.sgan")
    print(f"trained to epoch {model.epoch} ({model.global_step} steps); checkpoint {out / 'final.sgan'}")
    return 0


def cmd_synthesize(args) -> int:
    from .checkpoint import checkpoint_load
    from .phantom import SamplePair

    model = checkpoint_load(args.checkpoint)
    data = Path(args.data)
    if args.stems:
        stems = args.stems
    else:
        stems = getattr(Manifest.load(data), args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    warnings = 0
    pending = []
    for stem in stems:
        paths = sample_paths(data, stem)
        missing = [ch for ch in ("t1", "t2") if not paths[ch].exists()]
        if missing:
            print(f"warning: {stem}: missing {', '.join(missing)}", file=sys.stderr)
            warnings += 1
            continue
        t1, t2 = read_pgm(paths["t1"]), read_pgm(paths["t2"])
        if t1.shape != t2.shape:
            print(f"warning: {stem}: t1 {t1.shape} and t2 {t2.shape} differ", file=sys.stderr)
            warnings += 1
            continue
        pending.append(SamplePair(t1, t2, np.zeros_like(t1), np.zeros_like(t1), stem))
    for sample, img in zip(pending, synthesize(model, pending)):
        write_pgm(out / f"{sample.stem}_mra_gen.pgm", img)
    _echo(out, "synthesize", {"checkpoint": str(args.checkpoint), "data": str(data), "stems": stems})
    print(f"synthesized {len(pending)} images into {out}; warnings: {warnings}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    seg = _section(
        cfg,
        "segmentation",
        {
            "threshold": args.seg_threshold,
            "scales": tuple(args.seg_scales) if args.seg_scales else None,
            "beta": args.seg_beta,
        },
    )
    out = Path(args.out)
    report = evaluate_test_set(args.generated, args.reference, seg, out_dir=out)
    _echo(out, "eval", {"generated": args.generated, "reference": args.reference, "segmentation": seg.to_dict()})
    print(report.table())
    if report.warnings:
        print(f"warnings: {len(report.warnings)}", file=sys.stderr)
    return 0


def cmd_dump_filters(args) -> int:
    bank = build_filter_bank(args.k, args.size, args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (kern, theta, kind) in enumerate(zip(bank.kernels, bank.orientations, bank.kinds)):
        lo, hi = float(kern.min()), float(kern.max())
        name = f"filter_{i:02d}.pgm"
        write_pgm(out / name, (kern - lo) / (hi - lo))
        # pixel value v in [0, 1] maps back to weight lo + v * (hi - lo)
        entries.append({"file": name, "orientation": float(theta), "kind": kind, "sigma": bank.sigma, "offset": lo, "scale": hi - lo})
    (out / "filters.json").write_text(json.dumps({"k": len(bank), "size": bank.size, "filters": entries}, indent=2) + "\n")
    print(f"wrote {len(bank)} filters to {out}")
    return 0


def cmd_ablation(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phantom = PhantomParams(seed=args.data_seed)
    _echo(out, "ablation", {"seeds": args.seeds, "epochs": args.epochs, "train": args.train, "test": args.test,
                            "base_width": args.base_width, "phantom": phantom.to_dict()})
    result = run_ablation(args.seeds, args.train, args.test, args.epochs, args.base_width, phantom, out / "ablation.json")
    for mode in MODES:
        p, d = result.mode_means(mode)
        print(f"{mode:<10} PSNR {p:6.2f} dB   Dice {100 * d:5.1f} %")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgan", description="Steerable-loss conditional GAN on phantom angiography data")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a baseline or steerable-loss model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-start", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-width", type=int)
    p.add_argument("--adv-mode", choices=("non_saturating", "saturating"))
    p.add_argument("--ckpt-every", type=int, default=10)
    p.add_argument("--max-steps", type=int, help="stop after this many steps (for smoke runs)")
    p.add_argument("--resume")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="generate mra images from t1/t2 inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--stems", nargs="+")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("eval", help="PSNR and vessel Dice of generated vs reference images")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seg-threshold", type=float)
    p.add_argument("--seg-scales", type=float, nargs="+")
    p.add_argument("--seg-beta", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-filters", help="write the steerable filter bank as PGM images")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--size", type=int, default=5)
    p.add_argument("--sigma", type=float, default=1.0)
    p.set_defaults(func=cmd_dump_filters)

    p = sub.add_parser("ablation", help="baseline vs steerable loss on phantoms, several seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--data-seed", type=int, default=7)
    p.set_defaults(func=cmd_ablation)
    return parser


def _thread_limit():
    try:
        n = int(os.environ.get("SGAN_THREADS", "1"))
    except ValueError:
        raise UsageError("SGAN_THREADS must be an integer") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sgan: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface as exit code 1
        log.debug("failure", exc_info=True)
        print(f"sgan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
