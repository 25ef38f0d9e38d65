"""PSNR, Hessian vesselness segmentation, Dice overlap and test-set reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .phantom import read_pgm

log = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass(frozen=True)
class SegParams:
    scales: tuple[float, ...] = (1.0, 2.0, 3.0)
    beta: float = 0.5
    c_mode: str = "auto"
    c: float = 0.5  # only used when c_mode == "fixed"
    threshold: float = 0.15

    def __post_init__(self):
        if not self.scales or min(self.scales) <= 0:
            raise ValueError(f"scales must be non-empty and positive, got {self.scales}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.c_mode not in ("auto", "fixed"):
            raise ValueError(f"c_mode must be 'auto' or 'fixed', got {self.c_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d


@dataclass(frozen=True)
class SegmentationMap:
    mask: np.ndarray
    params: SegParams


def psnr(y: np.ndarray, y_hat: np.ndarray) -> float:
    """10 log10(max(y)^2 / MSE); ``math.inf`` when the images are identical."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"psnr: shapes {y.shape} and {y_hat.shape} differ")
    mse = float(np.mean((y - y_hat) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(y.max())
    if peak <= 0:
        raise ValueError("psnr: reference image has no positive peak")
    return 10.0 * math.log10(peak * peak / mse)


def _derivative_kernels(sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled Gaussian and its first two derivatives (radius 4 sigma).

    The derivative kernels have exactly zero sum, so flat regions give a zero
    Hessian (truncated continuous kernels leave a small constant offset).
    """
    r = int(4.0 * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    d1 = -x / sigma**2 * g
    d1 -= d1.mean()
    d2 = (x * x / sigma**4 - 1.0 / sigma**2) * g
    d2 -= d2.mean()
    return g, d1, d2


def _hessian(image: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale-normalised (times sigma^2) Hessian entries of the Gaussian-smoothed image."""
    g, d1, d2 = _derivative_kernels(sigma)

    def sep(k_rows, k_cols):
        out = ndimage.convolve1d(image, k_rows, axis=0, mode="nearest")
        return ndimage.convolve1d(out, k_cols, axis=1, mode="nearest")

    s2 = sigma * sigma
    return sep(g, d2) * s2, sep(d1, d1) * s2, sep(d2, g) * s2


def hessian_vesselness(
    image: np.ndarray, scales=(1.0, 2.0, 3.0), beta: float = 0.5, c_mode: str = "auto", c: float = 0.5
) -> np.ndarray:
    """Multi-scale Frangi-style response to bright tubular structures, in [0, 1]."""
    if len(scales) == 0:
        raise ValueError("at least one scale is required")
    img = np.asarray(image, dtype=np.float64)
    best = np.zeros_like(img)
    # Hessians below this are filter round-off; auto c would otherwise blow them up
    floor = 1e-10 * float(np.abs(img).max())
    for sigma in scales:
        if sigma <= 0:
            raise ValueError(f"scales must be positive, got {sigma}")
        hxx, hxy, hyy = _hessian(img, sigma)
        half_tr = 0.5 * (hxx + hyy)
        root = np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy * hxy)
        l1, l2 = half_tr + root, half_tr - root
        swap = np.abs(l1) > np.abs(l2)
        la = np.where(swap, l2, l1)  # smaller magnitude
        lb = np.where(swap, l1, l2)  # larger magnitude
        frob = np.sqrt(hxx * hxx + 2 * hxy * hxy + hyy * hyy)
        if frob.max() <= floor:
            continue
        cc = 0.5 * frob.max() if c_mode == "auto" else c
        tubular = lb < 0
        ratio = np.divide(la, lb, out=np.zeros_like(la), where=tubular)
        v = np.exp(-(ratio**2) / (2 * beta * beta)) * (1.0 - np.exp(-(frob**2) / (2 * cc * cc)))
        best = np.maximum(best, np.where(tubular, v, 0.0))
    return best


def segment_vessels(image: np.ndarray, params: SegParams = SegParams()) -> SegmentationMap:
    v = hessian_vesselness(image, params.scales, params.beta, params.c_mode, params.c)
    return SegmentationMap((v >= params.threshold).astype(np.uint8), params)


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); two empty masks count as a perfect match."""
    ma = np.asarray(a.mask if isinstance(a, SegmentationMap) else a).astype(bool)
    mb = np.asarray(b.mask if isinstance(b, SegmentationMap) else b).astype(bool)
    if ma.shape != mb.shape:
        raise ValueError(f"dice: shapes {ma.shape} and {mb.shape} differ")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


# -- reports ----------------------------------------------------------------


@dataclass
class ImageResult:
    stem: str
    psnr_db: float
    dice: float


@dataclass
class EvalReport:
    params: SegParams
    per_image: list[ImageResult] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_image)

    @property
    def psnr_inf_count(self) -> int:
        return sum(1 for r in self.per_image if math.isinf(r.psnr_db))

    def aggregates(self) -> dict:
        finite = np.array([r.psnr_db for r in self.per_image if math.isfinite(r.psnr_db)])
        dices = np.array([r.dice for r in self.per_image])
        return {
            "count": self.count,
            "psnr_mean": float(finite.mean()) if finite.size else None,
            "psnr_std": float(finite.std()) if finite.size else None,
            "psnr_inf_count": self.psnr_inf_count,
            "dice_mean": float(dices.mean()) if dices.size else None,
            "dice_std": float(dices.std()) if dices.size else None,
            "warning_count": len(self.warnings),
        }

    def to_json(self) -> str:
        doc = {
            "version": REPORT_VERSION,
            "params": self.params.to_dict(),
            "per_image": [
                {
                    "stem": r.stem,
                    "psnr_db": r.psnr_db if math.isfinite(r.psnr_db) else None,
                    "psnr_inf": math.isinf(r.psnr_db),
                    "dice": r.dice,
                }
                for r in self.per_image
            ],
            "aggregates": self.aggregates(),
            "warnings": self.warnings,
        }
        return json.dumps(doc, indent=2) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "report.json", out / "report.csv"
        jpath.write_text(self.to_json())
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stem", "psnr_db", "dice"])
            for r in self.per_image:
                w.writerow([r.stem, "inf" if math.isinf(r.psnr_db) else repr(r.psnr_db), repr(r.dice)])
        return jpath, cpath

    def table(self) -> str:
        agg = self.aggregates()
        psnr_txt = "n/a" if agg["psnr_mean"] is None else f"{agg['psnr_mean']:.2f} +/- {agg['psnr_std']:.2f}"
        lines = [
            f"{'pairs':<16}{agg['count']}",
            f"{'PSNR (dB)':<16}{psnr_txt}  (inf: {agg['psnr_inf_count']})",
            f"{'Dice (%)':<16}{100 * agg['dice_mean']:.1f} +/- {100 * agg['dice_std']:.1f}",
        ]
        return "\n".join(lines)


def evaluate_pair(stem: str, reference: np.ndarray, generated: np.ndarray, params: SegParams) -> ImageResult:
    seg_ref = segment_vessels(reference, params)
    seg_gen = segment_vessels(generated, params)
    return ImageResult(stem, psnr(reference, generated), dice(seg_ref, seg_gen))


def _stems(directory: Path, suffix: str) -> dict[str, Path]:
    return {p.name[: -len(suffix)]: p for p in sorted(directory.glob(f"*{suffix}"))}


def evaluate_test_set(generated_dir, reference_dir, params: SegParams = SegParams(), out_dir=None) -> EvalReport:
    """Pair ``<stem>_mra_gen.pgm`` (or ``<stem>_mra.pgm``) files with reference ``<stem>_mra.pgm``.

    Pairs are processed in sorted stem order; unmatched files are skipped and
    recorded as warnings.
    """
    gdir, rdir = Path(generated_dir), Path(reference_dir)
    generated = _stems(gdir, "_mra_gen.pgm") or _stems(gdir, "_mra.pgm")
    reference = _stems(rdir, "_mra.pgm")
    report = EvalReport(params)
    for stem in sorted(set(generated) | set(reference)):
        if stem not in reference:
            report.warnings.append(f"{stem}: no reference image")
            continue
        if stem not in generated:
            report.warnings.append(f"{stem}: no generated image")
            continue
        report.per_image.append(evaluate_pair(stem, read_pgm(reference[stem]), read_pgm(generated[stem]), params))
    for w in report.warnings:
        log.warning(w)
    if not report.per_image:
        raise ValueError(f"no image pairs found between {gdir} and {rdir}")
    if out_dir is not None:
        report.write(out_dir)
    return report
