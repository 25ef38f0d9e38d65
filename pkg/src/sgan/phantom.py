"""Synthetic (t1, t2, mra) phantoms with exact vessel masks, and 16-bit PGM I/O."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MANIFEST_VERSION = 1
CHANNELS = ("t1", "t2", "mra", "mask")
_STEM_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass
class SamplePair:
    t1: np.ndarray
    t2: np.ndarray
    mra: np.ndarray
    vessel_mask: np.ndarray
    stem: str

    def __post_init__(self):
        if not self.stem or not _STEM_RE.match(self.stem):
            raise ValueError(f"stem {self.stem!r} is empty or not filesystem-safe")
        shape = self.t1.shape
        for name in ("t2", "mra", "vessel_mask"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, t1 has {shape}")

    @property
    def x(self) -> np.ndarray:
        """Two-channel conditioning input, (2, H, W)."""
        return np.stack([self.t1, self.t2])


@dataclass(frozen=True)
class PhantomParams:
    size: int = 64
    n_vessels: tuple[int, int] = (3, 6)
    width_range: tuple[float, float] = (1.0, 3.0)
    tissue_blob_count: int = 10
    n_distractors: tuple[int, int] = (2, 5)
    noise_std: float = 0.02
    contrast_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.size % 8:
            raise ValueError(f"phantom size {self.size} must be divisible by 8")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.n_vessels[0] < 1 or self.n_vessels[0] > self.n_vessels[1]:
            raise ValueError(f"bad vessel count range {self.n_vessels}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PhantomParams:
        d = dict(d)
        for key in ("n_vessels", "width_range", "n_distractors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def tissue_contrasts(contrast_seed: int) -> dict[str, np.ndarray]:
    """Per-class intensities (background, class 1, class 2) for each channel."""
    rng = np.random.default_rng([contrast_seed, 7919])
    t1 = np.sort(rng.uniform(0.25, 0.75, 3))
    t2 = np.sort(rng.uniform(0.25, 0.75, 3))[::-1].copy()
    mra = rng.uniform(0.05, 0.15, 3)
    return {"t1": t1, "t2": t2, "mra": mra}


def _vessel_path(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random walk with slowly drifting curvature, sampled every 0.5 px."""
    side = rng.integers(4)
    s = rng.uniform(0.15, 0.85) * size
    start = [(s, 0.0), (s, size - 1.0), (0.0, s), (size - 1.0, s)][side]
    inward = [np.pi / 2, -np.pi / 2, 0.0, np.pi][side]
    heading = inward + rng.uniform(-0.6, 0.6)
    curvature = 0.0
    pts = [start]
    x, y = start
    for _ in range(int(3 * size)):
        curvature = float(np.clip(curvature + rng.normal(0.0, 0.004), -0.04, 0.04))
        heading += curvature
        x += 0.5 * np.cos(heading)
        y += 0.5 * np.sin(heading)
        if not (-2 <= x <= size + 1 and -2 <= y <= size + 1):
            break
        pts.append((x, y))
    return np.asarray(pts)


def _distance_to_points(pts: np.ndarray, size: int) -> np.ndarray:
    r = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    d2 = (xx[..., None] - pts[:, 0]) ** 2 + (yy[..., None] - pts[:, 1]) ** 2
    return np.sqrt(d2.min(axis=-1))


def generate_phantom(params: PhantomParams, index: int, stem: str | None = None) -> SamplePair:
    """Draw one sample; a pure function of ``(params, index)``.

    Vessels are bright in mra and slightly dark in t1/t2. Small round
    "distractor" spots share the vessels' t1/t2 signature but are not bright
    in mra, so only shape tells the two apart.
    """
    n = params.size
    rng = np.random.default_rng([params.seed, index])
    contrast = tissue_contrasts(params.contrast_seed)

    labels = np.zeros((n, n), dtype=np.int64)
    r = np.arange(n, dtype=np.float64)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    for _ in range(params.tissue_blob_count):
        cx, cy = rng.uniform(0, n, 2)
        rad = rng.uniform(0.06, 0.22) * n
        labels[(xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad] = rng.integers(1, 3)
    tissue = {ch: ndimage.gaussian_filter(contrast[ch][labels], 1.5, mode="nearest") for ch in contrast}

    coverage = np.zeros((n, n))
    bright = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for _ in range(rng.integers(params.n_vessels[0], params.n_vessels[1] + 1)):
        pts = _vessel_path(rng, n)
        half = 0.5 * rng.uniform(*params.width_range)
        d = _distance_to_points(pts, n)
        cov = np.clip(half + 0.5 - d, 0.0, 1.0)
        level = rng.uniform(0.6, 0.85)
        bright = np.maximum(bright, level * cov)
        coverage = np.maximum(coverage, cov)
        mask |= d <= half

    spots = np.zeros((n, n))
    for _ in range(rng.integers(params.n_distractors[0], params.n_distractors[1] + 1)):
        cx, cy = rng.uniform(4, n - 4, 2)
        rad = rng.uniform(1.0, 2.0)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        spots = np.maximum(spots, np.clip(rad + 0.5 - d, 0.0, 1.0))
    dark = np.maximum(coverage, spots)

    def finish(img):
        img = img + rng.normal(0.0, params.noise_std, img.shape) if params.noise_std > 0 else img
        return np.clip(img, 0.0, 1.0)

    t1 = finish(tissue["t1"] - 0.2 * dark)
    t2 = finish(tissue["t2"] - 0.15 * dark)
    mra = finish(tissue["mra"] * (1.0 - coverage) + bright)
    return SamplePair(t1, t2, mra, mask.astype(np.float64), stem or default_stem(index))


def default_stem(index: int) -> str:
    return f"phantom_{index:05d}"


# -- PGM I/O ----------------------------------------------------------------


class PGMError(ValueError):
    """Base class for PGM read failures."""


class PGMFormatError(PGMError):
    """Malformed header or truncated pixel data."""


class PGMUnsupportedError(PGMError):
    """Not a binary (P5) graymap."""


class PGMMaxvalError(PGMError):
    """Maxval other than 65535."""


class SampleShapeError(ValueError):
    """Channels of one sample have different sizes."""


MAXVAL = 65535


def write_pgm(path, image: np.ndarray) -> None:
    """Store a [0, 1] image as 16-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM images must be 2-D, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * MAXVAL).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii") + q.tobytes())


def _header_tokens(raw: bytes) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise PGMFormatError("header ended early")
        if raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise PGMFormatError("unterminated comment in header")
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(raw[start:pos])
        if len(tokens) == 1 and tokens[0] != b"P5":
            break
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, offset = _header_tokens(raw)
    if tokens[0] != b"P5":
        raise PGMUnsupportedError(f"{path}: magic {tokens[0]!r} is not supported (only binary P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise PGMFormatError(f"{path}: non-numeric header field") from None
    if w <= 0 or h <= 0:
        raise PGMFormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != MAXVAL:
        raise PGMMaxvalError(f"{path}: maxval {maxval}, expected {MAXVAL}")
    body = raw[offset:]
    if len(body) != 2 * w * h:
        raise PGMFormatError(f"{path}: expected {2 * w * h} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.float64) / MAXVAL


def sample_paths(directory, stem: str) -> dict[str, Path]:
    d = Path(directory)
    return {ch: d / f"{stem}_{ch}.pgm" for ch in CHANNELS}


def write_sample(directory, sample: SamplePair) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    paths = sample_paths(directory, sample.stem)
    write_pgm(paths["t1"], sample.t1)
    write_pgm(paths["t2"], sample.t2)
    write_pgm(paths["mra"], sample.mra)
    write_pgm(paths["mask"], sample.vessel_mask > 0.5)


def read_sample(directory, stem: str) -> SamplePair:
    paths = sample_paths(directory, stem)
    arrays = {ch: read_pgm(p) for ch, p in paths.items()}
    shapes = {ch: a.shape for ch, a in arrays.items()}
    if len(set(shapes.values())) != 1:
        raise SampleShapeError(f"{stem}: channel sizes differ {shapes}")
    return SamplePair(arrays["t1"], arrays["t2"], arrays["mra"], (arrays["mask"] > 0.5).astype(np.float64), stem)


# -- datasets ---------------------------------------------------------------


@dataclass
class Manifest:
    params: PhantomParams
    seed: int
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "params": self.params.to_dict(),
            "seed": self.seed,
            "train": self.train,
            "test": self.test,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> Manifest:
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        doc = json.loads(p.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{p}: unsupported manifest version {doc.get('version')!r}")
        return cls(PhantomParams.from_dict(doc["params"]), doc["seed"], doc["train"], doc["test"])


def dataset_split(params: PhantomParams, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must both be positive")
    return list(range(n_train)), list(range(n_train, n_train + n_test))


def build_dataset(params: PhantomParams, n_train: int, n_test: int, out_dir, overwrite: bool = False) -> Manifest:
    """Write every sample plus ``manifest.json``; indices never overlap between splits."""
    train_idx, test_idx = dataset_split(params, n_train, n_test)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} exists and is not empty (pass overwrite=True to replace)")
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(params, params.seed)
    for split, indices in (("train", train_idx), ("test", test_idx)):
        for i in indices:
            sample = generate_phantom(params, i)
            write_sample(out, sample)
            getattr(manifest, split).append(sample.stem)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_split(data_dir, split: str) -> list[SamplePair]:
    manifest = Manifest.load(data_dir)
    return [read_sample(data_dir, stem) for stem in getattr(manifest, split)]
