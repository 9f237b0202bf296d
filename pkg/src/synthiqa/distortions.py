"""Synthetic distortions used to build the source-domain corpus.

Ten parametric operators, each with five severity levels. Operators work
directly on the stored intensities (no transfer function is applied), clamp
their output to ``[0, 1]`` and never change the image shape.

Example
-------
>>> rng = np.random.default_rng(0)
>>> recipe = sample_recipe(rng)
>>> out = compose_recipe(img, recipe, seed=7)
"""

from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, features
from scipy import ndimage

from .errors import ConfigurationError, ValidationError
from .imaging import check_image, clamp, from_uint8, list_images, load_image, relpath, save_image, to_uint8

logger = logging.getLogger(__name__)

N_LEVELS = 5
CATEGORY_PROBS = (0.40, 0.30, 0.20, 0.10)


class DistortionKind(str, Enum):
    GAUSSIAN_BLUR = "gaussian_blur"
    MOTION_BLUR = "motion_blur"
    JPEG = "jpeg"
    JP2K = "jp2k"
    GAUSSIAN_NOISE = "gaussian_noise"
    OVEREXPOSURE = "overexposure"
    UNDEREXPOSURE = "underexposure"
    VIGNETTING = "vignetting"
    CHROMATIC_ABERRATION = "chromatic_aberration"
    CONTRAST_DECREMENT = "contrast_decrement"

    @classmethod
    def parse(cls, kind) -> "DistortionKind":
        if isinstance(kind, cls):
            return kind
        try:
            return cls(kind)
        except ValueError:
            raise ConfigurationError(f"unknown distortion kind: {kind!r}") from None


KINDS = tuple(DistortionKind)

_DEFAULT_PARAMS = {
    DistortionKind.GAUSSIAN_BLUR: [{"sigma": s} for s in (1.0, 2.0, 4.0, 7.0, 10.0)],
    DistortionKind.MOTION_BLUR: [{"length": n} for n in (3, 7, 11, 17, 25)],
    DistortionKind.JPEG: [{"quality": q} for q in (60, 40, 25, 15, 7)],
    DistortionKind.JP2K: [{"psnr": d} for d in (40.0, 35.0, 31.0, 28.0, 25.0)],
    DistortionKind.GAUSSIAN_NOISE: [{"sigma": s} for s in (0.01, 0.03, 0.06, 0.10, 0.15)],
    DistortionKind.OVEREXPOSURE: [
        {"gain": g, "gamma": e} for g, e in ((1.1, 0.95), (1.25, 0.88), (1.45, 0.8), (1.7, 0.7), (2.0, 0.6))
    ],
    DistortionKind.UNDEREXPOSURE: [
        {"gain": g, "gamma": e} for g, e in ((0.9, 1.05), (0.78, 1.15), (0.65, 1.3), (0.52, 1.5), (0.4, 1.75))
    ],
    DistortionKind.VIGNETTING: [{"strength": k} for k in (0.3, 0.5, 0.7, 0.95, 1.3)],
    DistortionKind.CHROMATIC_ABERRATION: [{"shift": d} for d in (0.5, 1.0, 2.0, 3.0, 4.5)],
    DistortionKind.CONTRAST_DECREMENT: [{"scale": c} for c in (0.8, 0.62, 0.46, 0.32, 0.2)],
}


class SeverityTable:
    """Parameters for every ``(kind, level)`` combination.

    The defaults are spaced so that each level is visibly worse than the
    previous one. A JSON override file maps kind names to a list of five
    parameter objects; kinds it does not mention keep their defaults.
    """

    def __init__(self, params=None):
        self._params = copy.deepcopy(_DEFAULT_PARAMS)
        for kind, levels in (params or {}).items():
            kind = DistortionKind.parse(kind)
            if len(levels) != N_LEVELS:
                raise ConfigurationError(f"{kind.value}: expected {N_LEVELS} levels, got {len(levels)}")
            self._params[kind] = [dict(p) for p in levels]

    @classmethod
    def from_json(cls, path) -> "SeverityTable":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def get(self, kind, level: int) -> dict:
        kind = DistortionKind.parse(kind)
        _check_level(level)
        return dict(self._params[kind][level - 1])

    def to_dict(self) -> dict:
        return {k.value: [dict(p) for p in v] for k, v in self._params.items()}


DEFAULT_TABLE = SeverityTable()


def _check_level(level) -> None:
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)) or not 1 <= level <= N_LEVELS:
        raise ValidationError(f"distortion level must be an integer in 1..{N_LEVELS}, got {level!r}")


@dataclass(frozen=True)
class DistortionRecipe:
    """Ordered list of distinct ``(kind, level)`` steps."""

    steps: tuple

    def __post_init__(self):
        steps = tuple((DistortionKind.parse(k), int(lv)) for k, lv in self.steps)
        if not 1 <= len(steps) <= 4:
            raise ValidationError(f"a recipe needs 1 to 4 steps, got {len(steps)}")
        for _, lv in steps:
            _check_level(lv)
        kinds = [k for k, _ in steps]
        if len(set(kinds)) != len(kinds):
            raise ValidationError("distortion kinds within a recipe must be distinct")
        object.__setattr__(self, "steps", steps)

    @property
    def category(self) -> int:
        return len(self.steps)

    @property
    def kinds(self) -> tuple:
        return tuple(k.value for k, _ in self.steps)

    @property
    def levels(self) -> tuple:
        return tuple(lv for _, lv in self.steps)

    def to_json(self) -> list:
        return [{"kind": k.value, "level": lv} for k, lv in self.steps]

    @classmethod
    def from_json(cls, data) -> "DistortionRecipe":
        return cls(tuple((d["kind"], d["level"]) for d in data))


# --- operators -------------------------------------------------------------


def _per_channel(img, fn):
    return np.stack([fn(img[..., c]) for c in range(3)], axis=-1)


def _gaussian_blur(img, sigma):
    if sigma <= 0:
        return img.copy()
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def _motion_blur(img, length):
    length = int(length)
    if length <= 1:
        return img.copy()
    kernel = np.full(length, 1.0 / length)
    return ndimage.convolve1d(img, kernel, axis=1, mode="reflect")


def _jpeg(img, quality):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def jp2k_backend() -> str:
    return "openjpeg" if features.check("jpg_2000") else "haar-approx"


def _jp2k_codec(img, psnr):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(
        buf, format="JPEG2000", quality_mode="dB", quality_layers=[float(psnr)], irreversible=True
    )
    buf.seek(0)
    with Image.open(buf) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def _haar_forward(x):
    a = (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 2.0
    b = (x[0::2, 0::2] - x[0::2, 1::2] + x[1::2, 0::2] - x[1::2, 1::2]) / 2.0
    c = (x[0::2, 0::2] + x[0::2, 1::2] - x[1::2, 0::2] - x[1::2, 1::2]) / 2.0
    d = (x[0::2, 0::2] - x[0::2, 1::2] - x[1::2, 0::2] + x[1::2, 1::2]) / 2.0
    return a, (b, c, d)


def _haar_inverse(a, details):
    b, c, d = details
    out = np.empty((a.shape[0] * 2, a.shape[1] * 2))
    out[0::2, 0::2] = (a + b + c + d) / 2.0
    out[0::2, 1::2] = (a - b + c - d) / 2.0
    out[1::2, 0::2] = (a + b - c - d) / 2.0
    out[1::2, 1::2] = (a - b - c + d) / 2.0
    return out


def _haar_quantize(img, step, levels=5):
    """Quantize every band of a multi-level orthonormal Haar transform."""
    block = 2**levels

    def channel(x):
        h, w = x.shape
        y = np.pad(x, ((0, (-h) % block), (0, (-w) % block)), mode="reflect")
        stack = []
        for _ in range(levels):
            y, det = _haar_forward(y)
            stack.append(det)
        q = step * block * 0.25
        y = np.round(y / q) * q
        for i, det in enumerate(reversed(stack)):
            q = step * 2.0 ** (levels - 1 - i) * 0.5
            y = _haar_inverse(y, tuple(np.round(dd / q) * q for dd in det))
        return y[:h, :w]

    return clamp(_per_channel(img, channel))


def _haar_jp2k(img, psnr, iters=30):
    """Wavelet-quantization stand-in for JPEG 2000 when no codec is present.

    Bisects the quantization step (in log space) until the reconstruction
    reaches the requested PSNR, mirroring the codec's PSNR-targeted mode.
    """
    target = 10.0 ** (-psnr / 10.0)
    lo, hi = 1e-4, 4.0
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if np.mean((_haar_quantize(img, mid) - img) ** 2) > target:
            hi = mid
        else:
            lo = mid
    return _haar_quantize(img, lo)


def _jp2k(img, psnr):
    if jp2k_backend() == "openjpeg":
        return _jp2k_codec(img, psnr)
    return _haar_jp2k(img, psnr)


def _gaussian_noise(img, sigma, rng):
    if sigma == 0:
        return img.copy()
    return img + rng.normal(0.0, sigma, size=img.shape)


def _exposure(img, gain, gamma):
    return gain * np.power(img, gamma)


def _vignetting(img, strength):
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half_diag = math.hypot(max(cy, 0.5), max(cx, 0.5))
    r = np.hypot(yy - cy, xx - cx) / half_diag
    mask = np.cos(np.arctan(strength * r)) ** 4
    return img * mask[..., None]


def _chromatic_aberration(img, shift):
    out = img.copy()
    out[..., 0] = ndimage.shift(img[..., 0], (0.0, shift), order=1, mode="nearest")
    out[..., 2] = ndimage.shift(img[..., 2], (0.0, -shift), order=1, mode="nearest")
    return out


def _contrast_decrement(img, scale):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return mean + scale * (img - mean)


def apply_distortion(img, kind, level: int, seed: int = 0, table: SeverityTable | None = None) -> np.ndarray:
    """Apply one distortion at severity ``level`` (1..5).

    ``seed`` only matters for stochastic kinds (Gaussian noise).
    """
    kind = DistortionKind.parse(kind)
    _check_level(level)
    img = check_image(img)
    p = (table or DEFAULT_TABLE).get(kind, level)
    if kind is DistortionKind.GAUSSIAN_BLUR:
        out = _gaussian_blur(img, p["sigma"])
    elif kind is DistortionKind.MOTION_BLUR:
        out = _motion_blur(img, p["length"])
    elif kind is DistortionKind.JPEG:
        out = _jpeg(img, p["quality"])
    elif kind is DistortionKind.JP2K:
        out = _jp2k(img, p["psnr"])
    elif kind is DistortionKind.GAUSSIAN_NOISE:
        out = _gaussian_noise(img, p["sigma"], np.random.default_rng(seed))
    elif kind in (DistortionKind.OVEREXPOSURE, DistortionKind.UNDEREXPOSURE):
        out = _exposure(img, p["gain"], p["gamma"])
    elif kind is DistortionKind.VIGNETTING:
        out = _vignetting(img, p["strength"])
    elif kind is DistortionKind.CHROMATIC_ABERRATION:
        out = _chromatic_aberration(img, p["shift"])
    else:
        out = _contrast_decrement(img, p["scale"])
    return clamp(out)


def compose_recipe(img, recipe: DistortionRecipe, seed: int, table: SeverityTable | None = None) -> np.ndarray:
    """Apply the recipe's steps in order; each step gets its own derived seed."""
    if not isinstance(recipe, DistortionRecipe):
        recipe = DistortionRecipe(tuple(recipe))
    out = check_image(img)
    seeds = np.random.SeedSequence(seed).generate_state(len(recipe.steps))
    for (kind, level), s in zip(recipe.steps, seeds):
        out = apply_distortion(out, kind, level, seed=int(s), table=table)
    return out


def sample_recipe(rng: np.random.Generator) -> DistortionRecipe:
    category = int(rng.choice(4, p=CATEGORY_PROBS)) + 1
    # choice without replacement already returns a uniformly random order
    kinds = rng.choice(len(KINDS), size=category, replace=False)
    levels = rng.integers(1, N_LEVELS + 1, size=category)
    return DistortionRecipe(tuple((KINDS[k], int(lv)) for k, lv in zip(kinds, levels)))


# --- corpus ----------------------------------------------------------------


@dataclass
class ManifestRecord:
    pristine: str
    distorted: str | None
    recipe: DistortionRecipe | None
    seed: int | None
    codec: str | None = None
    error: str | None = None

    @property
    def skipped(self) -> bool:
        return self.distorted is None

    def to_json(self) -> dict:
        if self.skipped:
            return {"pristine": self.pristine, "distorted": None, "error": self.error}
        row = {"pristine": self.pristine, "distorted": self.distorted, "recipe": self.recipe.to_json(), "seed": self.seed}
        if self.codec is not None:
            row["jp2k_codec"] = self.codec
        return row

    @classmethod
    def from_json(cls, row: dict) -> "ManifestRecord":
        if row.get("distorted") is None:
            return cls(row["pristine"], None, None, None, error=row.get("error"))
        return cls(
            row["pristine"],
            row["distorted"],
            DistortionRecipe.from_json(row["recipe"]),
            int(row["seed"]),
            codec=row.get("jp2k_codec"),
        )


@dataclass
class CorpusManifest:
    """Manifest rows plus the directory their relative paths are anchored at."""

    records: list
    root: Path

    def path(self, rel) -> Path:
        rel = Path(rel)
        return (rel if rel.is_absolute() else self.root / rel).resolve()

    @property
    def distorted(self) -> list:
        return [r for r in self.records if not r.skipped]

    def write(self, path) -> None:
        write_manifest(self.records, path)


def write_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        records = [ManifestRecord.from_json(json.loads(line)) for line in fh if line.strip()]
    return CorpusManifest(records, path.parent)


def variant_seed(seed: int, image_index: int, variant_index: int) -> int:
    return int(np.random.SeedSequence([seed, image_index, variant_index]).generate_state(1)[0])


def synthesize_corpus(pristine_dir, per_image: int, seed: int, out_dir, table: SeverityTable | None = None) -> CorpusManifest:
    """Write ``per_image`` distorted variants of every pristine image.

    The manifest is written to ``out_dir/manifest.jsonl`` with paths relative
    to ``out_dir``. Unreadable images are skipped and noted in the manifest.
    """
    if per_image < 1:
        raise ValidationError("per_image must be >= 1")
    sources = list_images(pristine_dir)
    if not sources:
        raise ValidationError(f"no images found in {pristine_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    codec = jp2k_backend()
    for i, src in enumerate(sources):
        rel_src = relpath(src, out_dir)
        try:
            img = load_image(src)
        except Exception as exc:  # PIL raises a zoo of exception types
            logger.warning("skipping unreadable image %s: %s", src, exc)
            records.append(ManifestRecord(rel_src, None, None, None, error=str(exc)))
            continue
        for j in range(per_image):
            s = variant_seed(seed, i, j)
            rng = np.random.default_rng(s)
            recipe = sample_recipe(rng)
            out = compose_recipe(img, recipe, seed=s, table=table)
            name = f"{src.stem}_{j:03d}.png"
            save_image(out, out_dir / name)
            uses_jp2k = DistortionKind.JP2K.value in recipe.kinds
            records.append(ManifestRecord(rel_src, name, recipe, s, codec=codec if uses_jp2k else None))
    manifest = CorpusManifest(records, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
