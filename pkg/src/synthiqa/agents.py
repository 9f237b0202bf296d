"""Full-reference quality agents used as pseudo-labelers.

Three agents are built in (GMSD, MDSI, SR-SIM). Scores from any other
full-reference model can join the ensemble through :class:`ExternalAgent`,
which reads precomputed scores from a JSON file.

All built-in agents take RGB arrays in ``[0, 1]`` and work internally on the
``[0, 255]`` scale their published constants assume.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage, signal

from .errors import AgentLookupError, ConfigurationError, ValidationError
from .imaging import check_image, load_image

logger = logging.getLogger(__name__)


class Polarity(str, Enum):
    HIGHER_IS_BETTER = "higher_is_better"
    LOWER_IS_BETTER = "lower_is_better"


@dataclass(frozen=True)
class AgentId:
    name: str
    polarity: Polarity


_PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
_SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0


def _luma(img):
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _conv_same(x, k):
    return signal.convolve2d(x, k, mode="same")


def _gradient_magnitude(x, kx):
    gx = _conv_same(x, kx)
    gy = _conv_same(x, kx.T)
    return np.sqrt(gx * gx + gy * gy)


def _downsample(x, factor):
    """Box-average then subsample, the prefilter shared by the reference codes."""
    if factor <= 1:
        return x
    box = np.full((factor, factor), 1.0 / (factor * factor))
    if x.ndim == 2:
        return _conv_same(x, box)[::factor, ::factor]
    return np.stack([_conv_same(x[..., c], box)[::factor, ::factor] for c in range(x.shape[-1])], axis=-1)


def _auto_factor(shape):
    return max(1, int(round(min(shape[:2]) / 256.0)))


def _pair(ref, dist):
    ref = check_image(ref, "reference")
    dist = check_image(dist, "distorted")
    if ref.shape != dist.shape:
        raise ValidationError(f"reference {ref.shape} and distorted {dist.shape} shapes differ")
    return ref * 255.0, dist * 255.0


def gmsd(ref, dist, c: float = 170.0) -> float:
    """Gradient magnitude similarity deviation. Lower is better; 0 for identical inputs."""
    ref, dist = _pair(ref, dist)
    if min(ref.shape[:2]) < 2:
        raise ValidationError("GMSD needs images of at least 2x2 pixels")
    y1 = _downsample(_luma(ref), 2)
    y2 = _downsample(_luma(dist), 2)
    g1 = _gradient_magnitude(y1, _PREWITT_X)
    g2 = _gradient_magnitude(y2, _PREWITT_X)
    gms = (2.0 * g1 * g2 + c) / (g1 * g1 + g2 * g2 + c)
    return float(np.std(gms, ddof=1)) if gms.size > 1 else 0.0


def mdsi(ref, dist, c1: float = 140.0, c2: float = 55.0, c3: float = 550.0, alpha: float = 0.6) -> float:
    """Mean deviation similarity index. Lower is better; 0 for identical inputs.

    Gradient similarity uses the fused image ``(ref + dist) / 2`` as a third
    view; chromaticity similarity is measured in a two-channel opponent space.
    The combined map is pooled by the mean absolute deviation of its fourth
    root (complex for negative entries), raised to the power 1/4.
    """
    ref, dist = _pair(ref, dist)
    f = _auto_factor(ref.shape)
    r = _downsample(ref, f)
    d = _downsample(dist, f)

    def lum(x):
        return 0.2989 * x[..., 0] + 0.5870 * x[..., 1] + 0.1140 * x[..., 2]

    lr, ld = lum(r), lum(d)
    lf = 0.5 * (lr + ld)
    h1 = 0.30 * r[..., 0] + 0.04 * r[..., 1] - 0.35 * r[..., 2]
    h2 = 0.30 * d[..., 0] + 0.04 * d[..., 1] - 0.35 * d[..., 2]
    m1 = 0.34 * r[..., 0] - 0.60 * r[..., 1] + 0.17 * r[..., 2]
    m2 = 0.34 * d[..., 0] - 0.60 * d[..., 1] + 0.17 * d[..., 2]

    gr = _gradient_magnitude(lr, _PREWITT_X)
    gd = _gradient_magnitude(ld, _PREWITT_X)
    gf = _gradient_magnitude(lf, _PREWITT_X)
    gs_rd = (2.0 * gr * gd + c1) / (gr * gr + gd * gd + c1)
    gs_rf = (2.0 * gr * gf + c2) / (gr * gr + gf * gf + c2)
    gs_df = (2.0 * gd * gf + c2) / (gd * gd + gf * gf + c2)
    gs = gs_rd + gs_df - gs_rf
    cs = (2.0 * (h1 * h2 + m1 * m2) + c3) / (h1 * h1 + h2 * h2 + m1 * m1 + m2 * m2 + c3)
    gcs = alpha * gs + (1.0 - alpha) * cs

    q = np.power(gcs.astype(np.complex128).ravel(), 0.25)
    dev = np.mean(np.abs(q - q.mean()))
    return float(dev**0.25)


def _imresize(x, shape):
    """Bicubic resize of a float map to ``(rows, cols)``."""
    im = Image.fromarray(x.astype(np.float32), mode="F")
    return np.asarray(im.resize((shape[1], shape[0]), Image.BICUBIC), dtype=np.float64)


def _gaussian_kernel(size, sigma):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def spectral_residual_saliency(y: np.ndarray) -> np.ndarray:
    """Spectral-residual saliency map of a luma image, scaled to ``[0, 1]``."""
    rows, cols = y.shape
    small = _imresize(y, (max(1, math.ceil(rows * 0.25)), max(1, math.ceil(cols * 0.25))))
    spectrum = np.fft.fft2(small)
    log_amp = np.log(np.abs(spectrum) + 1e-12)
    phase = np.angle(spectrum)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=3, mode="nearest")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * phase))) ** 2
    sal = ndimage.correlate(sal, _gaussian_kernel(10, 3.8), mode="constant", origin=-1)
    lo, hi = sal.min(), sal.max()
    sal = (sal - lo) / (hi - lo) if hi > lo else np.ones_like(sal)
    return _imresize(sal, (rows, cols))


def srsim(ref, dist, c1: float = 0.40, c2: float = 225.0, alpha: float = 0.50) -> float:
    """Spectral-residual-based similarity. Higher is better; 1 for identical inputs."""
    ref, dist = _pair(ref, dist)
    f = _auto_factor(ref.shape)
    y1 = _downsample(_luma(ref), f)
    y2 = _downsample(_luma(dist), f)
    s1 = spectral_residual_saliency(y1)
    s2 = spectral_residual_saliency(y2)
    g1 = _gradient_magnitude(y1, _SCHARR_X)
    g2 = _gradient_magnitude(y2, _SCHARR_X)
    sal_sim = (2.0 * s1 * s2 + c1) / (s1 * s1 + s2 * s2 + c1)
    grad_sim = (2.0 * g1 * g2 + c2) / (g1 * g1 + g2 * g2 + c2)
    weight = np.maximum(s1, s2)
    total = weight.sum()
    if total <= 0:
        return 1.0 if np.array_equal(ref, dist) else float(np.mean(sal_sim * grad_sim**alpha))
    return float(np.sum(sal_sim * grad_sim**alpha * weight) / total)


class Agent:
    """Base class: something that scores a distorted image given its reference."""

    name: str
    polarity: Polarity
    needs_pixels = True

    @property
    def id(self) -> AgentId:
        return AgentId(self.name, self.polarity)

    def score(self, ref, dist) -> float:
        raise NotImplementedError


class FRAgent(Agent):
    def __init__(self, name: str, fn, polarity: Polarity):
        self.name = name
        self.fn = fn
        self.polarity = Polarity(polarity)

    def score(self, ref, dist) -> float:
        if isinstance(ref, (str, Path)):
            ref = load_image(ref)
        if isinstance(dist, (str, Path)):
            dist = load_image(dist)
        value = self.fn(ref, dist)
        if not math.isfinite(value):
            raise ValidationError(f"{self.name} produced a non-finite score")
        return value

    def __repr__(self):
        return f"FRAgent({self.name!r}, {self.polarity.value})"


BUILTIN_AGENTS = {
    "gmsd": FRAgent("gmsd", gmsd, Polarity.LOWER_IS_BETTER),
    "mdsi": FRAgent("mdsi", mdsi, Polarity.LOWER_IS_BETTER),
    "srsim": FRAgent("srsim", srsim, Polarity.HIGHER_IS_BETTER),
}


def get_agent(name: str) -> Agent:
    try:
        return BUILTIN_AGENTS[name.strip().lower()]
    except KeyError:
        raise ConfigurationError(f"unknown agent {name!r}; built-ins are {sorted(BUILTIN_AGENTS)}") from None


def _key(path) -> str:
    return Path(path).resolve().as_posix()


class ExternalAgent(Agent):
    """Read-only agent backed by scores computed elsewhere.

    The score file is a JSON object mapping image paths to finite scores,
    plus a ``"polarity"`` entry. Relative paths are resolved against the
    file's directory. Queries look up the distorted image only.
    """

    needs_pixels = False

    def __init__(self, name: str, scores: dict, polarity: Polarity):
        self.name = name
        self.polarity = Polarity(polarity)
        self._scores = scores

    def score(self, ref, dist) -> float:
        if not isinstance(dist, (str, Path)):
            raise ValidationError(f"external agent {self.name!r} can only score images given by path")
        try:
            return self._scores[_key(dist)]
        except KeyError:
            raise AgentLookupError(str(dist)) from None

    def __len__(self):
        return len(self._scores)


def external_agent(score_file, polarity=None, name: str | None = None) -> ExternalAgent:
    score_file = Path(score_file)
    base = score_file.parent
    with open(score_file, encoding="utf-8") as fh:
        text = fh.read()
    # keep every (key, value) pair so duplicate keys can be reported
    top = json.loads(text, object_pairs_hook=list) if text.strip() else []
    file_polarity = None
    scores = {}
    for key, value in top:
        if key == "polarity":
            file_polarity = value
            continue
        if key == "name":
            name = name or value
            continue
        value = float(value)
        if not math.isfinite(value):
            raise ValidationError(f"non-finite score for {key!r} in {score_file}")
        k = _key(base / key) if not Path(key).is_absolute() else _key(key)
        if k in scores:
            logger.warning("duplicate score for %s in %s; keeping the last one", key, score_file)
        scores[k] = value
    polarity = polarity or file_polarity
    if polarity is None:
        raise ConfigurationError(f"{score_file}: no polarity given")
    return ExternalAgent(name or score_file.stem, scores, Polarity(polarity))


def preference_from_scores(polarity, score_x: float, score_y: float) -> int:
    """1 iff x is at least as good as y under the agent (ties count as 1)."""
    if Polarity(polarity) is Polarity.HIGHER_IS_BETTER:
        return int(score_x >= score_y)
    return int(score_x <= score_y)


def preference(agent: Agent, ref_x, x, ref_y, y) -> int:
    return preference_from_scores(agent.polarity, agent.score(ref_x, x), agent.score(ref_y, y))


SCORE_TABLE_FORMAT = "synthiqa-scores/1"


def score_manifest(manifest, agents) -> dict:
    """Score every distorted image of ``manifest`` (and every pristine image
    against itself) with each agent. Returns ``{agent: {abs path: score}}``."""
    from .imaging import load_image

    refs, items = {}, []
    for rec in manifest.distorted:
        ref = str(manifest.path(rec.pristine))
        items.append((ref, str(manifest.path(rec.distorted))))
        refs[ref] = None
    items = [(r, r) for r in sorted(refs)] + items
    cache = {}

    def img(p):
        if p not in cache:
            if len(cache) > 256:
                cache.clear()
            cache[p] = load_image(p)
        return cache[p]

    out = {}
    for agent in agents:
        out[agent.name] = {dist: agent.score(img(ref), img(dist)) for ref, dist in items}
    return out


def write_score_table(path, agents, scores: dict) -> None:
    """JSON table ``{format, order, agents: {name: {polarity, scores: {relpath: score}}}}``."""
    from .imaging import relpath

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    table = {"format": SCORE_TABLE_FORMAT, "order": [a.name for a in agents], "agents": {}}
    for agent in agents:
        s = scores[agent.name]
        table["agents"][agent.name] = {
            "polarity": agent.polarity.value,
            "scores": {relpath(p, base): s[p] for p in sorted(s)},
        }
    path.write_text(json.dumps(table, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_score_table(path) -> list:
    """External agents (one per table entry, in stored order) from a score table."""
    path = Path(path)
    try:
        table = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(table, dict) or table.get("format") != SCORE_TABLE_FORMAT:
        raise ValidationError(f"{path}: not a score table")
    agents = []
    for name in table.get("order", sorted(table["agents"])):
        entry = table["agents"][name]
        scores = {_key(path.parent / k): float(v) for k, v in entry["scores"].items()}
        agents.append(ExternalAgent(name, scores, Polarity(entry["polarity"])))
    return agents
