"""Pair sampling, pseudo-labeling and agreement statistics.

Four pair types are drawn from a corpus manifest:

1. same reference, same distortion kinds, different levels
2. same reference, different distortion kinds
3. different references
4. one image is the pristine reference of the other
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import Agent, preference_from_scores
from .distortions import CorpusManifest
from .errors import PairSamplingError, ValidationError
from .imaging import load_image, relpath, resolve

logger = logging.getLogger(__name__)

DEFAULT_TYPE_MIX = (0.11, 0.49, 0.28, 0.12)
PAIR_FILE_FORMAT = "synthiqa-pairs/1"


@dataclass(frozen=True)
class Pair:
    """An unlabeled pair. Paths are absolute (resolved from the manifest)."""

    x_path: str
    y_path: str
    ref_x_path: str
    ref_y_path: str
    pair_type: int


@dataclass
class PairRecord:
    x_path: str
    y_path: str
    ref_x_path: str
    ref_y_path: str
    pair_type: int
    verdicts: tuple
    agent_ids: tuple
    scores: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        self.verdicts = tuple(int(v) for v in self.verdicts)
        self.agent_ids = tuple(self.agent_ids)
        if not self.verdicts:
            raise ValidationError("a pair record needs at least one verdict")
        if len(self.verdicts) != len(self.agent_ids):
            raise ValidationError("verdicts and agent_ids must have the same length")
        if any(v not in (0, 1) for v in self.verdicts):
            raise ValidationError(f"verdicts must be 0 or 1, got {self.verdicts}")
        if self.pair_type not in (1, 2, 3, 4):
            raise ValidationError(f"pair_type must be in 1..4, got {self.pair_type}")

    @property
    def M(self) -> int:
        return len(self.verdicts)

    @property
    def pair(self) -> Pair:
        return Pair(self.x_path, self.y_path, self.ref_x_path, self.ref_y_path, self.pair_type)


# --- sampling --------------------------------------------------------------


class _Index:
    def __init__(self, manifest: CorpusManifest):
        self.items = []  # (distorted abs path, reference abs path, kinds, levels)
        for rec in manifest.distorted:
            self.items.append(
                (str(manifest.path(rec.distorted)), str(manifest.path(rec.pristine)), rec.recipe.kinds, rec.recipe.levels)
            )
        if not self.items:
            raise ValidationError("manifest has no distorted images")
        self.by_ref = defaultdict(list)
        for i, (_, ref, _, _) in enumerate(self.items):
            self.by_ref[ref].append(i)
        self.refs = sorted(self.by_ref)
        by_group = defaultdict(list)
        for i, (_, ref, kinds, _) in enumerate(self.items):
            by_group[(ref, kinds)].append(i)
        # groups that hold at least two distinct level settings
        self.level_groups = [
            g for _, g in sorted(by_group.items()) if len({self.items[i][3] for i in g}) >= 2
        ]
        self.multi_kind_refs = [r for r in self.refs if len({self.items[i][2] for i in self.by_ref[r]}) >= 2]


def _draw_type(idx: _Index, t: int, rng, max_attempts: int):
    items = idx.items
    for _ in range(max_attempts):
        if t == 1:
            if not idx.level_groups:
                break
            g = idx.level_groups[rng.integers(len(idx.level_groups))]
            a, b = rng.choice(g, size=2, replace=False)
            if items[a][3] != items[b][3]:
                return Pair(items[a][0], items[b][0], items[a][1], items[b][1], 1)
        elif t == 2:
            if not idx.multi_kind_refs:
                break
            members = idx.by_ref[idx.multi_kind_refs[rng.integers(len(idx.multi_kind_refs))]]
            a, b = rng.choice(members, size=2, replace=False)
            if items[a][2] != items[b][2]:
                return Pair(items[a][0], items[b][0], items[a][1], items[b][1], 2)
        elif t == 3:
            if len(idx.refs) < 2:
                break
            a, b = rng.integers(len(items), size=2)
            if items[a][1] != items[b][1]:
                return Pair(items[a][0], items[b][0], items[a][1], items[b][1], 3)
        else:
            a = rng.integers(len(items))
            dist, ref = items[a][0], items[a][1]
            if rng.random() < 0.5:
                return Pair(ref, dist, ref, ref, 4)
            return Pair(dist, ref, ref, ref, 4)
    raise PairSamplingError(f"could not draw a type-{t} pair from the manifest after {max_attempts} attempts")


def sample_pairs(manifest: CorpusManifest, n_pairs: int, type_mix=DEFAULT_TYPE_MIX, rng=None, max_attempts: int = 1000):
    """Draw ``n_pairs`` pairs with replacement; pair types follow ``type_mix``."""
    mix = np.asarray(type_mix, dtype=np.float64)
    if mix.shape != (4,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValidationError(f"type_mix must be four non-negative probabilities summing to 1, got {type_mix}")
    if n_pairs < 0:
        raise ValidationError("n_pairs must be non-negative")
    rng = rng if rng is not None else np.random.default_rng()
    idx = _Index(manifest)
    types = rng.choice(4, size=n_pairs, p=mix) + 1
    return [_draw_type(idx, int(t), rng, max_attempts) for t in types]


def validate_pair(pair, manifest: CorpusManifest) -> bool:
    """Re-check a pair's structural claim against the manifest alone."""
    info = {str(manifest.path(r.distorted)): r for r in manifest.distorted}
    pristine = {str(manifest.path(r.pristine)) for r in manifest.distorted}

    def ref_of(path):
        return str(manifest.path(info[path].pristine)) if path in info else (path if path in pristine else None)

    x, y = str(pair.x_path), str(pair.y_path)
    rx, ry = ref_of(x), ref_of(y)
    if rx is None or ry is None or rx != str(pair.ref_x_path) or ry != str(pair.ref_y_path):
        return False
    t = pair.pair_type
    if t == 4:
        return rx == ry and ((x == rx) != (y == ry))
    if x not in info or y not in info:
        return False
    a, b = info[x].recipe, info[y].recipe
    if t == 1:
        return rx == ry and a.kinds == b.kinds and a.levels != b.levels
    if t == 2:
        return rx == ry and a.kinds != b.kinds
    return rx != ry


# --- labeling --------------------------------------------------------------


class _ScoreCache:
    def __init__(self, max_images: int = 4096):
        self._images = {}
        self._scores = {}
        self.max_images = max_images

    def image(self, path):
        img = self._images.get(path)
        if img is None:
            if len(self._images) >= self.max_images:
                self._images.clear()
            img = self._images[path] = load_image(path)
        return img

    def score(self, agent: Agent, ref, dist):
        key = (agent.name, ref, dist)
        if key not in self._scores:
            if agent.needs_pixels:
                self._scores[key] = agent.score(self.image(ref), self.image(dist))
            else:
                self._scores[key] = agent.score(ref, dist)
        return self._scores[key]


def label_pairs(pairs, agents, keep_scores: bool = False):
    """Attach one verdict per agent to every pair, in agent order.

    A pair on which any agent fails is dropped and logged.
    """
    agents = list(agents)
    if not agents:
        raise ValidationError("at least one agent is required")
    ids = tuple(a.name for a in agents)
    cache = _ScoreCache()
    records = []
    for p in pairs:
        try:
            verdicts, scores = [], {}
            for a in agents:
                sx = cache.score(a, str(p.ref_x_path), str(p.x_path))
                sy = cache.score(a, str(p.ref_y_path), str(p.y_path))
                verdicts.append(preference_from_scores(a.polarity, sx, sy))
                scores[a.name] = [sx, sy]
        except Exception as exc:
            logger.warning("dropping pair (%s, %s): %s", p.x_path, p.y_path, exc)
            continue
        records.append(
            PairRecord(p.x_path, p.y_path, p.ref_x_path, p.ref_y_path, p.pair_type, verdicts, ids,
                       scores if keep_scores else None)
        )
    return records


# --- statistics ------------------------------------------------------------


def majority_label(record) -> int:
    verdicts = record.verdicts if hasattr(record, "verdicts") else record
    m = len(verdicts)
    return int(2 * sum(verdicts) >= m)


def agreement_histogram(records) -> np.ndarray:
    """``counts[k]`` is the number of records with exactly ``k`` positive verdicts."""
    records = list(records)
    if not records:
        return np.zeros(1, dtype=np.int64)
    ms = {len(r.verdicts) for r in records}
    if len(ms) != 1:
        raise ValidationError(f"records disagree on the number of agents: {sorted(ms)}")
    m = ms.pop()
    counts = np.zeros(m + 1, dtype=np.int64)
    for r in records:
        counts[sum(r.verdicts)] += 1
    return counts


def full_agreement_fraction(counts) -> float:
    counts = np.asarray(counts)
    return float((counts[0] + counts[-1]) / counts.sum())


# --- persistence -----------------------------------------------------------


def write_pairs(records, path) -> None:
    """JSON-lines: a header with the agent ids, then one record per line.

    Paths are stored relative to the pair file's directory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    ids = list(records[0].agent_ids) if records else []
    base = path.parent
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": PAIR_FILE_FORMAT, "agent_ids": ids, "M": len(ids)}) + "\n")
        for r in records:
            if list(r.agent_ids) != ids:
                raise ValidationError("all records in a pair file must share the same agents")
            row = {
                "x": relpath(r.x_path, base),
                "y": relpath(r.y_path, base),
                "ref_x": relpath(r.ref_x_path, base),
                "ref_y": relpath(r.ref_y_path, base),
                "type": r.pair_type,
                "verdicts": list(r.verdicts),
            }
            if r.scores is not None:
                row["scores"] = r.scores
            fh.write(json.dumps(row) + "\n")


def read_pairs(path) -> list:
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != PAIR_FILE_FORMAT:
        raise ValidationError(f"{path}: not a pair file (header {header!r})")
    ids = tuple(header["agent_ids"])
    out = []
    for ln in lines[1:]:
        row = json.loads(ln)
        out.append(
            PairRecord(
                str(resolve(row["x"], base).resolve()),
                str(resolve(row["y"], base).resolve()),
                str(resolve(row["ref_x"], base).resolve()),
                str(resolve(row["ref_y"], base).resolve()),
                int(row["type"]),
                row["verdicts"],
                ids,
                row.get("scores"),
            )
        )
    if any(r.M != header["M"] for r in out):
        raise ValidationError(f"{path}: record verdict count disagrees with header M={header['M']}")
    return out
