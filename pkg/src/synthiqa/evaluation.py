"""Evaluation: rank and linear correlations, logistic linearization, gMAD."""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from scipy import optimize, stats

from .errors import ValidationError

logger = logging.getLogger(__name__)


def _vectors(pred, truth, min_len):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValidationError(f"length mismatch: {pred.size} predictions vs {truth.size} targets")
    if pred.size < min_len:
        raise ValidationError(f"need at least {min_len} points, got {pred.size}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValidationError("non-finite values in predictions or targets")
    return pred, truth


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if den == 0.0:
        raise ValidationError("correlation is undefined for a constant vector")
    return float(np.clip(np.dot(da, db) / den, -1.0, 1.0))


def srcc(pred, truth) -> float:
    """Spearman rank correlation; tied values receive their average rank."""
    pred, truth = _vectors(pred, truth, 2)
    return pearson(stats.rankdata(pred), stats.rankdata(truth))


def logistic4(x, eta1, eta2, eta3, eta4):
    """Monotone four-parameter logistic map used to linearize predictions."""
    x = np.asarray(x, dtype=np.float64)
    z = -(x - eta3) / abs(eta4)
    return (eta1 - eta2) * np.exp(-np.logaddexp(0.0, z)) + eta2


@dataclass
class LogisticFit:
    eta: tuple
    converged: bool = True

    def __call__(self, x):
        return logistic4(x, *self.eta)


def _fit_standardized(z, t, max_iter, tol):
    """LM fit of the logistic on standardized predictions ``z`` and targets ``t``."""

    def residual(eta):
        return logistic4(z, *eta) - t

    def jac(eta):
        e1, e2, e3, e4 = eta
        s = abs(e4)
        u = (z - e3) / s
        sig = np.exp(-np.logaddexp(0.0, -u))
        dsig = sig * (1.0 - sig)
        d = e1 - e2
        return np.stack(
            [sig, 1.0 - sig, -d * dsig / s, -d * dsig * u / s * np.sign(e4 if e4 != 0 else 1.0)], axis=1
        )

    # Starts: the customary one, a near-linear one, and the best points of a
    # coarse (eta3, eta4) grid with eta1, eta2 solved by linear least squares.
    slope, intercept = np.polyfit(z, t, 1)
    wide = 1e4
    starts = [
        (float(t.max()), float(t.min()), 0.0, 1.0),
        (intercept + 2 * slope * wide, intercept - 2 * slope * wide, 0.0, wide),
    ]
    grid = []
    for c in np.quantile(z, np.linspace(0.1, 0.9, 9)):
        for s in (0.1, 0.3, 1.0, 3.0):
            sig = np.exp(-np.logaddexp(0.0, -(z - c) / s))
            a = np.stack([sig, 1.0 - sig], axis=1)
            coef, *_ = np.linalg.lstsq(a, t, rcond=None)
            grid.append((float(np.sum((a @ coef - t) ** 2)), (float(coef[0]), float(coef[1]), float(c), s)))
    grid.sort(key=lambda g: g[0])
    starts += [g[1] for g in grid[:3]]

    best = None
    for x0 in starts:
        try:
            res = optimize.least_squares(
                residual, x0, jac=jac, method="lm", max_nfev=max_iter * 5, xtol=tol, ftol=tol, gtol=tol
            )
        except (ValueError, FloatingPointError) as exc:
            logger.debug("logistic fit from %s failed: %s", x0, exc)
            continue
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
            continue
        if best is None or res.cost < best.cost:
            best = res
    return best


def fit_logistic(pred, truth, max_iter: int = 200, tol: float = 1e-10) -> LogisticFit:
    """Least-squares fit of :func:`logistic4` by Levenberg-Marquardt.

    The fit runs on standardized predictions and targets, so it is
    invariant to affine rescaling of either. Several starts are tried: the
    customary one (eta1 = max truth, eta2 = min truth, eta3 = mean pred,
    eta4 = std pred), a near-linear one whose very wide logistic matches the
    least-squares line, and the best cells of a coarse (eta3, eta4) grid.
    The lowest-residual fit wins, so the result is never worse than a line.
    """
    pred, truth = _vectors(pred, truth, 5)
    sd = float(np.std(pred))
    if sd == 0.0:
        raise ValidationError("cannot fit a logistic to constant predictions")
    mean_p = float(np.mean(pred))
    mean_t = float(np.mean(truth))
    sd_t = float(np.std(truth)) or 1.0
    best = _fit_standardized((pred - mean_p) / sd, (truth - mean_t) / sd_t, max_iter, tol)
    if best is None:
        return LogisticFit((math.nan,) * 4, converged=False)
    e1, e2, e3, e4 = (float(v) for v in best.x)
    eta = (mean_t + sd_t * e1, mean_t + sd_t * e2, mean_p + sd * e3, sd * abs(e4))
    return LogisticFit(eta, converged=bool(np.all(np.isfinite(logistic4(pred, *eta)))))


def plcc_with_fit(pred, truth):
    """PLCC after logistic linearization; falls back to raw PLCC if the fit fails.

    Returns ``(plcc, fit)``; ``fit.converged`` is False on fallback.
    """
    pred, truth = _vectors(pred, truth, 5)
    fit = fit_logistic(pred, truth)
    if fit.converged:
        mapped = fit(pred)
        if np.ptp(mapped) > 0:
            return pearson(mapped, truth), fit
    logger.warning("logistic fit failed; reporting raw PLCC")
    return pearson(pred, truth), LogisticFit(fit.eta, converged=False)


# --- gMAD ------------------------------------------------------------------


@dataclass
class GMADQuery:
    """Hold the defender's score near ``level`` and let the attacker pull apart.

    ``level`` is a quantile of the defender's scores when ``level_is_quantile``
    (the default), otherwise an absolute defender score. ``tolerance`` of
    ``None`` means 1% of the defender's score range.
    """

    defender: str
    attacker: str
    level: float = 0.1
    tolerance: float | None = None
    level_is_quantile: bool = True

    def __post_init__(self):
        if self.defender == self.attacker:
            raise ValidationError("defender and attacker must be different models")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ValidationError("tolerance must be > 0")


@dataclass
class GMADResult:
    img_a: str
    img_b: str
    attacker_gap: float
    anchor: float
    tolerance: float
    band_size: int


def gmad_pairs(defender_scores: dict, attacker_scores: dict, query: GMADQuery) -> GMADResult:
    """Pair with near-equal defender scores and maximal attacker disagreement.

    ``img_a`` is the image the attacker rates higher. Ties in attacker score
    are broken by lexicographic path order.
    """
    paths = sorted(set(defender_scores) & set(attacker_scores))
    if len(paths) < 2:
        raise ValidationError("gMAD needs at least two images scored by both models")
    d = np.array([defender_scores[p] for p in paths], dtype=np.float64)
    a = np.array([attacker_scores[p] for p in paths], dtype=np.float64)
    anchor = float(np.quantile(d, query.level)) if query.level_is_quantile else float(query.level)
    tol = query.tolerance if query.tolerance is not None else 0.01 * float(np.ptp(d))
    if not tol > 0:
        tol = math.inf if np.ptp(d) == 0 else tol
    order = np.argsort(d, kind="stable")
    ds = d[order]
    lo = bisect.bisect_left(ds.tolist(), anchor - tol)
    hi = bisect.bisect_right(ds.tolist(), anchor + tol)
    band = order[lo:hi]
    if band.size < 2:
        raise ValidationError(
            f"fewer than two images with defender score in [{anchor - tol:.6g}, {anchor + tol:.6g}]"
        )
    band_paths = [paths[i] for i in band]
    band_a = a[band]
    top, bottom = band_a.max(), band_a.min()
    if top == bottom:
        first, second = sorted(band_paths)[:2]
        return GMADResult(first, second, 0.0, anchor, tol, int(band.size))
    img_a = min(p for p, s in zip(band_paths, band_a) if s == top)
    img_b = min(p for p, s in zip(band_paths, band_a) if s == bottom)
    return GMADResult(img_a, img_b, float(top - bottom), anchor, tol, int(band.size))


# --- report ----------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["n", "srcc", "plcc_raw", "plcc", "eta", "fit_converged", "model"],
    "properties": {
        "n": {"type": "integer", "minimum": 2},
        "srcc": {"type": "number", "minimum": -1, "maximum": 1},
        "plcc_raw": {"type": "number", "minimum": -1, "maximum": 1},
        "plcc": {"type": "number", "minimum": -1, "maximum": 1},
        "eta": {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 4, "maxItems": 4},
        "fit_converged": {"type": "boolean"},
        "model": {"type": "object"},
        "reliability": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["alpha", "beta"],
                "properties": {"alpha": {"type": "number"}, "beta": {"type": "number"}},
            },
        },
        "gmad": {"type": "array"},
    },
    "additionalProperties": False,
}


@dataclass
class EvalReport:
    n: int
    srcc: float
    plcc_raw: float
    plcc: float
    eta: list
    fit_converged: bool
    model: dict = field(default_factory=dict)
    reliability: dict = field(default_factory=dict)
    gmad: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = [None if (v is None or not math.isfinite(v)) else v for v in d["eta"]]
        jsonschema.validate(d, REPORT_SCHEMA)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        jsonschema.validate(d, REPORT_SCHEMA)
        d["eta"] = [math.nan if v is None else v for v in d["eta"]]
        return cls(**d)


def evaluate_predictions(pred, truth, model_meta=None, reliability=None) -> EvalReport:
    pred, truth = _vectors(pred, truth, 2)
    rho = srcc(pred, truth)
    raw = pearson(pred, truth)
    if pred.size >= 5:
        plcc, fit = plcc_with_fit(pred, truth)
    else:
        plcc, fit = raw, LogisticFit((math.nan,) * 4, converged=False)
    return EvalReport(
        n=int(pred.size),
        srcc=rho,
        plcc_raw=raw,
        plcc=plcc,
        eta=list(fit.eta),
        fit_converged=fit.converged,
        model=dict(model_meta or {}),
        reliability=dict(reliability or {}),
    )


def read_labels(path) -> list:
    """Read a ``path,mos`` CSV (header optional); paths resolve against the file's directory."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            try:
                mos = float(row[1])
            except (ValueError, IndexError):
                if not rows:
                    continue  # header
                raise ValidationError(f"{path}: bad row {row!r}") from None
            p = Path(row[0])
            rows.append(((p if p.is_absolute() else path.parent / p).resolve(), mos))
    return rows


def report(model, labeled_set, reliability=None, agent_ids=None, model_meta=None) -> EvalReport:
    """Score ``labeled_set`` (list of ``(image path, mos)``) with ``model``."""
    from .imaging import load_image
    from .model import predict_scores

    labeled_set = list(labeled_set)
    if not labeled_set:
        raise ValidationError("cannot report on an empty labeled set")
    images = [load_image(p) for p, _ in labeled_set]
    pred = predict_scores(model, images)
    truth = np.array([m for _, m in labeled_set], dtype=np.float64)
    rel = {}
    if reliability is not None:
        alpha = reliability.alpha.detach().double().numpy()
        beta = reliability.beta.detach().double().numpy()
        names = agent_ids or [f"agent{m}" for m in range(alpha.size)]
        rel = {n: {"alpha": float(a), "beta": float(b)} for n, a, b in zip(names, alpha, beta)}
    meta = {"backbone": model.backbone.to_dict()}
    meta.update(model_meta or {})
    return evaluate_predictions(pred, truth, meta, rel)


# --- desk-scale diagnostics --------------------------------------------------


def pairwise_accuracy(model, records) -> float:
    """Fraction of pairs where the model's order agrees with the majority verdict."""
    from .imaging import load_image
    from .model import predict_scores
    from .pairs import majority_label

    records = list(records)
    if not records:
        raise ValidationError("no pairs to score")
    paths = sorted({r.x_path for r in records} | {r.y_path for r in records})
    scores = dict(zip(paths, predict_scores(model, [load_image(p) for p in paths])))
    hits = [int(scores[r.x_path] >= scores[r.y_path]) == majority_label(r) for r in records]
    return float(np.mean(hits))


def probe_domain_accuracy(feat_source, feat_target, seed: int = 0, test_fraction: float = 0.5,
                          weight_decay: float = 1e-3) -> float:
    """Held-out accuracy of a freshly fitted logistic-regression probe that
    separates source from target features. 0.5 means indistinguishable."""
    import torch

    xs = np.asarray(feat_source, dtype=np.float64)
    xt = np.asarray(feat_target, dtype=np.float64)
    if len(xs) < 2 or len(xt) < 2:
        raise ValidationError("the probe needs at least two samples per domain")
    x = np.concatenate([xs, xt])
    y = np.concatenate([np.ones(len(xs)), np.zeros(len(xt))])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    n_test = max(1, int(round(test_fraction * len(x))))
    test, train = perm[:n_test], perm[n_test:]
    mu, sd = x[train].mean(0), x[train].std(0) + 1e-8
    xtr = torch.from_numpy((x[train] - mu) / sd)
    ytr = torch.from_numpy(y[train])
    w = torch.zeros(x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=500, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(xtr @ w + b, ytr) + weight_decay * (w @ w)
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        logits = torch.from_numpy((x[test] - mu) / sd) @ w + b
    return float(np.mean((logits.numpy() > 0) == (y[test] == 1)))
