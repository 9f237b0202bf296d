"""Acceptance criteria 1-11.

Each test records one PASS/FAIL line through the ``criterion`` fixture; the
lines are repeated in a summary section at the end of the pytest run.
"""

import itertools
import math
import time

import mpmath
import numpy as np
import pytest
import torch

from synthiqa import objectives as O
from synthiqa.distortions import CorpusManifest, ManifestRecord, sample_recipe
from synthiqa.errors import ValidationError
from synthiqa.evaluation import GMADQuery, gmad_pairs, logistic4, plcc_with_fit, srcc
from synthiqa.model import GradientReversal, forward_domain
from synthiqa.pairs import DEFAULT_TYPE_MIX, sample_pairs
from synthiqa.trainer import TrainConfig, _losses, checkpoint_digest, init_state

from cli_pipeline import run_pipeline
from desk_pipeline import run as run_desk
from test_evaluation import monotone_data, oracle_plcc, oracle_srcc
from test_objectives import direct_likelihood

D = torch.float64


def t(x):
    return torch.as_tensor(x, dtype=D)


# --- 1 ---------------------------------------------------------------------


def test_c01_likelihood_oracle(criterion):
    start = time.perf_counter()
    grid = np.linspace(0.02, 0.98, 5)
    worst = 0.0
    for M in (1, 2, 3):
        patterns = list(itertools.product((0, 1), repeat=M))
        for p, a, b in itertools.product(grid, grid, grid):
            got = O.pair_log_likelihood(t([p] * len(patterns)), t(patterns), t([a] * M), t([b] * M))
            for q, g in zip(patterns, got.tolist()):
                worst = max(worst, abs(g - direct_likelihood(p, q, [a] * M, [b] * M)))
    # unequal per-agent rates as well
    rng = np.random.default_rng(0)
    for _ in range(200):
        M = int(rng.integers(1, 4))
        p, a, b = rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99, M), rng.uniform(0.01, 0.99, M)
        patterns = list(itertools.product((0, 1), repeat=M))
        got = O.pair_log_likelihood(t([p] * len(patterns)), t(patterns), t(a), t(b))
        for q, g in zip(patterns, got.tolist()):
            worst = max(worst, abs(g - direct_likelihood(p, q, a, b)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 10
    criterion(1, ok, f"max |log L - oracle| = {worst:.2e} (<= 1e-10), {elapsed:.1f}s (< 10s)")
    assert ok


# --- 2 ---------------------------------------------------------------------


def _toy_state():
    cfg = TrainConfig.desk(crop=(16, 16), feature_dim=8, batch_pairs=3, seed=1)
    state = init_state(cfg, ("a", "b", "c"))
    state.model.double().train()
    state.reliability.double()
    with torch.no_grad():
        state.reliability.alpha_raw.copy_(t([0.3, 1.1, -0.4]))
        state.reliability.beta_raw.copy_(t([0.9, -0.2, 0.5]))
    g = torch.Generator().manual_seed(2)
    x, y = torch.rand(3, 3, 16, 16, generator=g, dtype=D), torch.rand(3, 3, 16, 16, generator=g, dtype=D)
    target = torch.rand(6, 3, 16, 16, generator=g, dtype=D)
    verdicts = t([[1, 1, 0], [0, 0, 0], [1, 0, 1]])
    return state, x, y, verdicts, target


def _components(state, batch):
    l_q, l_c, l_d, l_m, w = _losses(state, "adapt", *batch, mix_rng=np.random.default_rng(4))
    total = O.total_loss(l_q, l_c, l_d, l_m, w)
    return {"l_q": l_q, "l_c": l_c, "l_d": l_d, "l_m": l_m, "total": total}, w


def _directional_fd(state, batch, params, direction, h=1e-5):
    """Central differences of every component along ``direction``."""
    vals = []
    for sign in (1.0, -1.0):
        with torch.no_grad():
            for p, v in zip(params, direction):
                p.add_(sign * h * v)
        comps, _ = _components(state, batch)
        vals.append({k: float(v.detach()) for k, v in comps.items()})
        with torch.no_grad():
            for p, v in zip(params, direction):
                p.sub_(sign * h * v)
    return {k: (vals[0][k] - vals[1][k]) / (2 * h) for k in vals[0]}


def test_c02_gradient_suite(criterion):
    start = time.perf_counter()
    state, *batch = _toy_state()
    batch = tuple(batch)
    scale = state.model.grl.scale
    groups = state.model.parameter_groups()
    groups["alpha_raw"] = [state.reliability.alpha_raw]
    groups["beta_raw"] = [state.reliability.beta_raw]
    upstream = {"features"}
    gen = torch.Generator().manual_seed(3)
    worst, detail = 0.0, ""
    comps, w = _components(state, batch)
    directions = {}
    for name, params in groups.items():
        # unit-norm directions keep the difference steps clear of ReLU kinks
        d = [torch.randn(p.shape, generator=gen, dtype=D) for p in params]
        norm = math.sqrt(sum(float((v**2).sum()) for v in d))
        directions[name] = [v / norm for v in d]
    analytic = {}
    for name, params in groups.items():
        for comp, value in comps.items():
            grads = torch.autograd.grad(value, params, retain_graph=True, allow_unused=True)
            analytic[name, comp] = sum(float((g * v).sum()) for g, v in zip(grads, directions[name]) if g is not None)
    for name, params in groups.items():
        fd = _directional_fd(state, batch, params, directions[name])
        # the reversal layer flips the domain terms on their way into the extractor
        sign = -scale if name in upstream else 1.0
        expected = {
            "l_q": fd["l_q"],
            "l_c": fd["l_c"],
            "l_d": sign * fd["l_d"],
            "l_m": sign * fd["l_m"],
        }
        expected["total"] = (
            fd["l_q"] + w.lambda1 * fd["l_c"] + w.lambda2 * expected["l_d"] + w.lambda3 * expected["l_m"]
        )
        for comp in comps:
            got = analytic[name, comp]
            err = abs(got - expected[comp]) / max(abs(expected[comp]), 1e-8)
            if abs(expected[comp]) < 1e-10 and abs(got) < 1e-10:
                err = 0.0
            if err > worst:
                worst, detail = err, f"{name}/{comp}"

    # pre-GRL features: the discriminator losses seen from the feature vector
    feat = torch.randn(6, 8, generator=gen, dtype=D, requires_grad=True)
    lam = t(np.linspace(0.1, 0.9, 6))

    def feature_losses(f):
        p = forward_domain(state.model, f)
        return O.domain_loss(p[:3], p[3:]) + O.mixup_loss(p, lam)

    (grad,) = torch.autograd.grad(feature_losses(feat), feat)
    direction = torch.randn(feat.shape, generator=gen, dtype=D)
    h = 1e-6
    with torch.no_grad():
        fd = (float(feature_losses(feat + h * direction)) - float(feature_losses(feat - h * direction))) / (2 * h)
    err = abs(float((grad * direction).sum()) + scale * fd) / abs(fd)
    if err > worst:
        worst, detail = err, "pre-GRL features"
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 60
    criterion(2, ok, f"max rel. err {worst:.2e} at {detail or '-'} (<= 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


# --- 3 ---------------------------------------------------------------------


def test_c03_grl_contract(criterion):
    gen = torch.Generator().manual_seed(5)
    w = torch.randn(5, generator=gen, dtype=D)

    def loss(f):
        return torch.sin(f @ w).sum() + (f**3).sum()

    worst, exact = 0.0, True
    for scale in (0.0, 0.25, 1.0, 2.0):
        grl = GradientReversal(scale)
        x = torch.randn(4, 5, generator=gen, dtype=D, requires_grad=True)
        out = grl(x)
        exact &= torch.equal(out, x)
        (g,) = torch.autograd.grad(loss(out), x)
        fd = torch.zeros_like(x)
        h = 1e-6
        with torch.no_grad():
            for i in range(x.numel()):
                e = torch.zeros_like(x).view(-1)
                e[i] = h
                e = e.view_as(x)
                fd.view(-1)[i] = (loss(x + e) - loss(x - e)) / (2 * h)
        worst = max(worst, float((g + scale * fd).abs().max() / fd.abs().max()))
    ok = exact and worst <= 1e-6
    criterion(3, ok, f"forward bit-exact: {exact}; max rel. |grad + scale*FD| = {worst:.2e}")
    assert ok


# --- 4 ---------------------------------------------------------------------


def test_c04_thurstone(criterion):
    rng = np.random.default_rng(6)
    n = 10_000
    fx, fy = t(rng.normal(scale=10, size=n)), t(rng.normal(scale=10, size=n))
    sx, sy = t(rng.uniform(1e-3, 10, n)), t(rng.uniform(1e-3, 10, n))
    worst = float((O.thurstone_prob(fx, fy, sx, sy) + O.thurstone_prob(fy, fx, sy, sx) - 1).abs().max())
    phi1 = float(O.thurstone_prob(t(math.sqrt(2)), t(0.0), t(1.0), t(1.0)))
    ok = worst <= 1e-12 and abs(phi1 - 0.841345) <= 1e-6
    criterion(4, ok, f"max |p(x,y)+p(y,x)-1| = {worst:.1e} (<= 1e-12); Phi(1) case = {phi1:.7f}")
    assert ok


# --- 5 ---------------------------------------------------------------------


def test_c05_adl_reductions(criterion):
    rng = np.random.default_rng(7)
    probs, labels, soft = t(rng.uniform(0.001, 0.999, 64)), t(rng.integers(0, 2, 64)), t(rng.uniform(0, 1, 64))
    equal = {
        "clc": torch.equal(O.clc_loss(probs, labels, 0.0), O.binary_cross_entropy(probs, labels)),
        "domain": torch.equal(O.domain_loss(probs[:32], probs[32:], 0.0), O.domain_loss_bce(probs[:32], probs[32:])),
        "mixup": torch.equal(O.mixup_loss(probs, soft, 0.0), O.binary_cross_entropy(probs, soft)),
    }
    g = float(O.adl(t(0.5), 2.0))
    ok = all(equal.values()) and abs(g - (-0.173287)) <= 1e-6
    criterion(5, ok, f"gamma=0 bit-equal {equal}; g(0.5, 2) = {g:.7f}")
    assert ok


# --- 6 ---------------------------------------------------------------------


def test_c06_correlation_oracles(criterion):
    rng = np.random.default_rng(8)
    worst_s = worst_p = 0.0
    for i in range(100):
        pred, truth = monotone_data(rng)
        if i % 4 == 0:
            # coarse predictions exercise tie handling in the rank oracle
            pred = np.round(pred, 1)
        worst_s = max(worst_s, abs(srcc(pred, truth) - oracle_srcc(pred, truth)))
        worst_p = max(worst_p, abs(plcc_with_fit(pred, truth)[0] - oracle_plcc(pred, truth)))
    worst_exact = 0.0
    for _ in range(20):
        eta = (rng.uniform(2, 6), rng.uniform(-2, 1), rng.normal(), rng.uniform(0.2, 2.0))
        pred = rng.normal(size=50) * 2
        worst_exact = max(worst_exact, abs(plcc_with_fit(pred, logistic4(pred, *eta))[0] - 1.0))
    ok = worst_s <= 1e-9 and worst_p <= 1e-9 and worst_exact <= 1e-6
    criterion(6, ok, f"SRCC err {worst_s:.1e}, PLCC err {worst_p:.1e} (<= 1e-9); exact-logistic |plcc-1| = {worst_exact:.1e}")
    assert ok


# --- 7 ---------------------------------------------------------------------


def test_c07_sampling_laws(criterion):
    n = 100_000
    rng = np.random.default_rng(9)
    recipes = [sample_recipe(rng) for _ in range(n)]
    cat = np.bincount([r.category for r in recipes], minlength=5)[1:] / n
    # an in-memory manifest with the fixture's shape: 32 references x 50 variants
    records = [
        ManifestRecord(f"ref{i:02d}.png", f"ref{i:02d}_{j:02d}.png", recipes[50 * i + j], 50 * i + j)
        for i in range(32)
        for j in range(50)
    ]
    pairs = sample_pairs(CorpusManifest(records, "."), n, rng=np.random.default_rng(10))
    types = np.bincount([p.pair_type for p in pairs], minlength=5)[1:] / n
    dev_c = float(np.abs(cat - (0.40, 0.30, 0.20, 0.10)).max())
    dev_t = float(np.abs(types - DEFAULT_TYPE_MIX).max())
    ok = dev_c <= 0.01 and dev_t <= 0.01
    criterion(7, ok, f"categories {np.round(cat, 4).tolist()} (dev {dev_c:.4f}); pair types {np.round(types, 4).tolist()} (dev {dev_t:.4f})")
    assert ok


# --- 8 ---------------------------------------------------------------------


def exhaustive_gmad(names, d, a, anchor, tol):
    """Every ordered pair in the band; largest attacker gap, then smallest (name_a, name_b)."""
    order = np.argsort(names)
    names, d, a = [names[i] for i in order], d[order], a[order]
    band = np.flatnonzero(np.abs(d - anchor) <= tol)
    gap = a[band][:, None] - a[band][None, :]
    np.fill_diagonal(gap, -np.inf)
    # band indices are in name order, so the first maximal entry in row-major
    # order is the lexicographically smallest pair
    k = int(np.argmax(gap == gap.max()))
    i, j = divmod(k, band.size)
    return names[band[i]], names[band[j]]


def test_c08_gmad_exactness(criterion):
    rng = np.random.default_rng(11)
    mismatches, checked = 0, 0
    for trial in range(100):
        n = int(rng.integers(2, 1001))
        names = [f"img_{i:05d}.png" for i in rng.permutation(n)]
        if trial % 3 == 0:
            d, a = rng.integers(0, 30, n).astype(float), rng.integers(0, 6, n).astype(float)
            tol = float(rng.uniform(0.5, 3))
        else:
            d, a = rng.random(n), rng.random(n)
            tol = float(rng.uniform(0.005, 0.2))
        level = float(rng.uniform(0.05, 0.95))
        query = GMADQuery("defender", "attacker", level=level, tolerance=tol)
        anchor = float(np.quantile(d, level))
        if np.count_nonzero(np.abs(d - anchor) <= tol) < 2:
            with pytest.raises(ValidationError):
                gmad_pairs(dict(zip(names, d)), dict(zip(names, a)), query)
            continue
        r = gmad_pairs(dict(zip(names, d)), dict(zip(names, a)), query)
        checked += 1
        mismatches += (r.img_a, r.img_b) != exhaustive_gmad(names, d, a, anchor, tol)
    ok = mismatches == 0 and checked >= 80
    criterion(8, ok, f"{checked} searchable pools (n <= 1000), {mismatches} mismatches vs exhaustive search")
    assert ok


# --- 9 and 10 --------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return run_desk(tmp_path_factory.mktemp("desk"), seed=0)


def test_c09_desk_end_to_end(desk, criterion):
    r = desk
    checks = {
        "(a) held-out pair accuracy >= 0.80": r["acc_post"] >= 0.80,
        "(b) level SRCC >= 0.6": r["level_srcc_post"] >= 0.6,
        "(c) probe pre >= 0.9": r["probe_pre"] >= 0.9,
        "(c) probe post <= 0.75": r["probe_post"] <= 0.75,
        "CPU <= 15 min": r["timings"]["total"] <= 900,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(
        9,
        ok,
        f"acc {r['acc_pre']:.3f}->{r['acc_post']:.3f} (unseen content {r['acc_cross_post']:.3f}), level SRCC {r['level_srcc_pre']:.3f}->{r['level_srcc_post']:.3f} "
        f"(pooled {r['level_srcc_pooled_post']:.3f}), probe {r['probe_pre']:.3f}->{r['probe_post']:.3f}, "
        f"{r['timings']['total']:.0f}s" + (f"; failed: {failed}" if failed else ""),
    )
    assert ok, failed


def test_c10_reliability_plausibility(desk, criterion):
    r = desk
    M = len(r["alpha"])
    rows = r["pretrain_logs"] + r["logs"]
    inside = all(0 < row[f"{k}_{m}"] < 1 for row in rows for k in ("alpha", "beta") for m in range(M))
    final = np.concatenate([r["alpha"], r["beta"]])
    band = bool(np.all((final > 0.5) & (final < 0.9)))
    ok = inside and band
    criterion(
        10,
        ok,
        f"always in (0,1): {inside}; final alpha {[round(float(a), 3) for a in r['alpha']]}, "
        f"beta {[round(float(b), 3) for b in r['beta']]} in (0.5, 0.9): {band}",
    )
    assert ok


# --- 11 --------------------------------------------------------------------


def test_c11_determinism(tmp_path, criterion):
    a = run_pipeline(tmp_path / "run1", seed=7)
    b = run_pipeline(tmp_path / "run2", seed=7)
    same = {
        "manifest": a["manifest"].read_bytes() == b["manifest"].read_bytes(),
        "pairs": a["pairs"].read_bytes() == b["pairs"].read_bytes(),
        "checkpoints": all(
            checkpoint_digest(a[k]) == checkpoint_digest(b[k]) for k in ("pretrain_ckpt", "adapt_ckpt")
        ),
        "report": a["report"].read_bytes() == b["report"].read_bytes(),
    }
    ok = all(same.values())
    criterion(11, ok, f"byte-identical: {same}")
    assert ok
