"""Training objectives.

* Thurstone Case V preference probability and the multi-agent likelihood
  with learnable per-agent hit rate (alpha) and correct-rejection rate (beta).
* The adaptive loss ``g(x) = (1 - x)**gamma * log(x)`` and the consensus,
  domain and mixup losses built on it.
* Pixel-level domain mixup and the weighted joint objective.

Every loss accepts torch tensors and is differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError

CLAMP_EPS = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 0.08
    lambda2: float = 0.08
    lambda3: float = 0.02
    gamma: float = 2.0
    xi: float = 2.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "gamma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.xi <= 0:
            raise ValidationError("xi must be > 0")


class ReliabilityParams(nn.Module):
    """Per-agent hit rate and correct-rejection rate, kept in (0, 1) by a sigmoid."""

    def __init__(self, n_agents: int, init: float = 0.75):
        super().__init__()
        if n_agents < 1:
            raise ValidationError("need at least one agent")
        raw = math.log(init / (1.0 - init))
        self.alpha_raw = nn.Parameter(torch.full((n_agents,), raw))
        self.beta_raw = nn.Parameter(torch.full((n_agents,), raw))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_raw)

    @property
    def beta(self) -> torch.Tensor:
        return torch.sigmoid(self.beta_raw)

    def log_terms(self):
        """``(log a, log(1-a), log b, log(1-b))`` computed stably from the raw values."""
        return (
            F.logsigmoid(self.alpha_raw),
            F.logsigmoid(-self.alpha_raw),
            F.logsigmoid(self.beta_raw),
            F.logsigmoid(-self.beta_raw),
        )


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _require_finite(name, *tensors):
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise ValidationError(f"{name}: non-finite input")


def thurstone_z(fx, fy, sx, sy):
    fx, fy, sx, sy = (_as_tensor(v, fx) for v in (fx, fy, sx, sy))
    _require_finite("thurstone_prob", fx, fy, sx, sy)
    return (fx - fy) / torch.sqrt(sx * sx + sy * sy)


def thurstone_prob(fx, fy, sx, sy):
    """Probability that x is preferred to y: ``Phi((fx - fy) / sqrt(sx^2 + sy^2))``."""
    return torch.special.ndtr(thurstone_z(fx, fy, sx, sy))


def _branch_log_likelihood(log_p, log_1mp, verdicts, log_a, log_1ma, log_b, log_1mb):
    q = verdicts
    log_pos = (q * log_a + (1 - q) * log_1ma).sum(-1)
    log_neg = (q * log_1mb + (1 - q) * log_b).sum(-1)
    return torch.logaddexp(log_p + log_pos, log_1mp + log_neg)


def pair_log_likelihood(p, verdicts, alpha, beta):
    """``log[p * prod_m A_m + (1 - p) * prod_m B_m]`` evaluated in the log domain.

    ``A_m`` is alpha_m for a positive verdict and 1 - alpha_m otherwise;
    ``B_m`` is 1 - beta_m for a positive verdict and beta_m otherwise.
    ``p`` has shape ``(N,)`` (or scalar), ``verdicts`` ``(N, M)`` (or ``(M,)``).
    """
    p = _as_tensor(p)
    alpha = _as_tensor(alpha, p)
    beta = _as_tensor(beta, p)
    q = _as_tensor(verdicts, p).to(p.dtype)
    return _branch_log_likelihood(
        torch.log(p), torch.log1p(-p), q, torch.log(alpha), torch.log1p(-alpha), torch.log(beta), torch.log1p(-beta)
    )


def quality_loss(fx, fy, sx, sy, verdicts, reliability: ReliabilityParams):
    """Negative mean log-likelihood of the agents' verdicts over a batch of pairs."""
    if fx.numel() == 0:
        raise ValidationError("quality_loss needs a non-empty batch")
    z = thurstone_z(fx, fy, sx, sy)
    q = _as_tensor(verdicts, z).to(z.dtype)
    if q.ndim != 2 or q.shape[0] != z.shape[0]:
        raise ValidationError(f"verdicts must have shape ({z.shape[0]}, M), got {tuple(q.shape)}")
    log_a, log_1ma, log_b, log_1mb = (t.to(z.dtype) for t in reliability.log_terms())
    ll = _branch_log_likelihood(
        torch.special.log_ndtr(z), torch.special.log_ndtr(-z), q, log_a, log_1ma, log_b, log_1mb
    )
    return -ll.mean()


def _clamp(x, eps=CLAMP_EPS):
    return x.clamp(eps, 1.0 - eps)


def adl(x, gamma: float, eps: float = CLAMP_EPS):
    """Adaptive loss term ``(1 - x)**gamma * log(x)``, with ``x`` clamped into ``[eps, 1-eps]``."""
    x = _clamp(_as_tensor(x), eps)
    return torch.pow(1.0 - x, gamma) * torch.log(x)


def binary_cross_entropy(probs, labels, eps: float = CLAMP_EPS):
    """Mean binary cross-entropy with the same clamping convention as :func:`adl`."""
    probs = _as_tensor(probs)
    labels = _as_tensor(labels, probs)
    return -(labels * torch.log(_clamp(probs, eps)) + (1 - labels) * torch.log(_clamp(1 - probs, eps))).mean()


def _soft_label_loss(probs, labels, gamma, eps, name):
    probs = _as_tensor(probs)
    labels = _as_tensor(labels, probs).to(probs.dtype)
    if probs.shape != labels.shape:
        raise ValidationError(f"{name}: {tuple(probs.shape)} probabilities vs {tuple(labels.shape)} labels")
    if probs.numel() == 0:
        raise ValidationError(f"{name}: empty batch")
    return -(labels * adl(probs, gamma, eps) + (1 - labels) * adl(1 - probs, gamma, eps)).mean()


def clc_loss(clc_probs, majority_labels, gamma: float = 2.0, eps: float = CLAMP_EPS):
    """Consensus classifier loss against majority-vote labels."""
    return _soft_label_loss(clc_probs, majority_labels, gamma, eps, "clc_loss")


def domain_loss(source_probs, target_probs, gamma: float = 2.0, eps: float = CLAMP_EPS):
    """Adversarial domain loss; source images carry label 1, target images label 0."""
    source_probs = _as_tensor(source_probs)
    target_probs = _as_tensor(target_probs, source_probs)
    if source_probs.numel() == 0 or target_probs.numel() == 0:
        raise ValidationError("domain_loss: both source and target batches must be non-empty")
    return -adl(source_probs, gamma, eps).mean() - adl(1 - target_probs, gamma, eps).mean()


def domain_loss_bce(source_probs, target_probs, eps: float = CLAMP_EPS):
    """Cross-entropy form of :func:`domain_loss` (batch means)."""
    source_probs = _as_tensor(source_probs)
    target_probs = _as_tensor(target_probs, source_probs)
    return -torch.log(_clamp(source_probs, eps)).mean() - torch.log(_clamp(1 - target_probs, eps)).mean()


def mixup_loss(mix_probs, mix_labels, gamma: float = 2.0, eps: float = CLAMP_EPS):
    """Soft-label domain loss on mixed images; the label is the source weight."""
    return _soft_label_loss(mix_probs, mix_labels, gamma, eps, "mixup_loss")


def mixup(x_s, x_t, rng: np.random.Generator | None = None, xi: float = 2.0, lam=None):
    """Convex combination ``lam * x_s + (1 - lam) * x_t`` with ``lam ~ Beta(xi, xi)``.

    Works on single images ``(H, W, 3)`` or batches ``(N, ...)`` (numpy or
    torch); with a batch, one ratio is drawn per image. Returns
    ``(x_m, l_m)`` where ``l_m`` is the ratio(s).
    """
    if tuple(x_s.shape) != tuple(x_t.shape):
        raise ValidationError(f"mixup: shapes differ {tuple(x_s.shape)} vs {tuple(x_t.shape)}")
    batched = isinstance(x_s, torch.Tensor) and x_s.ndim == 4
    n = x_s.shape[0] if batched else None
    if lam is None:
        rng = rng if rng is not None else np.random.default_rng()
        lam = rng.beta(xi, xi, size=n)
    if isinstance(x_s, torch.Tensor):
        lam_t = torch.as_tensor(lam, dtype=x_s.dtype)
        w = lam_t.view(-1, *([1] * (x_s.ndim - 1))) if batched else lam_t
        return w * x_s + (1 - w) * x_t, lam_t
    lam = np.asarray(lam, dtype=np.float64)
    return lam * np.asarray(x_s) + (1 - lam) * np.asarray(x_t), float(lam) if lam.ndim == 0 else lam


def total_loss(l_q, l_c, l_d, l_m, weights: LossWeights):
    """``l_q + lambda1 * l_c + lambda2 * l_d + lambda3 * l_m``."""
    for name, v in (("l_q", l_q), ("l_c", l_c), ("l_d", l_d), ("l_m", l_m)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise ValidationError(f"total_loss: component {name} is not finite ({value})")
    return l_q + weights.lambda1 * l_c + weights.lambda2 * l_d + weights.lambda3 * l_m
