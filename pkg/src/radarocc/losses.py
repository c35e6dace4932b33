"""Occupancy training losses on (…, 3) logits, differentiable through the tape.

Each loss evaluates its value and its gradient with respect to the softmax
probabilities in numpy, then chains through the softmax Jacobian in one
recorded op.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .occupancy import ClassWeights, FREE
from .tensor_core import Tensor, _accumulate, _result, add, as_tensor, scale, softmax_np

EPS = 1e-12


def _flatten(logits: Tensor, labels) -> tuple[np.ndarray, np.ndarray]:
    z = logits.data.reshape(-1, logits.shape[-1])
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if len(y) != len(z):
        raise ValueError(f"{len(y)} labels for {len(z)} logit rows")
    return z, y


def _prob_loss(logits, labels, fn) -> Tensor:
    """Wrap ``fn(p, y) -> (value, dvalue/dp)`` as a scalar op on logits."""
    logits = as_tensor(logits)
    z, y = _flatten(logits, labels)
    p = softmax_np(z, axis=1)
    value, dp = fn(p, y)

    def backward(g):
        gz = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        _accumulate(logits, (g * gz).reshape(logits.shape))

    return _result(np.array(value), (logits,), backward)


# ---------------------------------------------------------------- cross-entropy

def loss_ce(logits, labels, weights: ClassWeights | None = None) -> Tensor:
    """Class-weighted negative log-likelihood, summed over voxels and divided by their count."""
    logits = as_tensor(logits)
    z, y = _flatten(logits, labels)
    w = (weights or ClassWeights.uniform()).as_array()
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    logp = z[np.arange(len(y)), y] - lse
    clamped = logp < np.log(EPS)
    logp = np.maximum(logp, np.log(EPS))
    wy = w[y]
    n = len(y)
    value = -(wy * logp).sum() / n
    p = np.exp(z - lse[:, None])

    def backward(g):
        onehot = np.zeros_like(z)
        onehot[np.arange(n), y] = 1.0
        gz = (wy * ~clamped)[:, None] * (p - onehot) / n
        _accumulate(logits, (g * gz).reshape(logits.shape))

    return _result(np.array(value), (logits,), backward)


# ---------------------------------------------------------------- Lovász-softmax

def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _lovasz(p: np.ndarray, y: np.ndarray):
    dp = np.zeros_like(p)
    losses = []
    for c in range(p.shape[1]):
        fg = (y == c).astype(np.float64)
        if fg.sum() == 0:
            continue
        sign = np.where(fg > 0, -1.0, 1.0)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        grad = lovasz_grad(fg[order])
        losses.append(float(errors[order] @ grad))
        dp[order, c] += grad * sign[order]
    if not losses:
        return 0.0, dp
    k = len(losses)
    return sum(losses) / k, dp / k


def loss_lovasz(logits, labels) -> Tensor:
    """Lovász-softmax averaged over classes present in the ground truth."""
    return _prob_loss(logits, labels, _lovasz)


# ---------------------------------------------------------------- scene-class affinity

def _nll_ratio(num, den, dnum, dden):
    """-log(num/den) and its gradient given the gradients of num and den."""
    ratio = num / den
    if ratio < EPS:
        return -np.log(EPS), np.zeros_like(dnum)
    return -np.log(ratio), -(dnum / num - dden / den)


def _affinity_terms(q: np.ndarray, t: np.ndarray):
    """Precision/recall/specificity terms for one class.

    ``q`` are the class probabilities, ``t`` the binary support mask.
    Precision and recall need support; specificity needs a non-empty complement.
    """
    value = 0.0
    dq = np.zeros_like(q)
    n_t = t.sum()
    if n_t > 0:
        inter = (q * t).sum()
        v, g = _nll_ratio(inter, q.sum(), t, np.ones_like(q))
        value += v
        dq += g
        v, g = _nll_ratio(inter, n_t, t, np.zeros_like(q))
        value += v
        dq += g
    n_neg = (1 - t).sum()
    if n_neg > 0:
        v, g = _nll_ratio(((1 - q) * (1 - t)).sum(), n_neg, -(1 - t), np.zeros_like(q))
        value += v
        dq += g
    return value, dq


def _scal_geo(p: np.ndarray, y: np.ndarray):
    occ = 1.0 - p[:, FREE]
    t = (y != FREE).astype(np.float64)
    value, docc = _affinity_terms(occ, t)
    dp = np.zeros_like(p)
    dp[:, FREE] = -docc
    return value, dp


def _scal_sem(p: np.ndarray, y: np.ndarray):
    dp = np.zeros_like(p)
    total, count = 0.0, 0
    for c in range(p.shape[1]):
        t = (y == c).astype(np.float64)
        if t.sum() == 0:
            continue
        v, g = _affinity_terms(p[:, c], t)
        total += v
        dp[:, c] += g
        count += 1
    if count == 0:
        return 0.0, dp
    return total / count, dp / count


def loss_scal(logits, labels, variant: str = "geo") -> Tensor:
    if variant == "geo":
        return _prob_loss(logits, labels, _scal_geo)
    if variant == "sem":
        return _prob_loss(logits, labels, _scal_sem)
    raise ValueError(f"unknown affinity variant {variant!r}")


# ---------------------------------------------------------------- total

TERMS = ("ce", "lovasz", "scal_geo", "scal_sem")


@dataclass
class LossNormalizer:
    """Divides each term by a detached EMA of its own magnitude."""

    decay: float = 0.99
    enabled: bool = True
    ema: dict = field(default_factory=dict)

    def update(self, name: str, value: float) -> float:
        if name not in self.ema:
            self.ema[name] = value
        else:
            self.ema[name] = self.decay * self.ema[name] + (1 - self.decay) * value
        return self.ema[name]

    def state(self) -> dict:
        return dict(self.ema)


def total_loss(logits, labels, weights: ClassWeights | None = None,
               normalizer: LossNormalizer | None = None) -> tuple[Tensor, dict]:
    """Sum of the four terms, each optionally divided by its running magnitude.

    Returns the objective and a report of raw term values plus the objective.
    """
    raw = {
        "ce": loss_ce(logits, labels, weights),
        "lovasz": loss_lovasz(logits, labels),
        "scal_geo": loss_scal(logits, labels, "geo"),
        "scal_sem": loss_scal(logits, labels, "sem"),
    }
    report = {k: float(v.data) for k, v in raw.items()}
    total = None
    for k in TERMS:
        term = raw[k]
        if normalizer is not None and normalizer.enabled:
            mag = normalizer.update(k, report[k])
            term = scale(term, 1.0 / mag) if mag > 0 else term
        total = term if total is None else add(total, term)
    report["raw_total"] = sum(report[k] for k in TERMS)
    report["total"] = float(total.data)
    return total, report
