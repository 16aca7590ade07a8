"""Batched loss math for selective output smoothing and companion regularizers.

Everything here is a pure function of its arguments: logits come in as an
M x K matrix of un-normalized class scores, losses and analytic gradients
with respect to those logits come out. All arithmetic is done in float64
regardless of the input dtype; callers that train in float32 cast the
returned gradient back down themselves.

The selective smoothing loss adds a mean squared error term between the
logits and a constructed target matrix: samples the model classifies
correctly with probability above a threshold keep their maximum logit and
have every other logit replaced by the mean of those non-maximum entries.
The constructed target is treated as a constant, so no gradient flows
through its construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

# Probabilities are clamped here before any log().
PROB_FLOOR = 1e-12

VARIANTS = ("standard", "complete", "random_sampled")
SCHEDULES = ("constant", "linear_up", "linear_down", "warm_up")


@dataclass(frozen=True)
class HardTargets:
    """One ground-truth class index per sample."""

    labels: np.ndarray


@dataclass(frozen=True)
class SmoothedTargets:
    """One full target distribution per sample; rows must sum to 1."""

    q: np.ndarray


@dataclass(frozen=True)
class PairTargets:
    """Two-label targets from patch mixing: lambda_mix on ya, rest on yb."""

    ya: np.ndarray
    yb: np.ndarray
    lambda_mix: np.ndarray


TargetSpec = Union[HardTargets, SmoothedTargets, PairTargets]


@dataclass(frozen=True)
class SosrConfig:
    """Parameter surface of the smoothing regularizer.

    ``threshold_p`` separates normal from over-confident samples (strictly
    greater wins), ``beta`` weights the smoothing term against cross-entropy.
    ``variant`` picks which samples get smoothed: ``standard`` uses the
    confidence test, ``complete`` smooths every sample, ``random_sampled``
    smooths a Bernoulli(``random_fraction``) subset drawn fresh per batch.
    ``schedule`` shapes beta over training; ``warm_up`` needs a peak epoch.
    """

    threshold_p: float = 0.99
    beta: float = 1.0
    variant: str = "standard"
    random_fraction: float = 0.1
    schedule: str = "constant"
    warmup_peak_epoch: int | None = None

    def __post_init__(self):
        if not 0.0 < self.threshold_p <= 1.0:
            raise ValueError(f"threshold_p must be in (0, 1], got {self.threshold_p}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 < self.random_fraction <= 1.0:
            raise ValueError(f"random_fraction must be in (0, 1], got {self.random_fraction}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.schedule == "warm_up" and self.warmup_peak_epoch is None:
            raise ValueError("warm_up schedule requires warmup_peak_epoch")


@dataclass(frozen=True)
class DesiredOutput:
    """Constructed logit target plus the per-sample modification flags."""

    values: np.ndarray
    modified_mask: np.ndarray


@dataclass(frozen=True)
class LossResult:
    """Joint loss breakdown: total = ce_part + beta * sosr_part."""

    total: float
    ce_part: float
    sosr_part: float
    grad_logits: np.ndarray


def _check_logits(logits) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    if o.ndim == 1:
        o = o[np.newaxis, :]
    if o.ndim != 2:
        raise ValueError(f"logits must be an M x K matrix, got shape {o.shape}")
    m, k = o.shape
    if m < 1 or k < 2:
        raise ValueError(f"logits need M >= 1 and K >= 2, got shape {o.shape}")
    if not np.all(np.isfinite(o)):
        raise ValueError("logits contain non-finite entries")
    return o


def _check_labels(labels, m: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[np.newaxis]
    if y.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {y.shape}")
    y = y.astype(np.intp)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def target_distribution(targets: TargetSpec, m: int, k: int) -> np.ndarray:
    """Expand a target spec to its M x K probability matrix."""
    if isinstance(targets, HardTargets):
        y = _check_labels(targets.labels, m, k)
        q = np.zeros((m, k))
        q[np.arange(m), y] = 1.0
        return q
    if isinstance(targets, SmoothedTargets):
        q = np.asarray(targets.q, dtype=np.float64)
        if q.ndim == 1:
            q = q[np.newaxis, :]
        if q.shape != (m, k):
            raise ValueError(f"smoothed targets have shape {q.shape}, expected {(m, k)}")
        if np.any(q < 0.0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("smoothed target rows must be nonnegative and sum to 1")
        return q
    if isinstance(targets, PairTargets):
        ya = _check_labels(targets.ya, m, k)
        yb = _check_labels(targets.yb, m, k)
        lam = np.asarray(targets.lambda_mix, dtype=np.float64)
        if lam.ndim == 0:
            lam = np.full(m, float(lam))
        if lam.shape != (m,):
            raise ValueError(f"expected {m} mix coefficients, got shape {lam.shape}")
        if np.any(lam < 0.0) or np.any(lam > 1.0):
            raise ValueError("lambda_mix must lie in [0, 1]")
        q = np.zeros((m, k))
        np.add.at(q, (np.arange(m), ya), lam)
        np.add.at(q, (np.arange(m), yb), 1.0 - lam)
        return q
    raise TypeError(f"unsupported target spec {type(targets).__name__}")


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    o = _check_logits(logits)
    shifted = o - o.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, targets: TargetSpec) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient (p - q) / M.

    Pair targets resolve to lambda_mix * CE(ya) + (1 - lambda_mix) * CE(yb),
    which is the same as cross-entropy against the mixed distribution.
    """
    o = _check_logits(logits)
    m, k = o.shape
    q = target_distribution(targets, m, k)
    p = softmax(o)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    loss = float(-(q * logp).sum() / m)
    grad = (p - q) / m
    return loss, grad


def detect_overconfident(logits, labels, threshold_p: float) -> np.ndarray:
    """Flag samples whose argmax matches the label with probability > threshold.

    Argmax ties break toward the lowest index; the comparison against the
    threshold is strict.
    """
    o = _check_logits(logits)
    m, k = o.shape
    y = _check_labels(labels, m, k)
    p = softmax(o)
    pred = np.argmax(o, axis=1)
    return (pred == y) & (p[np.arange(m), pred] > threshold_p)


def detect_overconfident_cutmix(logits, targets: PairTargets, threshold_p: float) -> np.ndarray:
    """Flag samples whose two mixed labels together exceed the threshold.

    The criterion is the sum of the softmax probabilities at both labels;
    when the labels coincide the probability is counted once. No
    argmax-correctness requirement applies here.
    """
    o = _check_logits(logits)
    m, k = o.shape
    ya = _check_labels(targets.ya, m, k)
    yb = _check_labels(targets.yb, m, k)
    p = softmax(o)
    rows = np.arange(m)
    total = p[rows, ya] + np.where(ya == yb, 0.0, p[rows, yb])
    return total > threshold_p


def build_desired_output(logits, mask) -> DesiredOutput:
    """Construct the smoothing target for the given modification flags.

    Unmasked rows are copied verbatim. Masked rows keep their maximum logit
    at its original position and value (ties to the lowest index) and have
    every other entry replaced by the mean of those other entries, which
    also preserves the row sum.
    """
    o = _check_logits(logits)
    m, k = o.shape
    flags = np.asarray(mask, dtype=bool)
    if flags.shape != (m,):
        raise ValueError(f"mask must have shape ({m},), got {flags.shape}")
    values = o.copy()
    rows = np.flatnonzero(flags)
    if rows.size:
        idx = np.argmax(o[rows], axis=1)
        kept = o[rows, idx]
        others = o[rows].copy()
        others[np.arange(rows.size), idx] = 0.0
        # The mean of the non-max entries never exceeds the max in exact
        # arithmetic; clamp the one-ulp rounding cases so the row's maximum
        # entry and index survive bit-exactly.
        mean = np.minimum(others.sum(axis=1) / (k - 1), kept)
        values[rows] = mean[:, np.newaxis]
        values[rows, idx] = kept
    return DesiredOutput(values=values, modified_mask=flags.copy())


def build_desired_output_cutmix(logits, mask, targets: PairTargets) -> DesiredOutput:
    """Smoothing target for mixed samples: both label logits stay put.

    Masked rows keep the entries at both mixed labels and replace the
    remaining entries by their own mean. With nothing left to average
    (two distinct labels at K = 2) the row is unchanged.
    """
    o = _check_logits(logits)
    m, k = o.shape
    ya = _check_labels(targets.ya, m, k)
    yb = _check_labels(targets.yb, m, k)
    flags = np.asarray(mask, dtype=bool)
    if flags.shape != (m,):
        raise ValueError(f"mask must have shape ({m},), got {flags.shape}")
    values = o.copy()
    rows = np.flatnonzero(flags)
    if rows.size:
        keep = np.zeros((rows.size, k), dtype=bool)
        keep[np.arange(rows.size), ya[rows]] = True
        keep[np.arange(rows.size), yb[rows]] = True
        n_others = k - keep.sum(axis=1)
        others_sum = np.where(keep, 0.0, o[rows]).sum(axis=1)
        averageable = n_others > 0
        mean = np.zeros(rows.size)
        mean[averageable] = others_sum[averageable] / n_others[averageable]
        smoothed = np.where(keep, o[rows], mean[:, np.newaxis])
        values[rows[averageable]] = smoothed[averageable]
    return DesiredOutput(values=values, modified_mask=flags.copy())


def apply_variant_mask(variant: str, base_mask, rng=None, fraction: float = 0.1) -> np.ndarray:
    """Transform the detection mask according to the configured variant.

    ``standard`` returns the mask unchanged, ``complete`` flags every sample,
    ``random_sampled`` draws fresh Bernoulli(fraction) flags that ignore the
    base mask entirely.
    """
    base = np.asarray(base_mask, dtype=bool)
    if variant == "standard":
        return base.copy()
    if variant == "complete":
        return np.ones_like(base)
    if variant == "random_sampled":
        if rng is None:
            raise ValueError("random_sampled variant needs a seeded rng")
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        return rng.random(base.shape[0]) < fraction
    raise ValueError(f"unknown variant {variant!r}")


def sosr_loss(
    logits,
    targets: TargetSpec,
    config: SosrConfig,
    effective_beta: float,
    rng=None,
) -> LossResult:
    """Joint loss: cross-entropy plus the weighted logit-smoothing term.

    ``effective_beta`` is the schedule-resolved weight for the current epoch.
    The smoothing term is (1 / (M * K)) * sum((desired - logits)^2) over all
    entries, with the desired matrix held constant, so the gradient is the
    cross-entropy gradient plus effective_beta * (2 / (M * K)) * (O - desired).
    An effective_beta of exactly zero reproduces plain cross-entropy bitwise
    and skips detection entirely.
    """
    o = _check_logits(logits)
    m, k = o.shape
    ce, ce_grad = cross_entropy(o, targets)
    if effective_beta < 0.0:
        raise ValueError(f"effective_beta must be nonnegative, got {effective_beta}")
    if effective_beta == 0.0:
        return LossResult(total=ce, ce_part=ce, sosr_part=0.0, grad_logits=ce_grad)

    if config.variant == "standard":
        if isinstance(targets, PairTargets):
            base = detect_overconfident_cutmix(o, targets, config.threshold_p)
        elif isinstance(targets, SmoothedTargets):
            q = target_distribution(targets, m, k)
            base = detect_overconfident(o, np.argmax(q, axis=1), config.threshold_p)
        else:
            base = detect_overconfident(o, targets.labels, config.threshold_p)
    else:
        base = np.zeros(m, dtype=bool)
    mask = apply_variant_mask(config.variant, base, rng, config.random_fraction)

    if isinstance(targets, PairTargets):
        desired = build_desired_output_cutmix(o, mask, targets)
    else:
        desired = build_desired_output(o, mask)

    diff = o - desired.values
    mse = float((diff * diff).sum() / (m * k))
    grad = ce_grad + effective_beta * (2.0 / (m * k)) * diff
    return LossResult(
        total=ce + effective_beta * mse,
        ce_part=ce,
        sosr_part=mse,
        grad_logits=grad,
    )


def label_smoothing_targets(y, epsilon: float, k: int) -> SmoothedTargets:
    """Smoothed distribution: 1 - eps + eps/K on the label, eps/K elsewhere."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    if k < 2:
        raise ValueError(f"need at least two classes, got {k}")
    labels = np.atleast_1d(np.asarray(y, dtype=np.intp))
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    q = np.full((labels.shape[0], k), epsilon / k)
    q[np.arange(labels.shape[0]), labels] = 1.0 - epsilon + epsilon / k
    return SmoothedTargets(q=q)


def mean_entropy(logits) -> tuple[float, np.ndarray]:
    """Mean Shannon entropy of the softmax rows and its logit gradient."""
    o = _check_logits(logits)
    m, _ = o.shape
    p = softmax(o)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    row_entropy = -(p * logp).sum(axis=1)
    value = float(row_entropy.mean())
    grad = -p * (logp + row_entropy[:, np.newaxis]) / m
    return value, grad


def confidence_penalty_loss(logits, labels, lambda_cp: float) -> tuple[float, np.ndarray]:
    """Cross-entropy minus a multiple of the mean prediction entropy.

    Penalizing low entropy discourages peaked output distributions on every
    sample, confident or not.
    """
    if lambda_cp < 0.0:
        raise ValueError(f"lambda_cp must be nonnegative, got {lambda_cp}")
    o = _check_logits(logits)
    ce, ce_grad = cross_entropy(o, HardTargets(labels=np.asarray(labels)))
    ent, ent_grad = mean_entropy(o)
    return ce - lambda_cp * ent, ce_grad - lambda_cp * ent_grad


def beta_at_epoch(
    schedule_kind: str,
    epoch: int,
    total_epochs: int,
    base_beta: float,
    peak_epoch: int | None = None,
) -> float:
    """Resolve the smoothing weight for one epoch of a scheduled run.

    ``linear_up`` ramps 0 -> base over the run, ``linear_down`` the reverse,
    ``warm_up`` ramps 0 -> base until ``peak_epoch`` then back down to 0 at
    the final epoch.
    """
    if total_epochs < 2:
        raise ValueError(f"schedules need total_epochs >= 2, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    last = total_epochs - 1
    if schedule_kind == "constant":
        return base_beta
    if schedule_kind == "linear_up":
        return base_beta * epoch / last
    if schedule_kind == "linear_down":
        return base_beta * (1.0 - epoch / last)
    if schedule_kind == "warm_up":
        if peak_epoch is None or not 0 <= peak_epoch <= last:
            raise ValueError(f"warm_up needs a peak epoch in [0, {last}]")
        if epoch <= peak_epoch:
            return base_beta if peak_epoch == 0 else base_beta * epoch / peak_epoch
        if peak_epoch == last:
            return base_beta
        return base_beta * (last - epoch) / (last - peak_epoch)
    raise ValueError(f"unknown schedule {schedule_kind!r}; expected one of {SCHEDULES}")
