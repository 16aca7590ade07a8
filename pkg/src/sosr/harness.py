"""Experiment orchestration: training loop, census, sweeps, exports, metrics.

A run takes a RunConfig plus one seed and is fully deterministic: the data
order and augmentation draws come from one generator, any randomness inside
the loss (the random-sampled smoothing variant) from another, so switching
the regularizer never perturbs the data stream a matched baseline sees.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses
from .config import RegularizerSpec, RunConfig, build_datasets
from .data import LabeledDataset, augment_standard, cutmix_mix, cutout
from .errors import NumericError
from .losses import (
    HardTargets,
    LossResult,
    PairTargets,
    beta_at_epoch,
    cross_entropy,
    label_smoothing_targets,
    mean_entropy,
    softmax,
    sosr_loss,
)
from .nn import (
    Dense,
    LrSchedule,
    ModelGraph,
    OptimizerState,
    backward,
    build_model,
    forward,
    lr_at_epoch,
    sgd_step,
)

EVAL_BATCH = 512

METRIC_COLUMNS = ("epoch", "train_loss", "ce_part", "sosr_part", "effective_beta", "train_acc", "val_acc")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    ce_part: float
    sosr_part: float
    effective_beta: float
    train_acc: float
    val_acc: float
    census: dict[str, int]
    wall_time_s: float


def _eval_logits(model: ModelGraph, features: np.ndarray) -> np.ndarray:
    chunks = [
        forward(model, features[i : i + EVAL_BATCH])
        for i in range(0, features.shape[0], EVAL_BATCH)
    ]
    return np.concatenate(chunks, axis=0)


def evaluate(model: ModelGraph, dataset: LabeledDataset) -> tuple[float, float]:
    """Top-1 accuracy (argmax, ties to the lowest index) and mean cross-entropy."""
    logits = _eval_logits(model, dataset.features)
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == dataset.labels))
    ce, _ = cross_entropy(logits, HardTargets(dataset.labels))
    return acc, ce


def _census_from_logits(logits: np.ndarray, labels: np.ndarray, thresholds) -> list[int]:
    p = softmax(logits)
    pred = np.argmax(logits, axis=1)
    correct = pred == labels
    p_pred = p[np.arange(labels.shape[0]), pred]
    return [int(np.sum(correct & (p_pred > float(t)))) for t in thresholds]


def census_overconfident(
    model: ModelGraph, dataset: LabeledDataset, thresholds
) -> list[int]:
    """Count samples classified correctly with probability above each threshold.

    Uses a plain evaluation forward pass (no augmentation). Counts are
    non-increasing in the threshold.
    """
    logits = _eval_logits(model, dataset.features)
    return _census_from_logits(logits, dataset.labels, thresholds)


def _prepare_batch(xb, yb, reg: RegularizerSpec, cfg: RunConfig, rng, num_classes: int):
    """Apply input augmentation and shape the batch targets."""
    if cfg.augment == "crop_flip":
        xb = np.stack(
            [
                augment_standard(im, cfg.augment_pad, cfg.augment_crop, cfg.augment_flip_prob, rng)
                for im in xb
            ]
        )
    if reg.cutout_size is not None:
        xb = np.stack([cutout(im, reg.cutout_size, rng) for im in xb])
    if reg.cutmix_alpha is not None and xb.shape[0] >= 2:
        batch = cutmix_mix(xb, yb, reg.cutmix_alpha, rng)
        return batch.mixed_inputs, PairTargets(batch.ya, batch.yb, batch.lambda_mix)
    if reg.label_smoothing_epsilon is not None:
        return xb, label_smoothing_targets(yb, reg.label_smoothing_epsilon, num_classes)
    return xb, HardTargets(yb)


def compute_loss(logits, targets, reg: RegularizerSpec, effective_beta: float, rng=None) -> LossResult:
    """Resolve the configured loss combination on one batch of logits."""
    if reg.sosr is not None:
        result = sosr_loss(logits, targets, reg.sosr, effective_beta, rng)
    else:
        ce, grad = cross_entropy(logits, targets)
        result = LossResult(total=ce, ce_part=ce, sosr_part=0.0, grad_logits=grad)
    if reg.confidence_penalty_weight is not None:
        lam = reg.confidence_penalty_weight
        ent, ent_grad = mean_entropy(logits)
        result = LossResult(
            total=result.total - lam * ent,
            ce_part=result.ce_part,
            sosr_part=result.sosr_part,
            grad_logits=result.grad_logits - lam * ent_grad,
        )
    return result


def train_run(cfg: RunConfig, seed: int) -> tuple[ModelGraph, list[EpochMetrics]]:
    """Train one model and collect per-epoch metrics.

    Raises NumericError (carrying the completed epochs) if the loss ever
    goes non-finite.
    """
    train_ds, val_ds = build_datasets(cfg, seed)
    num_classes = train_ds.num_classes
    model = build_model(cfg.model, seed=seed)
    opt = OptimizerState.for_model(
        model, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    schedule = LrSchedule(cfg.lr, cfg.lr_milestones, cfg.lr_factor)
    reg = cfg.regularizer_spec()
    data_rng = np.random.default_rng([seed, 101])
    loss_rng = np.random.default_rng([seed, 202])

    metrics: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = lr_at_epoch(schedule, epoch)
        if reg.sosr is not None and cfg.epochs >= 2:
            effective_beta = beta_at_epoch(
                reg.sosr.schedule, epoch, cfg.epochs, reg.sosr.beta, reg.sosr.warmup_peak_epoch
            )
        elif reg.sosr is not None:
            effective_beta = reg.sosr.beta
        else:
            effective_beta = 0.0

        order = data_rng.permutation(len(train_ds))
        sums = {"total": 0.0, "ce": 0.0, "sosr": 0.0}
        seen = 0
        for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb, targets = _prepare_batch(
                train_ds.features[idx], train_ds.labels[idx], reg, cfg, data_rng, num_classes
            )
            logits = forward(model, xb, record=True)
            if not np.all(np.isfinite(logits)):
                raise NumericError(
                    f"non-finite logits at epoch {epoch}, batch {batch_index}", metrics
                )
            result = compute_loss(logits, targets, reg, effective_beta, loss_rng)
            if not np.isfinite(result.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}", metrics
                )
            backward(model, result.grad_logits)
            sgd_step(model, opt)
            w = len(idx)
            sums["total"] += result.total * w
            sums["ce"] += result.ce_part * w
            sums["sosr"] += result.sosr_part * w
            seen += w

        train_logits = _eval_logits(model, train_ds.features)
        counts = _census_from_logits(train_logits, train_ds.labels, cfg.census_thresholds)
        train_acc = float(np.mean(np.argmax(train_logits, axis=1) == train_ds.labels))
        val_acc, _ = evaluate(model, val_ds)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=sums["total"] / seen,
                ce_part=sums["ce"] / seen,
                sosr_part=sums["sosr"] / seen,
                effective_beta=effective_beta,
                train_acc=train_acc,
                val_acc=val_acc,
                census=dict(zip(cfg.census_thresholds, counts)),
                wall_time_s=time.perf_counter() - t0,
            )
        )
    return model, metrics


def nontarget_logit_std(model: ModelGraph, dataset: LabeledDataset, threshold_p: float) -> float:
    """Mean per-sample spread of non-target logits over over-confident samples.

    This is the quantity the smoothing term drives down: for each sample the
    model classifies correctly above the threshold, take the standard
    deviation of its non-target logits, then average. NaN when nothing is
    flagged.
    """
    logits = _eval_logits(model, dataset.features).astype(np.float64)
    flags = losses.detect_overconfident(logits, dataset.labels, threshold_p)
    if not flags.any():
        return float("nan")
    rows = logits[flags]
    labels = dataset.labels[flags]
    keep = np.ones_like(rows, dtype=bool)
    keep[np.arange(rows.shape[0]), labels] = False
    others = rows[keep].reshape(rows.shape[0], rows.shape[1] - 1)
    return float(others.std(axis=1).mean())


@dataclass(frozen=True)
class SweepRow:
    value: float
    mean_val_acc: float
    std_val_acc: float
    per_seed: tuple[float, ...]


SWEEP_AXES = {"p": "sosr_threshold_p", "beta": "sosr_beta"}


def sweep(cfg: RunConfig, axis: str, values, seeds=None) -> list[SweepRow]:
    """Train one run per (axis value, seed); report the best validation accuracy.

    The per-run score is the maximum validation accuracy over epochs.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if cfg.regularizer_spec().sosr is None:
        raise ValueError("sweeping requires a regularizer that includes sosr")
    seeds = tuple(seeds) if seeds is not None else cfg.seeds
    rows = []
    for value in values:
        run_cfg = cfg.replace(**{SWEEP_AXES[axis]: float(value)})
        scores = []
        for seed in seeds:
            _, metrics = train_run(run_cfg, seed)
            scores.append(max(m.val_acc for m in metrics))
        rows.append(
            SweepRow(
                value=float(value),
                mean_val_acc=float(np.mean(scores)),
                std_val_acc=float(np.std(scores)),
                per_seed=tuple(scores),
            )
        )
    return rows


# --- metrics persistence ---------------------------------------------------


def _fmt(value) -> str:
    return repr(float(value))


def metrics_header(thresholds) -> str:
    census_cols = ",".join(f"census_{t}" for t in thresholds)
    middle = f",{census_cols}" if census_cols else ""
    return ",".join(METRIC_COLUMNS) + middle + ",wall_time_s"


def write_metrics(metrics: list[EpochMetrics], csv_path, thresholds=None) -> None:
    """Write the per-epoch CSV plus a JSON summary next to it.

    The header is fixed; one row per completed epoch, so a truncated run
    still produces a parseable file. The summary lands at the same path with
    a .json suffix.
    """
    csv_path = Path(csv_path)
    if thresholds is None:
        thresholds = tuple(metrics[0].census.keys()) if metrics else ()
    lines = [metrics_header(thresholds)]
    for m in metrics:
        cells = [
            str(m.epoch),
            _fmt(m.train_loss),
            _fmt(m.ce_part),
            _fmt(m.sosr_part),
            _fmt(m.effective_beta),
            _fmt(m.train_acc),
            _fmt(m.val_acc),
        ]
        cells += [str(m.census[t]) for t in thresholds]
        cells.append(_fmt(m.wall_time_s))
        lines.append(",".join(cells))
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text("\n".join(lines) + "\n")

    summary = {"epochs_completed": len(metrics)}
    if metrics:
        best = max(range(len(metrics)), key=lambda i: metrics[i].val_acc)
        summary.update(
            final_train_acc=metrics[-1].train_acc,
            final_val_acc=metrics[-1].val_acc,
            final_train_loss=metrics[-1].train_loss,
            best_val_acc=metrics[best].val_acc,
            best_val_epoch=metrics[best].epoch,
        )
    csv_path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def read_metrics(csv_path) -> tuple[list[str], list[dict]]:
    """Parse a metrics CSV back into (header columns, row dicts)."""
    lines = Path(csv_path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{csv_path}: empty metrics file")
    columns = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for col, cell in zip(columns, cells):
            row[col] = int(cell) if col == "epoch" or col.startswith("census_") else float(cell)
        rows.append(row)
    return columns, rows


def write_sweep_csv(rows: list[SweepRow], path, axis: str) -> None:
    lines = [f"{axis},mean_val_acc,std_val_acc,seed_val_accs"]
    for row in rows:
        per_seed = ";".join(_fmt(v) for v in row.per_seed)
        lines.append(f"{_fmt(row.value)},{_fmt(row.mean_val_acc)},{_fmt(row.std_val_acc)},{per_seed}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# --- 2-D feature export -----------------------------------------------------

SCATTER_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
SCATTER_VIEW = 600


def penultimate_features(model: ModelGraph, features: np.ndarray) -> np.ndarray:
    """Activations entering the final dense layer."""
    head = ModelGraph(
        layers=model.layers[:-1],
        params=model.params[:-1],
        grads=model.grads[:-1],
        dtype=model.dtype,
    )
    chunks = [
        forward(head, features[i : i + EVAL_BATCH])
        for i in range(0, features.shape[0], EVAL_BATCH)
    ]
    return np.concatenate(chunks, axis=0)


def export_features_2d(model: ModelGraph, dataset: LabeledDataset, csv_path) -> Path:
    """Dump 2-D penultimate features as x,y,label CSV plus an SVG scatter.

    The model's final layer must be a dense classifier fed by exactly two
    features. The SVG companion (same path, .svg suffix) uses a fixed
    600x600 viewport and a 10-color palette cycling over labels.
    """
    last = model.layers[-1] if model.layers else None
    if not isinstance(last, Dense) or last.in_features != 2:
        raise ValueError("feature export needs a final dense layer with 2 input features")
    feats = penultimate_features(model, dataset.features)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,label"]
    for (x, y), label in zip(feats, dataset.labels):
        lines.append(f"{_fmt(x)},{_fmt(y)},{int(label)}")
    csv_path.write_text("\n".join(lines) + "\n")

    svg_path = csv_path.with_suffix(".svg")
    svg_path.write_text(_scatter_svg(feats.astype(np.float64), dataset.labels))
    return svg_path


def _scatter_svg(points: np.ndarray, labels: np.ndarray) -> str:
    pad = 40
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scale = (SCATTER_VIEW - 2 * pad) / span
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SCATTER_VIEW}" '
        f'height="{SCATTER_VIEW}" viewBox="0 0 {SCATTER_VIEW} {SCATTER_VIEW}">',
        f'<rect width="{SCATTER_VIEW}" height="{SCATTER_VIEW}" fill="white"/>',
    ]
    for (x, y), label in zip(points, labels):
        cx = pad + (x - lo[0]) * scale[0]
        cy = SCATTER_VIEW - pad - (y - lo[1]) * scale[1]
        color = SCATTER_PALETTE[int(label) % len(SCATTER_PALETTE)]
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
