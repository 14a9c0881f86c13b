"""Detection / classification / localization metrics, evaluation and ablation."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import imageio
from .geometry import load_template
from .model import ModelConfig, forward
from .synth.dataset import Manifest
from .synth.faces import ForensicType, SourceClass
from .tensor import Tensor
from .train import TrainConfig, load_state, prepare_batch, train

THRESHOLD = 0.5
METRICS = ("binary", "mask_binary", "type", "source", "iou")
# column labels of the ablation table
ABLATION_COLUMNS = {"FBD": "binary", "FBDM": "mask_binary", "FTC": "type", "FSC": "source", "LC": "iou"}
CLASS_METRICS = ("binary", "type", "source")
MASK_METRICS = ("mask_binary", "iou")


def _as_sources(ids) -> np.ndarray:
    arr = np.asarray(ids)
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"class ids must be a 1-D integer array, got {arr.dtype} {arr.shape}")
    bad = arr[(arr < 0) | (arr >= len(SourceClass))]
    if bad.size:
        raise ValueError(f"unknown class id(s): {sorted(set(bad.tolist()))}")
    return arr.astype(np.int64)


_TYPE_OF = np.array([SourceClass(i).forensic_type for i in range(len(SourceClass))], dtype=np.int64)


def classify_correct(predictions, labels) -> dict[str, np.ndarray]:
    """Per-sample correctness at source, type and real/fake granularity (SourceClass ids)."""
    p, t = _as_sources(predictions), _as_sources(labels)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} labels")
    pt, tt = _TYPE_OF[p], _TYPE_OF[t]
    real = int(ForensicType.Real)
    return {"source": p == t, "type": pt == tt, "binary": (pt == real) == (tt == real)}


def classify_metrics(predictions, labels) -> dict[str, float]:
    return {k: float(v.mean()) if v.size else float("nan") for k, v in classify_correct(predictions, labels).items()}


def mask_binary_detection(p_mask, threshold: float = THRESHOLD) -> np.ndarray:
    """``True`` (fake) per sample iff any pixel falls below ``threshold``.

    Accepts a single mask or a batch whose leading axis is the sample.
    """
    p = np.asarray(p_mask)
    if p.ndim <= 2:
        return np.bool_(np.any(p < threshold))
    return np.any(p.reshape(p.shape[0], -1) < threshold, axis=1)


def iou(pred_mask, gt_mask) -> float:
    """IoU of the fake (0-valued) pixels; two empty fake sets score 1."""
    pred, gt = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"iou: shapes differ {pred.shape} vs {gt.shape}")
    pf, gf = pred == 0, gt == 0
    union = np.count_nonzero(pf | gf)
    if union == 0:
        return 1.0
    return np.count_nonzero(pf & gf) / union


def batch_iou(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Vectorised :func:`iou` over a leading sample axis."""
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"iou: shapes differ {pred_masks.shape} vs {gt_masks.shape}")
    n = pred_masks.shape[0]
    pf = pred_masks.reshape(n, -1) == 0
    gf = gt_masks.reshape(n, -1) == 0
    inter = np.count_nonzero(pf & gf, axis=1)
    union = np.count_nonzero(pf | gf, axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


@dataclass
class MetricsReport:
    """Per-class and total metrics; metrics a model cannot produce are ``None``."""

    classes: tuple[SourceClass, ...]
    counts: dict[SourceClass, int]
    per_class: dict[str, dict[SourceClass, float] | None]
    totals: dict[str, float | None] = field(default_factory=dict)

    @classmethod
    def from_samples(
        cls,
        classes: Sequence[SourceClass],
        labels: np.ndarray,
        values: dict[str, np.ndarray | None],
    ) -> "MetricsReport":
        """Aggregate per-sample values; classes absent from ``labels`` get NaN (n/a)."""
        labels = np.asarray(labels)
        counts = {c: int(np.count_nonzero(labels == int(c))) for c in classes}
        per_class, totals = {}, {}
        for name in METRICS:
            v = values.get(name)
            if v is None:
                per_class[name], totals[name] = None, None
                continue
            v = np.asarray(v, dtype=np.float64)
            per_class[name] = {
                c: float(np.sum(v[labels == int(c)]) / counts[c]) if counts[c] else float("nan") for c in classes
            }
            totals[name] = float(np.sum(v) / v.size) if v.size else float("nan")
        return cls(tuple(classes), counts, per_class, totals)

    def to_tsv(self) -> str:
        header = ["metric"] + [c.name for c in self.classes] + ["Total"]
        rows = ["\t".join(header), "\t".join(["count"] + [str(self.counts[c]) for c in self.classes] + [str(sum(self.counts.values()))])]
        for name in METRICS:
            pc = self.per_class[name]
            if pc is None:
                cells = ["-"] * (len(self.classes) + 1)
            else:
                cells = [_fmt(pc[c]) for c in self.classes] + [_fmt(self.totals[name])]
            rows.append("\t".join([name] + cells))
        return "\n".join(rows) + "\n"

    def to_kv(self) -> str:
        lines = [f"count.{c.name}={self.counts[c]}" for c in self.classes]
        for name in METRICS:
            pc = self.per_class[name]
            if pc is None:
                continue
            lines += [f"{name}.{c.name}={pc[c]!r}" for c in self.classes]
            lines.append(f"{name}.total={self.totals[name]!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike, stem: str = "metrics") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.tsv").write_text(self.to_tsv())
        (out / f"{stem}.kv").write_text(self.to_kv())


def _fmt(x: float) -> str:
    return "n/a" if x != x else f"{100 * x:.2f}"


@dataclass
class Predictions:
    labels: np.ndarray  # SourceClass ids
    predicted: np.ndarray | None  # SourceClass ids
    mask_fake: np.ndarray | None  # bool per sample
    ious: np.ndarray | None


def predict_records(
    params: dict[str, Tensor],
    model_cfg: ModelConfig,
    manifest: Manifest,
    records,
    batch_size: int = 32,
    on_batch: Callable | None = None,
) -> Predictions:
    """Deterministic pass without augmentation (scale fixed to 1.0)."""
    template = load_template()
    classes = manifest.classes
    with_mask = model_cfg.lam != 0
    labels, predicted, fake, ious = [], [], [], []
    for start in range(0, len(records), batch_size):
        batch = prepare_batch(manifest, records[start:start + batch_size], model_cfg.input_size, None, template)
        out = forward(
            params,
            model_cfg,
            batch.images,
            landmark_points=batch.points if model_cfg.use_landmarks else None,
            need_mask=with_mask,
        )
        labels.append([int(classes[i]) for i in batch.labels])
        predicted.append([int(classes[i]) for i in np.argmax(out.class_probs.data, axis=1)])
        if with_mask:
            probs = out.mask_probs.data
            binary = (probs >= THRESHOLD).astype(np.float32)
            fake.append(mask_binary_detection(probs))
            ious.append(batch_iou(binary, batch.masks))
            if on_batch is not None:
                on_batch(start, probs, batch.masks)
    cat = lambda xs: np.concatenate([np.asarray(x) for x in xs]) if xs else np.zeros(0)
    return Predictions(
        cat(labels).astype(np.int64),
        cat(predicted).astype(np.int64) if model_cfg.class_weight != 0 else None,
        cat(fake).astype(bool) if with_mask else None,
        cat(ious) if with_mask else None,
    )


def report_from_predictions(classes, pred: Predictions) -> MetricsReport:
    values: dict[str, np.ndarray | None] = dict.fromkeys(METRICS)
    if pred.predicted is not None:
        values.update(classify_correct(pred.predicted, pred.labels))
    if pred.mask_fake is not None:
        is_fake = _TYPE_OF[pred.labels] != int(ForensicType.Real)
        values["mask_binary"] = pred.mask_fake == is_fake
        values["iou"] = pred.ious
    return MetricsReport.from_samples(classes, pred.labels, values)


def emit_heatmaps(p_mask, gt_mask, out_dir: str | os.PathLike, start: int = 0) -> list[Path]:
    """One grayscale PGM per sample: prediction, ground truth and ``|P - gt|`` stacked vertically."""
    p, g = np.asarray(p_mask, dtype=np.float32), np.asarray(gt_mask, dtype=np.float32)
    if p.shape != g.shape:
        raise ValueError(f"heat-map shapes differ: {p.shape} vs {g.shape}")
    if p.ndim == 3:
        p, g = p[None], g[None]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(p.shape[0]):
        strip = np.concatenate([p[i, 0], g[i, 0], np.abs(p[i, 0] - g[i, 0])], axis=0)
        path = out / f"heatmap_{start + i:05d}.pgm"
        imageio.write_pgm(path, imageio.to_uint8(strip[None])[..., 0])
        paths.append(path)
    return paths


def evaluate(
    checkpoint,
    manifest: Manifest,
    split: str = "test",
    batch_size: int = 32,
    heatmap_dir: str | os.PathLike | None = None,
    heatmap_count: int = 0,
) -> MetricsReport:
    """Metrics of a checkpoint (path, or ``(params, ModelConfig)``) on one split."""
    if isinstance(checkpoint, tuple):
        params, model_cfg = checkpoint
    else:
        state, model_cfg, _, _ = load_state(checkpoint)
        params = state.params
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")

    def on_batch(start, probs, gts):
        keep = max(0, min(len(probs), heatmap_count - start))
        if keep:
            emit_heatmaps(probs[:keep], gts[:keep], heatmap_dir, start)

    hook = on_batch if heatmap_dir is not None and heatmap_count > 0 else None
    pred = predict_records(params, model_cfg, manifest, records, batch_size, hook)
    return report_from_predictions(manifest.classes, pred)


ABLATIONS = {
    "class-only": dict(lam=0.0),
    "mask-only": dict(class_weight=0.0),
    "full": {},
    "no-landmarks": dict(use_landmarks=False),
}


def ablation_table(reports: dict[str, MetricsReport]) -> str:
    lines = ["\t".join(["config"] + list(ABLATION_COLUMNS))]
    for name, rep in reports.items():
        cells = [("-" if rep.totals[m] is None else _fmt(rep.totals[m])) for m in ABLATION_COLUMNS.values()]
        lines.append("\t".join([name] + cells))
    return "\n".join(lines) + "\n"


def ablate(
    manifest: Manifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | os.PathLike,
    configs: Sequence[str] = tuple(ABLATIONS),
    log: Callable[[str], None] | None = None,
) -> dict[str, MetricsReport]:
    """Train and evaluate each ablation from the same seed; writes ``ablation.tsv``."""
    out = Path(out_dir)
    reports = {}
    for name in configs:
        mcfg = replace(model_cfg, **ABLATIONS[name])
        if log:
            log(f"[{name}] training {cfg.steps} steps")
        state = train(manifest, mcfg, cfg, out / name, log=log)
        rep = evaluate((state.params, mcfg), manifest, "test")
        rep.write(out / name)
        reports[name] = rep
    (out / "ablation.tsv").write_text(ablation_table(reports))
    return reports
