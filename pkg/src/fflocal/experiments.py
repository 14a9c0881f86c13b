"""Scaled-down experiment harnesses: the toy overfit check and the desk trend check.

Both return plain dicts so results can be cached as JSON and compared later.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from .metrics import evaluate
from .model import ModelConfig
from .synth import DatasetConfig, SourceClass, build_manifest, read_manifest
from .synth.dataset import MANIFEST_NAME
from .train import TrainConfig, train

TOY_CLASSES = (SourceClass.RealA, SourceClass.GenA, SourceClass.EditA)
PACKAGE_DIR = Path(__file__).resolve().parent


def source_digest() -> str:
    """Hash of every package source file, stored with cached results."""
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.rglob("*")):
        if p.suffix in (".py", ".txt") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(PACKAGE_DIR)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def ensure_manifest(cfg: DatasetConfig, root: str | Path, workers: int = 1):
    root = Path(root)
    if (root / MANIFEST_NAME).exists():
        return read_manifest(root)
    return build_manifest(cfg, root, workers=workers)


# ---------------------------------------------------------------- overfit


@dataclass
class OverfitConfig:
    per_class: int = 20  # 16 train records each, 48 training samples in total
    image_size: int = 32
    base_channels: int = 32
    batch_size: int = 32
    alpha: float = 1e-3
    steps: int = 500
    seed: int = 0
    variants: tuple[str, ...] = ("share", "hard", "soft")
    min_source_acc: float = 0.95
    min_iou: float = 0.90
    max_seconds: float = 300.0


def toy_dataset_config(cfg: OverfitConfig) -> DatasetConfig:
    return DatasetConfig(
        root_seed=cfg.seed,
        classes=TOY_CLASSES,
        counts={c: cfg.per_class for c in TOY_CLASSES},
        image_size=(cfg.image_size, cfg.image_size),
    )


def overfit_check(data_dir: str | Path, cfg: OverfitConfig = OverfitConfig(), log: Callable[[str], None] | None = None) -> dict:
    """Train every variant on the toy training split and score it on that same split."""
    man = ensure_manifest(toy_dataset_config(cfg), data_dir)
    t0 = time.perf_counter()
    rows = {}
    for variant in cfg.variants:
        mcfg = ModelConfig(num_classes=len(TOY_CLASSES), input_size=cfg.image_size, variant=variant,
                           base_channels=cfg.base_channels)
        tcfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, alpha=cfg.alpha, seed=cfg.seed, augment=False)
        state = train(man, mcfg, tcfg)
        rep = evaluate((state.params, mcfg), man, "train")
        rows[variant] = {"source": rep.totals["source"], "iou": rep.totals["iou"], "final_loss": state.losses[-1]}
        if log:
            log(f"{variant}: source {rows[variant]['source']:.3f} iou {rows[variant]['iou']:.3f}")
    seconds = time.perf_counter() - t0
    passed = seconds < cfg.max_seconds and all(
        r["source"] >= cfg.min_source_acc and r["iou"] >= cfg.min_iou for r in rows.values()
    )
    return {"variants": rows, "seconds": seconds, "passed": passed}


# ---------------------------------------------------------------- trend

# full model against the no-landmark ablation
ORDERED_METRICS = ("binary", "mask_binary", "type", "iou")


@dataclass
class TrendConfig:
    root_seed: int = 0
    steps: int = 5000
    batch_size: int = 8
    alpha: float = 1e-3
    base_channels: int = 16
    eval_batch: int = 32
    min_binary: float = 0.90
    min_iou: float = 0.85
    max_seconds: float = 7200.0
    runs: dict[str, dict] = field(default_factory=lambda: {
        "soft": {},
        "soft-no-landmarks": {"use_landmarks": False},
        "share": {"variant": "share"},
        "hard": {"variant": "hard"},
    })

    def key(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def run_trend(data_dir: str | Path, out_dir: str | Path, cfg: TrendConfig = TrendConfig(),
              log: Callable[[str], None] | None = None) -> dict:
    """Train and evaluate every configuration, then judge the orderings and thresholds."""
    man = ensure_manifest(DatasetConfig(root_seed=cfg.root_seed), data_dir)
    out = Path(out_dir)
    base = ModelConfig(num_classes=len(man.classes), base_channels=cfg.base_channels)
    tcfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, alpha=cfg.alpha, seed=cfg.root_seed)
    t0 = time.perf_counter()
    totals = {}
    for name, overrides in cfg.runs.items():
        mcfg = replace(base, **overrides)
        if log:
            log(f"[{name}] training {cfg.steps} steps")
        state = train(man, mcfg, tcfg, out / name, log=log, log_every=500)
        rep = evaluate((state.params, mcfg), man, "test", cfg.eval_batch)
        rep.write(out / name)
        totals[name] = dict(rep.totals)
        if log:
            log(rep.to_tsv())
    result = judge_trend(totals, cfg)
    result["seconds"] = time.perf_counter() - t0
    result["passed"] = result["passed"] and result["seconds"] < cfg.max_seconds
    result["key"] = cfg.key()
    result["source_digest"] = source_digest()
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def judge_trend(totals: dict[str, dict], cfg: TrendConfig) -> dict:
    full, ablated = totals["soft"], totals["soft-no-landmarks"]
    ordering = {m: full[m] > ablated[m] for m in ORDERED_METRICS}
    thresholds = {
        v: {"binary": totals[v]["binary"] > cfg.min_binary, "iou": totals[v]["iou"] > cfg.min_iou}
        for v in ("share", "hard", "soft")
    }
    passed = all(ordering.values()) and all(all(t.values()) for t in thresholds.values())
    return {"totals": totals, "ordering": ordering, "thresholds": thresholds, "passed": passed}
