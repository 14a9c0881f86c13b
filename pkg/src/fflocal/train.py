"""Training loop with resumable, bit-exact checkpoints."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import align_sample, landmark_pixels, load_template
from .model import ModelConfig, combined_loss, forward, init_params
from .optim import AdamState, adam_step
from .synth.dataset import Manifest, SampleRecord, class_groups, draw_batch
from .tensor import NonFiniteError, Tensor, grad

CHECKPOINT_NAME = "checkpoint.fflc"
LOSS_LOG_NAME = "loss.tsv"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    checkpoint_every: int = 1000
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and checkpoint_every >= 1 are required")

    def to_dict(self) -> dict[str, str]:
        return {f"train.{k}": repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        casts = {"bool": lambda s: s == "True", "int": int, "float": float}
        return cls(**{f.name: casts[f.type](d[f"train.{f.name}"]) for f in fields(cls) if f"train.{f.name}" in d})


@dataclass
class TrainState:
    step: int
    params: dict[str, Tensor]
    optimizer: AdamState
    seed: int
    losses: list[float] = field(default_factory=list)


@dataclass
class Batch:
    images: np.ndarray  # [N,3,S,S]
    masks: np.ndarray  # [N,1,S,S]
    labels: np.ndarray  # [N] indices into the manifest's classes
    points: np.ndarray  # [N,68,2] landmark pixels
    records: list[SampleRecord]


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Randomness of one step depends only on (seed, step), so resuming is exact."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))


def prepare_batch(
    manifest: Manifest,
    records: Sequence[SampleRecord],
    size: int,
    rng: np.random.Generator | None = None,
    template: np.ndarray | None = None,
) -> Batch:
    """Load and align records; ``rng=None`` disables random rescale (scale 1.0)."""
    template = load_template() if template is None else template
    images, masks, points = [], [], []
    for rec in records:
        img, mask = manifest.load(rec)
        a = align_sample(img, rec.landmarks, template, rng, None if rng is not None else 1.0, size, mask)
        images.append(a.image)
        masks.append(a.mask)
        points.append(landmark_pixels(a.landmarks, (size, size)))
    labels = np.array([manifest.label(r.source) for r in records], dtype=np.int64)
    return Batch(np.stack(images), np.stack(masks), labels, np.stack(points), list(records))


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    adam = AdamState(alpha=cfg.alpha, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    return TrainState(0, init_params(model_cfg, cfg.seed), adam, cfg.seed)


def batch_loss(params, model_cfg: ModelConfig, batch: Batch) -> Tensor:
    out = forward(
        params,
        model_cfg,
        batch.images,
        landmark_points=batch.points if model_cfg.use_landmarks else None,
        need_mask=model_cfg.lam != 0,
    )
    return combined_loss(out, batch.labels, batch.masks, model_cfg)


def train_step(state: TrainState, model_cfg: ModelConfig, batch: Batch) -> float:
    """forward -> loss -> backward -> ADAM; parameters are untouched on failure."""
    loss = batch_loss(state.params, model_cfg, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss is {value} at step {state.step + 1}")
    try:
        grads = grad(loss, state.params)
        adam_step(state.params, grads, state.optimizer)
    except NonFiniteError as e:
        raise TrainingDiverged(f"step {state.step + 1}: {e}") from e
    state.step += 1
    state.losses.append(value)
    return value


def state_to_checkpoint(state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig, extra: dict[str, str] | None = None):
    tensors = {f"param/{k}": v.data for k, v in state.params.items()}
    for k, v in state.optimizer.first_moment.items():
        tensors[f"adam.m/{k}"] = v
    for k, v in state.optimizer.second_moment.items():
        tensors[f"adam.v/{k}"] = v
    meta = {**model_cfg.to_dict(), **cfg.to_dict(), **(extra or {})}
    meta["state.step"] = str(state.step)
    meta["state.seed"] = str(state.seed)
    meta["state.adam_steps"] = str(state.optimizer.step_count)
    meta["state.losses"] = ",".join(repr(x) for x in state.losses)
    return tensors, meta


def save_state(path, state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig, extra=None) -> None:
    save_checkpoint(path, *state_to_checkpoint(state, model_cfg, cfg, extra))


def load_state(path) -> tuple[TrainState, ModelConfig, TrainConfig, dict[str, str]]:
    tensors, meta = load_checkpoint(path)
    model_cfg = ModelConfig.from_dict(meta)
    cfg = TrainConfig.from_dict(meta)
    params = {
        k[len("param/"):]: Tensor(v.copy(), requires_grad=True, name=k[len("param/"):])
        for k, v in tensors.items()
        if k.startswith("param/")
    }
    adam = AdamState(
        alpha=cfg.alpha,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        epsilon=cfg.epsilon,
        step_count=int(meta["state.adam_steps"]),
        first_moment={k[len("adam.m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m/")},
        second_moment={k[len("adam.v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v/")},
    )
    losses = [float(x) for x in meta["state.losses"].split(",") if x]
    state = TrainState(int(meta["state.step"]), params, adam, int(meta["state.seed"]), losses)
    return state, model_cfg, cfg, meta


def write_loss_log(path, losses: Sequence[float]) -> None:
    Path(path).write_text("step\tloss\n" + "".join(f"{i}\t{x:.6f}\n" for i, x in enumerate(losses, start=1)))


def train(
    manifest: Manifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    state: TrainState | None = None,
    log: Callable[[str], None] | None = None,
    log_every: int = 100,
) -> TrainState:
    """Run balanced-batch ADAM steps until ``cfg.steps``, checkpointing into ``out_dir``.

    A non-finite loss or update raises :class:`TrainingDiverged`; the newest
    checkpoint on disk is then the last good one.
    """
    groups = class_groups(manifest, "train")
    if len(groups) != model_cfg.num_classes:
        raise ValueError(f"manifest has {len(groups)} classes but the model expects {model_cfg.num_classes}")
    template = load_template()
    state = state if state is not None else init_state(model_cfg, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    extra = {"dataset.classes": ",".join(c.name for c in manifest.classes)}
    if "root_seed" in manifest.meta:
        extra["dataset.root_seed"] = manifest.meta["root_seed"]
    while state.step < cfg.steps:
        rng = step_rng(cfg.seed, state.step)
        records = draw_batch(groups, cfg.batch_size, rng)
        batch = prepare_batch(manifest, records, model_cfg.input_size, rng if cfg.augment else None, template)
        try:
            value = train_step(state, model_cfg, batch)
        except TrainingDiverged as e:
            where = out / CHECKPOINT_NAME if out is not None else "none"
            raise TrainingDiverged(f"{e}; last good checkpoint: {where}") from e
        if log is not None and (state.step % log_every == 0 or state.step == cfg.steps):
            recent = state.losses[-log_every:]
            log(f"step {state.step}/{cfg.steps} loss {value:.4f} (mean of last {len(recent)}: {np.mean(recent):.4f})")
        if out is not None and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps):
            save_state(out / CHECKPOINT_NAME, state, model_cfg, cfg, extra)
            write_loss_log(out / LOSS_LOG_NAME, state.losses)
    return state
