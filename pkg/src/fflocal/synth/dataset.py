"""Dataset fabrication: per-record generation, manifest files, balanced sampling."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .. import imageio
from .faces import (
    EDITED,
    GENERATED,
    REAL,
    SourceClass,
    gen_edit_pair,
    gen_fake_face,
    gen_real_face,
)
from .masks import FreeFormMaskParams, composite_edited, gen_freeform_mask

PAPER_COUNTS = {
    SourceClass.RealA: 202_599,
    SourceClass.RealB: 70_000,
    **{c: 100_000 for c in GENERATED},
    SourceClass.EditA: 202_599,
    SourceClass.EditB: 272_599,
}
TRAIN_FRACTION = 0.8
MANIFEST_NAME = "manifest.tsv"
META_NAME = "dataset.meta"


@dataclass
class DatasetConfig:
    root_seed: int = 0
    scale: float = 0.01
    classes: tuple[SourceClass, ...] = tuple(SourceClass)
    counts: dict[SourceClass, int] | None = None
    image_size: tuple[int, int] | None = None  # None: per-class native size
    artifact_strength: float = 1.0
    mask_params: FreeFormMaskParams = field(default_factory=FreeFormMaskParams)

    def class_counts(self) -> dict[SourceClass, int]:
        if self.counts is not None:
            return {SourceClass(c): int(self.counts[c]) for c in self.classes}
        # round half up so 202,599 x 1/100 -> 2026
        return {c: int(np.floor(PAPER_COUNTS[c] * self.scale + 0.5)) for c in self.classes}


@dataclass
class SampleRecord:
    image_path: str
    mask_path: str
    source: SourceClass
    split: str
    landmarks: np.ndarray

    def to_line(self) -> str:
        pairs = "\t".join(f"{x:.4f},{y:.4f}" for x, y in self.landmarks)
        return f"{self.image_path}\t{self.mask_path}\t{self.source.name}\t{self.split}\t{pairs}"

    @classmethod
    def from_line(cls, line: str) -> "SampleRecord":
        fields = line.rstrip("\n").split("\t")
        if len(fields) != 4 + 68:
            raise ValueError(f"manifest line has {len(fields)} fields, expected 72")
        lm = np.array([[float(v) for v in f.split(",")] for f in fields[4:]])
        return cls(fields[0], fields[1], SourceClass[fields[2]], fields[3], lm)

    @property
    def index(self) -> int:
        return int(Path(self.image_path).stem)


@dataclass
class Manifest:
    root: Path
    records: list[SampleRecord]
    meta: dict[str, str]

    @property
    def classes(self) -> tuple[SourceClass, ...]:
        names = self.meta.get("classes")
        if names:
            return tuple(SourceClass[n] for n in names.split(","))
        return tuple(sorted({r.source for r in self.records}))

    def split(self, name: str) -> list[SampleRecord]:
        if name == "all":
            return list(self.records)
        return [r for r in self.records if r.split == name]

    def by_class(self, split: str = "train") -> dict[SourceClass, list[SampleRecord]]:
        out: dict[SourceClass, list[SampleRecord]] = {c: [] for c in self.classes}
        for r in self.split(split):
            out.setdefault(r.source, []).append(r)
        return out

    def label(self, source: SourceClass) -> int:
        return self.classes.index(source)

    def config(self) -> DatasetConfig:
        m = self.meta
        size = m.get("image_size", "native")
        return DatasetConfig(
            root_seed=int(m["root_seed"]),
            scale=float(m["scale"]),
            classes=self.classes,
            counts={SourceClass[k]: int(v) for k, v in (kv.split(":") for kv in m["counts"].split(","))},
            image_size=None if size == "native" else tuple(int(v) for v in size.split("x")),
            artifact_strength=float(m["artifact_strength"]),
        )

    def load(self, rec: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
        return imageio.load_image(self.root / rec.image_path), imageio.load_mask(self.root / rec.mask_path)


def record_seed(root_seed: int, source: SourceClass, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root_seed, spawn_key=(int(source), index))


@dataclass
class Rendered:
    image: np.ndarray
    mask: np.ndarray
    landmarks: np.ndarray
    real: np.ndarray | None = None
    fake: np.ndarray | None = None


def render_record(cfg: DatasetConfig, source: SourceClass, index: int) -> Rendered:
    """Everything about one record, as a pure function of (config, class, index)."""
    ss = record_seed(cfg.root_seed, source, index)
    face_seed, mask_seed = ss.spawn(2)
    size = cfg.image_size
    if source in REAL:
        img, lm = gen_real_face(face_seed, source, size)
        return Rendered(img, np.ones((1,) + img.shape[1:], np.float32), lm)
    if source in GENERATED:
        img, lm = gen_fake_face(face_seed, source, cfg.artifact_strength, size)
        return Rendered(img, np.zeros((1,) + img.shape[1:], np.float32), lm)
    real, fake, lm = gen_edit_pair(face_seed, source, size=size)
    mask = gen_freeform_mask(cfg.mask_params, real.shape[1:], np.random.default_rng(mask_seed))
    # quantise the components first so the stored composite is byte-exact
    real = imageio.to_uint8(real).transpose(2, 0, 1).astype(np.float32) / 255.0
    fake = imageio.to_uint8(fake).transpose(2, 0, 1).astype(np.float32) / 255.0
    return Rendered(composite_edited(real, fake, mask), mask, lm, real, fake)


def _rel_paths(source: SourceClass, index: int) -> tuple[str, str]:
    return (f"images/{source.name}/{index:06d}.ppm", f"masks/{source.name}/{index:06d}.pgm")


def _write_one(args) -> SampleRecord:
    cfg, out_dir, source, index, split = args
    r = render_record(cfg, source, index)
    img_rel, mask_rel = _rel_paths(source, index)
    imageio.save_image(out_dir / img_rel, r.image)
    imageio.save_mask(out_dir / mask_rel, r.mask)
    return SampleRecord(img_rel, mask_rel, source, split, r.landmarks)


def split_of(index: int, count: int) -> str:
    """First ``floor(0.8 n)`` records of a class train, the rest test."""
    return "train" if index < int(np.floor(TRAIN_FRACTION * count)) else "test"


def build_manifest(cfg: DatasetConfig, out_dir: str | os.PathLike, overwrite: bool = False, workers: int = 1) -> Manifest:
    """Generate every record and write images, masks, manifest and metadata."""
    out = Path(out_dir)
    if (out / MANIFEST_NAME).exists() and not overwrite:
        raise FileExistsError(f"{out / MANIFEST_NAME} exists; refusing to overwrite")
    counts = cfg.class_counts()
    jobs, seen = [], set()
    for source in cfg.classes:
        if counts[source] <= 0:
            raise ValueError(f"class {source.name} has no records at scale {cfg.scale}")
        for d in ("images", "masks"):
            (out / d / source.name).mkdir(parents=True, exist_ok=True)
        for i in range(counts[source]):
            paths = _rel_paths(source, i)
            if paths in seen:
                raise ValueError(f"duplicate record path {paths[0]}")
            seen.add(paths)
            jobs.append((cfg, out, source, i, split_of(i, counts[source])))
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_write_one, jobs, chunksize=16))
    else:
        records = [_write_one(j) for j in jobs]
    meta = {
        "format": "1",
        "root_seed": str(cfg.root_seed),
        "scale": repr(cfg.scale),
        "classes": ",".join(c.name for c in cfg.classes),
        "counts": ",".join(f"{c.name}:{counts[c]}" for c in cfg.classes),
        "image_size": "native" if cfg.image_size is None else "x".join(map(str, cfg.image_size)),
        "artifact_strength": repr(cfg.artifact_strength),
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")
    with open(out / META_NAME, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")
    return Manifest(out, records, meta)


def read_manifest(path: str | os.PathLike) -> Manifest:
    """Load a manifest given its directory or the ``manifest.tsv`` file itself."""
    p = Path(path)
    root = p if p.is_dir() else p.parent
    manifest_file = root / MANIFEST_NAME if p.is_dir() else p
    if not manifest_file.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_file}")
    with open(manifest_file, encoding="utf-8") as fh:
        records = [SampleRecord.from_line(line) for line in fh if line.strip()]
    meta: dict[str, str] = {}
    if (root / META_NAME).exists():
        for line in (root / META_NAME).read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    return Manifest(root, records, meta)


def balanced_sampler(
    manifest: Manifest, batch_size: int = 64, rng: np.random.Generator | None = None, split: str = "train"
) -> Iterator[list[SampleRecord]]:
    """Endless batches: class uniform over the manifest's classes, then record uniform within it."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = rng if rng is not None else np.random.default_rng(0)
    groups = class_groups(manifest, split)
    while True:
        yield draw_batch(groups, batch_size, rng)


def class_groups(manifest: Manifest, split: str = "train") -> list[list[SampleRecord]]:
    """Records of ``split`` grouped in manifest class order; every group must be nonempty."""
    by = manifest.by_class(split)
    groups = [by.get(c, []) for c in manifest.classes]
    empty = [c.name for c, g in zip(manifest.classes, groups) if not g]
    if empty:
        raise ValueError(f"no {split} records for classes: {', '.join(empty)}")
    return groups


def draw_batch(groups: Sequence[Sequence[SampleRecord]], batch_size: int, rng: np.random.Generator) -> list[SampleRecord]:
    """One balanced batch: a uniform class per slot, then a uniform record within it."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    picks = rng.integers(len(groups), size=batch_size)
    return [groups[k][int(rng.integers(len(groups[k])))] for k in picks]


def check_record(manifest: Manifest, rec: SampleRecord, cfg: DatasetConfig | None = None) -> list[str]:
    """Integrity problems for one stored record (empty list when clean)."""
    problems = []
    img, mask = manifest.load(rec)
    if mask.shape[1:] != img.shape[1:]:
        problems.append("mask size differs from image")
    vals = set(np.unique(mask).tolist())
    kind = rec.source.forensic_type.name
    if kind == "Real" and vals != {1.0}:
        problems.append("real record mask is not all pristine")
    if kind == "Generated" and vals != {0.0}:
        problems.append("generated record mask is not all fake")
    if kind == "Edited":
        if vals != {0.0, 1.0}:
            problems.append("edited record mask is not mixed")
        cfg = cfg or manifest.config()
        r = render_record(cfg, rec.source, rec.index)
        expect = imageio.to_uint8(composite_edited(r.real, r.fake, mask))
        stored = imageio.read_pnm(manifest.root / rec.image_path)
        if stored.shape != expect.shape or not np.array_equal(stored, expect):
            problems.append("edited image is not composite(real, fake, mask)")
    return problems


def classes_from_names(names: Sequence[str]) -> tuple[SourceClass, ...]:
    return tuple(SourceClass[n] for n in names)
