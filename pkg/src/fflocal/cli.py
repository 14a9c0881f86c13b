"""``fflocal`` command line: synth, train, eval, ablate, gradcheck.

Settings come from built-in defaults, then an optional flat ``key = value``
config file, then ``--key value`` options, later sources winning.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

from .synth.dataset import DatasetConfig, build_manifest, read_manifest
from .synth.faces import SourceClass

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    root_seed: int = 0
    data_dir: str = "data/desk"
    out_dir: str = "runs/default"
    scale: float = 0.01
    classes: str = ",".join(c.name for c in SourceClass)
    counts: str = ""
    image_size: str = "native"
    artifact_strength: float = 1.0
    workers: int = 1
    input_size: int = 128
    variant: str = "soft"
    use_landmarks: bool = True
    base_channels: int = 16
    lam: float = 100.0
    class_weight: float = 1.0
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 5000
    batch_size: int = 64
    checkpoint_every: int = 1000
    augment: bool = True
    checkpoint: str = ""
    eval_split: str = "test"
    eval_batch: int = 32
    heatmaps: int = 0


HELP = {
    "root_seed": "seed for data synthesis, initialisation and batch order",
    "data_dir": "dataset directory (manifest.tsv lives here)",
    "out_dir": "directory for checkpoints, logs and reports",
    "scale": "fraction of the full per-class counts to synthesise",
    "classes": "comma-separated source classes",
    "counts": "explicit per-class counts, e.g. RealA:20,GenA:20 (overrides scale)",
    "image_size": "HxW for every synthetic image, or native",
    "artifact_strength": "strength of generator artifacts",
    "workers": "processes used by synth",
    "input_size": "network input side in pixels",
    "variant": "mask head: share, hard or soft",
    "use_landmarks": "fuse the landmark stream into the skips",
    "base_channels": "width of the first encoder stage",
    "lam": "weight of the mask loss",
    "class_weight": "weight of the class loss",
    "alpha": "ADAM step size",
    "beta1": "ADAM first-moment decay",
    "beta2": "ADAM second-moment decay",
    "epsilon": "ADAM epsilon",
    "steps": "training steps",
    "batch_size": "training batch size",
    "checkpoint_every": "steps between checkpoints",
    "augment": "random rescale during training",
    "checkpoint": "checkpoint for eval (default: out_dir/checkpoint.fflc)",
    "eval_split": "split evaluated by eval: train, test or all",
    "eval_batch": "evaluation batch size",
    "heatmaps": "number of difference heat-maps written by eval",
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CAST = {"int": int, "float": float, "bool": _parse_bool, "str": str}
_FIELDS = {f.name: f for f in fields(RunConfig)}


def cast_value(key: str, raw: str):
    if key not in _FIELDS:
        raise UsageError(f"unknown config key: {key}")
    try:
        return _CAST[_FIELDS[key].type](raw)
    except ValueError as e:
        raise UsageError(f"bad value for {key}: {e}") from None


def read_config_file(path: str | Path) -> dict[str, object]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = cast_value(k, v)
    return out


def resolve_config(file_values: dict, cli_values: dict) -> RunConfig:
    """Defaults, overridden by the config file, overridden by the command line."""
    cfg = RunConfig()
    for source in (file_values, cli_values):
        for k, v in source.items():
            if k not in _FIELDS:
                raise UsageError(f"unknown config key: {k}")
            setattr(cfg, k, v)
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _key_help() -> str:
    d = RunConfig()
    lines = ["config keys (--key value, or 'key = value' in --config FILE):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name:18s} {HELP[f.name]} (default: {getattr(d, f.name)!r})")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fflocal",
        description="Face forensics detection and localization on synthetic data.",
        epilog=_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, text in (
        ("synth", "generate the synthetic dataset and manifest"),
        ("train", "train a model on the dataset"),
        ("eval", "evaluate a checkpoint"),
        ("ablate", "train and evaluate the four ablation configurations"),
        ("gradcheck", "run the finite-difference gradient suite"),
    ):
        p = sub.add_parser(name, help=text, description=text, epilog=_key_help(), allow_abbrev=False,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--no-landmarks", action="store_true", help="same as --use_landmarks false")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from out_dir/checkpoint.fflc")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name}", dest=f"key_{f.name}", metavar="VALUE", help=argparse.SUPPRESS)
    return parser


def _dataset_config(cfg: RunConfig) -> DatasetConfig:
    try:
        classes = tuple(SourceClass[n.strip()] for n in cfg.classes.split(",") if n.strip())
    except KeyError as e:
        raise UsageError(f"unknown class {e}") from None
    counts = None
    if cfg.counts:
        counts = {}
        for item in cfg.counts.split(","):
            name, _, n = item.partition(":")
            if name.strip() not in SourceClass.__members__ or not n.strip().isdigit():
                raise UsageError(f"bad counts entry: {item!r}")
            counts[SourceClass[name.strip()]] = int(n)
        missing = [c.name for c in classes if c not in counts]
        if missing:
            raise UsageError(f"counts missing for: {', '.join(missing)}")
    size = None
    if cfg.image_size != "native":
        try:
            h, w = (int(v) for v in cfg.image_size.lower().split("x"))
        except ValueError:
            raise UsageError(f"image_size must be HxW or native, got {cfg.image_size!r}") from None
        size = (h, w)
    return DatasetConfig(root_seed=cfg.root_seed, scale=cfg.scale, classes=classes, counts=counts,
                         image_size=size, artifact_strength=cfg.artifact_strength)


def _model_config(cfg: RunConfig, num_classes: int):
    from .model import ModelConfig

    try:
        return ModelConfig(num_classes=num_classes, input_size=cfg.input_size, variant=cfg.variant,
                           use_landmarks=cfg.use_landmarks, base_channels=cfg.base_channels,
                           lam=cfg.lam, class_weight=cfg.class_weight)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train_config(cfg: RunConfig):
    from .train import TrainConfig

    try:
        return TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, alpha=cfg.alpha, beta1=cfg.beta1,
                           beta2=cfg.beta2, epsilon=cfg.epsilon, checkpoint_every=cfg.checkpoint_every,
                           seed=cfg.root_seed, augment=cfg.augment)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_manifest(cfg: RunConfig):
    path = Path(cfg.data_dir)
    if not (path / "manifest.tsv").exists():
        raise FileNotFoundError(f"missing manifest: {path / 'manifest.tsv'} (run 'fflocal synth' first)")
    return read_manifest(path)


def cmd_synth(cfg: RunConfig, force: bool = False) -> int:
    dcfg = _dataset_config(cfg)
    out = Path(cfg.data_dir)
    if (out / "manifest.tsv").exists() and not force:
        raise FileExistsError(f"{out / 'manifest.tsv'} exists; pass --force to regenerate")
    t = time.time()
    man = build_manifest(dcfg, out, overwrite=force, workers=cfg.workers)
    print(f"wrote {len(man.records)} records to {out} in {time.time() - t:.1f}s")
    print(f"{'class':8s} {'train':>7s} {'test':>7s}")
    for c in man.classes:
        recs = [r for r in man.records if r.source == c]
        n_train = sum(r.split == "train" for r in recs)
        print(f"{c.name:8s} {n_train:7d} {len(recs) - n_train:7d}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, force: bool = False, resume: bool = False) -> int:
    from .train import CHECKPOINT_NAME, load_state, train

    man = _load_manifest(cfg)
    mcfg, tcfg = _model_config(cfg, len(man.classes)), _train_config(cfg)
    out = Path(cfg.out_dir)
    ckpt = out / CHECKPOINT_NAME
    state = None
    if resume:
        state, saved_model, _, _ = load_state(ckpt)
        if saved_model != mcfg:
            raise UsageError("model settings differ from the checkpoint being resumed")
        print(f"resuming from step {state.step}")
    elif ckpt.exists() and not force:
        raise FileExistsError(f"{ckpt} exists; pass --resume to continue or --force to restart")
    t = time.time()
    state = train(man, mcfg, tcfg, out, state=state, log=print)
    print(f"trained to step {state.step} in {time.time() - t:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .metrics import evaluate
    from .train import CHECKPOINT_NAME

    man = _load_manifest(cfg)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / CHECKPOINT_NAME
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint: {ckpt}")
    out = Path(cfg.out_dir)
    heat = out / "heatmaps" if cfg.heatmaps > 0 else None
    rep = evaluate(ckpt, man, cfg.eval_split, cfg.eval_batch, heat, cfg.heatmaps)
    rep.write(out)
    print(rep.to_tsv(), end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    from .metrics import ablate, ablation_table

    man = _load_manifest(cfg)
    reports = ablate(man, _model_config(cfg, len(man.classes)), _train_config(cfg), Path(cfg.out_dir) / "ablation", log=print)
    print(ablation_table(reports), end="")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradsuite import run_suite

    t = time.time()
    results = run_suite(cfg.root_seed, log=print)
    failed = [r.case for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed in {time.time() - t:.1f}s")
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        file_values = read_config_file(args.config) if args.config else {}
        cli_values = {}
        for f in fields(RunConfig):
            raw = getattr(args, f"key_{f.name}")
            if raw is not None:
                cli_values[f.name] = cast_value(f.name, raw)
        if args.no_landmarks:
            cli_values["use_landmarks"] = False
        cfg = resolve_config(file_values, cli_values)
        if args.command == "synth":
            return cmd_synth(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.force, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_gradcheck(cfg)
    except UsageError as e:
        print(f"fflocal: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - every failure maps to one exit status
        print(f"fflocal: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
