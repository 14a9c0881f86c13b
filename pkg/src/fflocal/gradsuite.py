"""The finite-difference suite run by ``fflocal gradcheck``.

Every case builds float64 inputs from one seeded generator and reduces the op
output to a scalar through a fixed random projection, so every output entry
contributes to the checked gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .gradcheck import GradCheckResult, check_gradients
from .model import ModelConfig, combined_loss, forward, fuse_skip, init_params
from .tensor import Tensor

# relu inputs are kept at least this far from the kink so a step of 1e-3 never crosses it
KINK_MARGIN = 0.05


@dataclass
class SuiteResult:
    case: str
    results: list[GradCheckResult]
    seconds: float

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def _p(rng, *shape, name="p") -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def _away_from_zero(a: np.ndarray) -> np.ndarray:
    return a + KINK_MARGIN * np.where(a >= 0, 1.0, -1.0)


def _op_cases(rng) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    cases = {}

    def add_case(name, build, params):
        proj = {}

        def fn():
            out = build()
            if out.ndim == 0:
                return out
            if "r" not in proj:
                proj["r"] = Tensor(rng.standard_normal(out.shape))
            return T.sum_all(T.mul(out, proj["r"]))

        cases[name] = (fn, params)

    for stride, pad in ((1, 1), (2, 1), (2, 0)):
        x, w, b = _p(rng, 2, 3, 7, 6, name="x"), _p(rng, 4, 3, 3, 3, name="w"), _p(rng, 4, name="b")
        add_case(f"conv2d s{stride} p{pad}", lambda x=x, w=w, b=b, s=stride, q=pad: F.conv2d(x, w, b, s, q),
                 {"x": x, "w": w, "b": b})
    x, w, b = _p(rng, 2, 5, 4, 4, name="x"), _p(rng, 3, 5, 1, 1, name="w"), _p(rng, 3, name="b")
    add_case("conv2d 1x1", lambda: F.conv2d(x, w, b), {"x": x, "w": w, "b": b})

    pts = np.stack([rng.integers(0, 9, (2, 5)), rng.integers(0, 8, (2, 5))], axis=-1)
    lw, lb = _p(rng, 3, 5, 3, 3, name="w"), _p(rng, 3, name="b")
    add_case("landmark_conv2d", lambda: F.landmark_conv2d(pts, lw, lb, (8, 9), stride=2, padding=1),
             {"w": lw, "b": lb})

    dx, dw, db = _p(rng, 2, 3, 5, 5, name="x"), _p(rng, 3, 1, 3, 3, name="w"), _p(rng, 3, name="b")
    add_case("depthwise_conv2d", lambda: F.depthwise_conv2d(dx, dw, db, padding=1), {"x": dx, "w": dw, "b": db})

    tx, tw, tb = _p(rng, 2, 4, 3, 3, name="x"), _p(rng, 4, 2, 2, 2, name="w"), _p(rng, 2, name="b")
    add_case("conv2d_transpose", lambda: F.conv2d_transpose(tx, tw, tb, 2), {"x": tx, "w": tw, "b": tb})

    a, c = _p(rng, 3, 4, name="a"), _p(rng, 3, 4, name="c")
    add_case("add", lambda: T.add(a, c), {"a": a, "c": c})
    add_case("sub", lambda: T.sub(a, c), {"a": a, "c": c})
    add_case("mul", lambda: T.mul(a, c), {"a": a, "c": c})
    add_case("scale", lambda: T.scale(a, -2.5), {"a": a})
    r = Tensor(_away_from_zero(rng.standard_normal((3, 4))), requires_grad=True, name="r")
    add_case("relu", lambda: T.relu(r), {"r": r})
    add_case("sigmoid", lambda: T.sigmoid(a), {"a": a})
    add_case("softmax", lambda: T.softmax(a), {"a": a})
    add_case("sum_all", lambda: T.sum_all(a), {"a": a})
    add_case("mean_all", lambda: T.mean_all(a), {"a": a})
    add_case("reshape", lambda: T.reshape(a, (2, 6)), {"a": a})
    add_case("concat", lambda: T.concat([a, c], axis=1), {"a": a, "c": c})

    g = _p(rng, 2, 3, 4, 5, name="x")
    add_case("global_average_pool", lambda: F.global_average_pool(g), {"x": g})
    dxx, dww, dbb = _p(rng, 4, 6, name="x"), _p(rng, 6, 3, name="w"), _p(rng, 3, name="b")
    add_case("dense", lambda: F.dense(dxx, dww, dbb), {"x": dxx, "w": dww, "b": dbb})
    m = _p(rng, 3, 4, 3, 3, name="m")
    idx = rng.integers(0, 4, 3)
    add_case("select_channel", lambda: F.select_channel(m, idx), {"m": m})
    mw = _p(rng, 3, 4, name="weights")
    add_case("channel_mix", lambda: F.channel_mix(m, mw, 0.25), {"m": m, "weights": mw})

    logits = _p(rng, 5, 4, name="logits")
    target = rng.integers(0, 4, 5)
    add_case("softmax_cross_entropy", lambda: F.softmax_cross_entropy(logits, target), {"logits": logits})
    bl = _p(rng, 2, 1, 3, 4, name="logits")
    bt = (rng.random((2, 1, 3, 4)) < 0.5).astype(np.float64)
    add_case("sigmoid_binary_cross_entropy", lambda: F.sigmoid_binary_cross_entropy(bl, bt), {"logits": bl})

    fparams = {
        "f.reduce.w": _p(rng, 2, 8, 1, 1), "f.reduce.b": _p(rng, 2),
        "f.expand.w": _p(rng, 8, 2, 1, 1), "f.expand.b": _p(rng, 8),
        "f.out.w": _p(rng, 4, 8, 1, 1), "f.out.b": _p(rng, 4),
    }
    fi, fl = _p(rng, 2, 4, 3, 3, name="image_feat"), _p(rng, 2, 4, 3, 3, name="landmark_feat")
    # push the gate's relu inputs off the kink for these particular features
    fparams["f.reduce.b"].data = _away_from_zero(fparams["f.reduce.b"].data) * 3
    add_case("fuse_skip", lambda: fuse_skip(fparams, "f", fi, fl),
             {**fparams, "image_feat": fi, "landmark_feat": fl})
    return cases


def tiny_model_config(variant: str, use_landmarks: bool = True) -> ModelConfig:
    """A model well under 5k parameters on 16x16 inputs, three classes."""
    return ModelConfig(num_classes=3, input_size=16, variant=variant, use_landmarks=use_landmarks, base_channels=2)


def model_case(variant: str, seed: int, use_landmarks: bool = True):
    """Full combined loss of a tiny model in float64."""
    cfg = tiny_model_config(variant, use_landmarks)
    rng = np.random.default_rng(seed)
    params = {k: Tensor(v.data.astype(np.float64), requires_grad=True, name=k)
              for k, v in init_params(cfg, seed).items()}
    # O(1) activations so few relu inputs sit within a step of the kink;
    # this also breaks the tied initial mask channels
    for k, v in params.items():
        if k.endswith(".b"):
            v.data = 0.5 * rng.standard_normal(v.shape)
        else:
            fan_in = v.data[0].size if k != "cls.w" else v.shape[0]
            v.data = rng.standard_normal(v.shape) * np.sqrt(2.0 / fan_in)
    image = rng.random((2, 3, 16, 16))
    pts = np.stack([rng.integers(0, 16, (2, 68)), rng.integers(0, 16, (2, 68))], axis=-1)
    labels = rng.integers(0, 3, 2)
    mask = (rng.random((2, 1, 16, 16)) < 0.5).astype(np.float64)
    cfg_loss = cfg

    def fn():
        out = forward(params, cfg, image, landmark_points=pts if use_landmarks else None)
        return combined_loss(out, labels, mask, cfg_loss)

    return fn, params


def run_suite(seed: int = 0, model_entries: int | None = 24, log: Callable[[str], None] | None = None) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    out = []
    cases = _op_cases(rng)
    for variant in ("share", "hard", "soft"):
        cases[f"combined_loss {variant}"] = model_case(variant, seed)
    cases["combined_loss soft, no landmarks"] = model_case("soft", seed, use_landmarks=False)
    for name, (fn, params) in cases.items():
        t = time.perf_counter()
        entries = model_entries if name.startswith("combined_loss") else None
        res = check_gradients(fn, params, max_entries=entries, rng=np.random.default_rng(seed))
        sr = SuiteResult(name, res, time.perf_counter() - t)
        out.append(sr)
        if log is not None:
            log(f"{'PASS' if sr.passed else 'FAIL'}  {name:40s} max rel-err {sr.max_rel_err:.2e}  ({sr.seconds:.2f}s)")
    return out
