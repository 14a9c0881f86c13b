"""Free-form stroke masks (pristine = 1, edited = 0) and compositing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FreeFormMaskParams:
    """Stroke ranges, in pixels at a 128x128 reference frame.

    ``coverage`` bounds the edited fraction of a finished mask; draws outside
    it are rejected and redrawn. ``None`` disables the check.
    """

    stroke_count: tuple[int, int] = (1, 4)
    vertices: tuple[int, int] = (4, 12)
    turn_angle: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    segment_length: tuple[float, float] = (8.0, 40.0)
    brush_width: tuple[float, float] = (6.0, 24.0)
    coverage: tuple[float, float] | None = (0.05, 0.5)
    max_tries: int = 1000

    def __post_init__(self):
        for name in ("stroke_count", "vertices", "turn_angle", "segment_length", "brush_width"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {(lo, hi)}")
        if self.stroke_count[0] < 0 or self.vertices[0] < 1:
            raise ValueError("stroke and vertex counts must be non-negative / positive")
        if self.segment_length[0] < 0 or self.brush_width[0] <= 0:
            raise ValueError("segment lengths must be >= 0 and brush widths > 0")
        if self.coverage is not None and not 0 <= self.coverage[0] <= self.coverage[1] <= 1:
            raise ValueError(f"coverage bounds invalid: {self.coverage}")


def stamp_capsule(mask: np.ndarray, a, b, width: float) -> None:
    """Zero every pixel centre within ``width / 2`` of segment ``a-b`` (in place)."""
    h, w = mask.shape
    r = width / 2
    x0 = max(int(math.floor(min(a[0], b[0]) - r)), 0)
    x1 = min(int(math.ceil(max(a[0], b[0]) + r)) + 1, w)
    y0 = max(int(math.floor(min(a[1], b[1]) - r)), 0)
    y1 = min(int(math.ceil(max(a[1], b[1]) + r)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = b[0] - a[0], b[1] - a[1]
    den = dx * dx + dy * dy
    t = np.zeros_like(xx) if den == 0 else np.clip(((xx - a[0]) * dx + (yy - a[1]) * dy) / den, 0, 1)
    d2 = (xx - a[0] - t * dx) ** 2 + (yy - a[1] - t * dy) ** 2
    mask[y0:y1, x0:x1][d2 <= r * r] = 0


def _draw_strokes(params: FreeFormMaskParams, size, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    k = min(h, w) / 128.0
    mask = np.ones((h, w), dtype=np.uint8)
    n_strokes = int(rng.integers(params.stroke_count[0], params.stroke_count[1] + 1))
    lo, hi = params.turn_angle
    for _ in range(n_strokes):
        n_vert = int(rng.integers(params.vertices[0], params.vertices[1] + 1))
        width = rng.uniform(*params.brush_width) * k
        p = np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)])
        heading = rng.uniform(0, 2 * math.pi)
        for i in range(n_vert):
            # alternate turn direction so strokes zig-zag instead of curling
            turn = abs(rng.uniform(lo, hi))
            heading += turn if i % 2 == 0 else -turn
            length = rng.uniform(*params.segment_length) * k
            q = p + length * np.array([math.cos(heading), math.sin(heading)])
            q = np.clip(q, [0, 0], [w - 1, h - 1])
            stamp_capsule(mask, p, q, width)
            p = q
    return mask


def gen_freeform_mask(params: FreeFormMaskParams, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Random stroke mask ``[1,H,W]`` float32; strokes are 0, the rest 1."""
    for _ in range(params.max_tries):
        m = _draw_strokes(params, size, rng)
        if params.coverage is None:
            break
        frac = 1.0 - m.mean()
        if params.coverage[0] <= frac <= params.coverage[1]:
            break
    else:
        raise RuntimeError(f"no mask within coverage {params.coverage} after {params.max_tries} draws")
    return m.astype(np.float32)[None]


def composite_edited(real: np.ndarray, fake: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``real * mask + fake * (1 - mask)`` per pixel and channel, exactly."""
    if real.shape != fake.shape or mask.shape != (1,) + real.shape[1:]:
        raise ValueError(f"shapes disagree: real {real.shape}, fake {fake.shape}, mask {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("composite mask must be binary")
    return np.where(mask.astype(bool), real, fake)
