"""Landmark geometry, similarity alignment and the resize/align/crop pipeline.

Coordinates are ``(x, y)`` pixels with ``x`` to the right and ``y`` down;
pixel ``(i, j)`` of an array sits at ``x = j, y = i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

NUM_LANDMARKS = 68
TARGET_SIZE = 128
RESCALE_RANGE = (0.8, 1.2)
LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)


def validate_landmarks(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (NUM_LANDMARKS, 2):
        raise ValueError(f"a landmark set has shape (68, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("landmark coordinates must be finite")
    return pts


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation``."""

    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"similarity scale must be positive, got {self.scale}")

    @property
    def translation(self) -> tuple[float, float]:
        return (self.tx, self.ty)

    def linear(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear().T + np.array([self.tx, self.ty])

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        inv = SimilarityTransform(inv_scale, -self.rotation, 0.0, 0.0)
        t = inv.apply(np.array([[self.tx, self.ty]]))[0]
        return SimilarityTransform(inv_scale, -self.rotation, -t[0], -t[1])

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """The transform applying ``other`` first, then ``self``."""
        t = self.apply(np.array([[other.tx, other.ty]]))[0]
        return SimilarityTransform(
            self.scale * other.scale, self.rotation + other.rotation, t[0], t[1]
        )


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Closed-form least-squares similarity taking ``src`` onto ``dst``."""
    src, dst = np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
        raise ValueError(f"point sets must both be [K,2], got {src.shape} and {dst.shape}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("point coordinates must be finite")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var = float((xs**2).sum())
    if var <= 1e-12 * max(1.0, float(np.abs(src).max()) ** 2):
        raise ValueError("source landmarks are degenerate (all coincident)")
    a = float((xs * xd).sum())
    b = float((xs[:, 0] * xd[:, 1] - xs[:, 1] * xd[:, 0]).sum())
    rotation = math.atan2(b, a)
    scale = math.hypot(a, b) / var
    c, s = math.cos(rotation), math.sin(rotation)
    t = mu_d - scale * np.array([c * mu_s[0] - s * mu_s[1], s * mu_s[0] + c * mu_s[1]])
    return SimilarityTransform(scale, rotation, float(t[0]), float(t[1]))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # symmetric mirror: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``image [C,H,W]`` at real coordinates, mirror-extended."""
    _, h, w = image.shape
    xs, ys = _snap(xs), _snap(ys)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0).astype(np.float32)
    fy = (ys - y0).astype(np.float32)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = _reflect(x0, w), _reflect(x0 + 1, w)
    ya, yb = _reflect(y0, h), _reflect(y0 + 1, h)
    top = image[:, ya, xa] * (1 - fx) + image[:, ya, xb] * fx
    bot = image[:, yb, xa] * (1 - fx) + image[:, yb, xb] * fx
    out = top * (1 - fy) + bot * fy
    return out.astype(image.dtype, copy=False)


def warp_image(image: np.ndarray, transform: SimilarityTransform, out_size: tuple[int, int]) -> np.ndarray:
    """Resample ``image`` so that output pixel ``p`` shows source ``transform^-1(p)``.

    Samples falling outside the source reflect back in (mirror padding), so
    every output value is a convex combination of input values.
    """
    oh, ow = out_size
    if oh <= 0 or ow <= 0:
        raise ValueError(f"output size must be positive, got {out_size}")
    inv = transform.inverse()
    yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    m = inv.linear()
    xs = m[0, 0] * xx + m[0, 1] * yy + inv.tx
    ys = m[1, 0] * xx + m[1, 1] * yy + inv.ty
    return sample_bilinear(image, xs, ys)


def _resize(image: np.ndarray, ratio: float) -> tuple[np.ndarray, float, float]:
    _, h, w = image.shape
    nh, nw = max(1, round(h * ratio)), max(1, round(w * ratio))
    rx, ry = nw / w, nh / h
    xs = np.arange(nw, dtype=np.float64) / rx
    ys = np.arange(nh, dtype=np.float64) / ry
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(image, gx, gy), rx, ry


def random_rescale(
    image: np.ndarray,
    landmarks,
    rng: np.random.Generator | None = None,
    scale: float | None = None,
    target: int = TARGET_SIZE,
) -> tuple[np.ndarray, np.ndarray]:
    """Resize so the shorter side becomes ``s * target`` with ``s ~ U(0.8, 1.2)``.

    ``scale`` pins ``s``. Landmarks follow the exact per-axis size ratio.
    """
    lm = validate_landmarks(landmarks)
    s = float(rng.uniform(*RESCALE_RANGE)) if scale is None else float(scale)
    ratio = s * target / min(image.shape[1:])
    if ratio == 1.0:
        return image.copy(), lm.copy()
    out, rx, ry = _resize(image, ratio)
    return out, lm * np.array([rx, ry])


def scaled_template(template: np.ndarray, out_size: int) -> np.ndarray:
    """Template coordinates for an ``out_size`` frame (template is stored at 128)."""
    if out_size == TARGET_SIZE:
        return template
    return template * (out_size / TARGET_SIZE)


@dataclass
class Aligned:
    image: np.ndarray
    landmarks: np.ndarray
    mask: np.ndarray | None
    transform: SimilarityTransform


def align_sample(
    image: np.ndarray,
    landmarks,
    template: np.ndarray,
    rng: np.random.Generator | None = None,
    scale: float | None = None,
    out_size: int = TARGET_SIZE,
    mask: np.ndarray | None = None,
) -> Aligned:
    """Rescale, align to the template and mirror-pad/crop; the mask follows the image.

    The mask is resampled bilinearly and re-binarised at 0.5.
    """
    if mask is not None and mask.shape[1:] != image.shape[1:]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape}")
    lm = validate_landmarks(landmarks)
    c = image.shape[0]
    stacked = image if mask is None else np.concatenate([image, mask.astype(image.dtype)], axis=0)
    s = float(rng.uniform(*RESCALE_RANGE)) if scale is None else float(scale)
    ratio = s * out_size / min(image.shape[1:])
    if ratio == 1.0:
        rx = ry = 1.0
    else:
        stacked, rx, ry = _resize(stacked, ratio)
    lm = lm * np.array([rx, ry])
    T = estimate_similarity(lm, scaled_template(template, out_size))
    warped = warp_image(stacked, T, (out_size, out_size))
    out, out_mask = warped[:c], None
    if mask is not None:
        out_mask = (warped[c:] >= 0.5).astype(np.float32)
    return Aligned(out, T.apply(lm), out_mask, T)


def preprocess(
    image: np.ndarray,
    landmarks,
    template: np.ndarray,
    rng: np.random.Generator | None = None,
    scale: float | None = None,
    out_size: int = TARGET_SIZE,
) -> tuple[np.ndarray, np.ndarray]:
    """random_rescale -> similarity alignment -> mirror-padded ``out_size`` crop."""
    a = align_sample(image, landmarks, template, rng, scale, out_size)
    return a.image, a.landmarks


def landmark_pixels(landmarks, size: tuple[int, int]) -> np.ndarray:
    """Integer ``(x, y)`` per landmark: rounded half up, clamped into the frame."""
    h, w = size
    pts = np.floor(np.asarray(landmarks, dtype=np.float64) + 0.5).astype(np.int64)
    pts[..., 0] = np.clip(pts[..., 0], 0, w - 1)
    pts[..., 1] = np.clip(pts[..., 1], 0, h - 1)
    return pts


def encode_landmark_maps(landmarks, size: tuple[int, int]) -> np.ndarray:
    """``[68,H,W]`` float32 maps with a single one per channel."""
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError(f"map size must be positive, got {size}")
    pts = landmark_pixels(landmarks, size)
    maps = np.zeros((len(pts), h, w), dtype=np.float32)
    maps[np.arange(len(pts)), pts[:, 1], pts[:, 0]] = 1.0
    return maps


def interocular_distance(landmarks) -> float:
    lm = np.asarray(landmarks, dtype=np.float64)
    return float(np.linalg.norm(lm[LEFT_EYE].mean(axis=0) - lm[RIGHT_EYE].mean(axis=0)))


def load_template(path: str | Path | None = None) -> np.ndarray:
    """Read a canonical template: 68 lines of ``x y``."""
    if path is None:
        text = resources.files("fflocal").joinpath("data/canonical_template.txt").read_text()
    else:
        text = Path(path).read_text()
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    return validate_landmarks([[float(a), float(b)] for a, b in rows])


def save_template(path: str | Path, template: np.ndarray, header: str = "") -> None:
    pts = validate_landmarks(template)
    lines = [f"# {line}" for line in header.splitlines()]
    lines += [f"{x:.4f} {y:.4f}" for x, y in pts]
    Path(path).write_text("\n".join(lines) + "\n")
