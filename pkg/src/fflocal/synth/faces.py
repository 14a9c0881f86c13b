"""Procedural faces with analytic 68-point landmarks.

A face is described in a normalised frame whose unit is the inter-ocular
distance, with the eye centres at ``(-0.5, 0)`` and ``(0.5, 0)``. Landmarks
and every drawn shape are functions of the same :class:`FaceSpec`, so the
landmarks are exact by construction. A similarity map places the frame in
the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np
from scipy.ndimage import gaussian_filter


class SourceClass(IntEnum):
    RealA = 0  # CelebA
    RealB = 1  # FFHQ
    GenA = 2  # DCGAN
    GenB = 3  # LSGAN
    GenC = 4  # BEGAN
    GenD = 5  # WGAN-GP
    GenE = 6  # ProGAN
    GenF = 7  # StyleGAN
    EditA = 8  # StarGAN
    EditB = 9  # SC-FEGAN

    @property
    def forensic_type(self) -> "ForensicType":
        if self <= SourceClass.RealB:
            return ForensicType.Real
        if self <= SourceClass.GenF:
            return ForensicType.Generated
        return ForensicType.Edited


class ForensicType(IntEnum):
    Real = 0
    Generated = 1
    Edited = 2


REAL = (SourceClass.RealA, SourceClass.RealB)
GENERATED = tuple(SourceClass(i) for i in range(2, 8))
EDITED = (SourceClass.EditA, SourceClass.EditB)

# (height, width) before preprocessing
DEFAULT_SIZE = {
    SourceClass.RealA: (218, 178),
    SourceClass.RealB: (256, 256),
    SourceClass.GenA: (128, 128),
    SourceClass.GenB: (128, 128),
    SourceClass.GenC: (128, 128),
    SourceClass.GenD: (128, 128),
    SourceClass.GenE: (256, 256),
    SourceClass.GenF: (256, 256),
    SourceClass.EditA: (218, 178),
    SourceClass.EditB: (256, 256),
}


@dataclass(frozen=True)
class FaceSpec:
    # geometry, face units
    eye_hw: float
    eye_hh: float
    brow_y: float
    brow_arch: float
    nose_tip_y: float
    nostril_hw: float
    mouth_y: float
    mouth_hw: float
    lip_up: float
    lip_down: float
    face_cy: float
    face_a: float
    face_b: float
    asym: tuple[float, float, float] = (0.0, 0.0, 0.0)  # right-eye dy, mouth dx, jaw tilt
    # placement, pixels
    cx: float = 0.0
    cy: float = 0.0
    iod: float = 40.0
    roll: float = 0.0
    # appearance
    skin: tuple[float, float, float] = (0.8, 0.6, 0.5)
    hair: tuple[float, float, float] = (0.2, 0.15, 0.1)
    lips: tuple[float, float, float] = (0.7, 0.3, 0.3)
    iris: tuple[float, float, float] = (0.3, 0.2, 0.1)
    bg_top: tuple[float, float, float] = (0.5, 0.5, 0.5)
    bg_bottom: tuple[float, float, float] = (0.3, 0.3, 0.3)
    light: float = 0.0
    gaze: float = 0.0

    def to_image(self, uv: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.roll), math.sin(self.roll)
        u, v = uv[..., 0], uv[..., 1]
        x = self.iod * (c * u - s * v) + self.cx
        y = self.iod * (s * u + c * v) + self.cy
        return np.stack([x, y], axis=-1)

    def to_face(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.roll), math.sin(self.roll)
        dx, dy = (x - self.cx) / self.iod, (y - self.cy) / self.iod
        return c * dx + s * dy, -s * dx + c * dy


def sample_face(rng: np.random.Generator, size: tuple[int, int], family: SourceClass = SourceClass.RealA) -> FaceSpec:
    """Draw geometry, placement and colours for one face in an ``(H, W)`` image."""
    h, w = size
    u = rng.uniform
    skin_base = np.array([0.86, 0.66, 0.55]) * u(0.55, 1.1)
    skin = tuple(np.clip(skin_base + u(-0.05, 0.05, 3), 0.05, 0.98))
    if family == SourceClass.RealB:
        iod_frac, cy_frac = u(0.25, 0.29), u(0.43, 0.47)
        bg_top = tuple(u(0.55, 0.9, 3))
        bg_bottom = tuple(np.clip(np.array(bg_top) - u(0.0, 0.25), 0, 1))
    else:
        iod_frac, cy_frac = u(0.28, 0.33), u(0.40, 0.46)
        bg_top = tuple(u(0.05, 0.8, 3))
        bg_bottom = tuple(u(0.05, 0.8, 3))
    iod = iod_frac * min(h, w)
    return FaceSpec(
        eye_hw=u(0.17, 0.21),
        eye_hh=u(0.06, 0.085),
        brow_y=u(-0.31, -0.26),
        brow_arch=u(0.04, 0.08),
        nose_tip_y=u(0.51, 0.57),
        nostril_hw=u(0.16, 0.21),
        mouth_y=u(0.97, 1.03),
        mouth_hw=u(0.36, 0.44),
        lip_up=u(0.09, 0.13),
        lip_down=u(0.11, 0.15),
        face_cy=u(0.26, 0.31),
        face_a=u(1.01, 1.06),
        face_b=u(1.31, 1.37),
        cx=w / 2 + u(-0.04, 0.04) * w,
        cy=cy_frac * h,
        iod=iod,
        roll=math.radians(u(-10, 10)),
        skin=skin,
        hair=tuple(np.array([0.25, 0.17, 0.1]) * u(0.2, 2.4) + u(-0.03, 0.03, 3)),
        lips=tuple(np.clip(np.array(skin) * np.array([0.95, 0.55, 0.6]) + u(-0.04, 0.04, 3), 0, 1)),
        iris=tuple(u(0.1, 0.5, 3)),
        bg_top=bg_top,
        bg_bottom=bg_bottom,
        light=u(-0.2, 0.2),
        gaze=u(-0.25, 0.25),
    )


def _ellipse_pts(cx, cy, hw, hh, xs_frac, sign):
    xs = np.asarray(xs_frac, dtype=float)
    return np.stack([cx + xs * hw, cy + sign * hh * np.sqrt(np.clip(1 - xs**2, 0, None))], axis=-1)


def face_landmarks_normalised(f: FaceSpec) -> np.ndarray:
    """The 68 landmarks in face units (iBUG 300-W ordering)."""
    eye_dy, mouth_dx, jaw_tilt = f.asym
    pts = np.zeros((68, 2))
    theta = math.pi * (1 - np.arange(17) / 16)
    pts[0:17, 0] = 0.97 * f.face_a * np.cos(theta)
    pts[0:17, 1] = f.face_cy + 0.97 * f.face_b * np.sin(theta) + 0.97 * jaw_tilt * np.cos(theta)
    t = np.linspace(0, 1, 5)
    pts[17:22, 0] = -0.85 + 0.67 * t
    pts[17:22, 1] = f.brow_y - f.brow_arch * np.sin(math.pi * t)
    pts[22:27, 0] = 0.18 + 0.67 * t
    pts[22:27, 1] = f.brow_y - f.brow_arch * np.sin(math.pi * t) + eye_dy
    pts[27:31, 0] = 0.0
    pts[27:31, 1] = np.linspace(0.0, f.nose_tip_y, 4)
    xn = np.linspace(-1, 1, 5)
    pts[31:36, 0] = xn * f.nostril_hw
    pts[31:36, 1] = f.nose_tip_y + 0.05 + 0.03 * (1 - xn**2)
    k = 1 / 3
    for base, cx, dy in ((36, -0.5, 0.0), (42, 0.5, eye_dy)):
        top = _ellipse_pts(cx, dy, f.eye_hw, f.eye_hh, [-k, k], -1)
        bot = _ellipse_pts(cx, dy, f.eye_hw, f.eye_hh, [k, -k], 1)
        left = [cx - f.eye_hw, dy]
        right = [cx + f.eye_hw, dy]
        pts[base:base + 6] = [left, top[0], top[1], right, bot[0], bot[1]]
    mx, my, mw = mouth_dx, f.mouth_y, f.mouth_hw
    upper = _ellipse_pts(mx, my, mw, f.lip_up, [-2 / 3, -1 / 3, 0, 1 / 3, 2 / 3], -1)
    upper[2, 1] += 0.2 * f.lip_up  # cupid's bow dip
    lower = _ellipse_pts(mx, my, mw, f.lip_down, [2 / 3, 1 / 3, 0, -1 / 3, -2 / 3], 1)
    pts[48] = [mx - mw, my]
    pts[49:54] = upper
    pts[54] = [mx + mw, my]
    pts[55:60] = lower
    iw = 0.85 * mw
    pts[60] = [mx - iw, my]
    pts[61:64] = _ellipse_pts(mx, my, iw, 0.3 * f.lip_up, [-0.45, 0, 0.45], -1)
    pts[64] = [mx + iw, my]
    pts[65:68] = _ellipse_pts(mx, my, iw, 0.3 * f.lip_down, [0.45, 0, -0.45], 1)
    return pts


def face_landmarks(f: FaceSpec) -> np.ndarray:
    return f.to_image(face_landmarks_normalised(f))


def face_ellipse_contains(f: FaceSpec, points_xy: np.ndarray) -> np.ndarray:
    """Whether image points lie inside the (sheared) face ellipse."""
    u, v = f.to_face(points_xy[..., 0], points_xy[..., 1])
    v = v - f.face_cy - f.asym[2] * u / f.face_a
    return (u / f.face_a) ** 2 + (v / f.face_b) ** 2 <= 1.0


def _smooth_step(d: np.ndarray, width: float) -> np.ndarray:
    """Coverage of a shape with signed distance ``d`` (negative inside)."""
    return np.clip(0.5 - d / width, 0.0, 1.0)


def _seg_dist(u, v, pts: np.ndarray) -> np.ndarray:
    best = np.full(u.shape, np.inf)
    for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
        dx, dy = bx - ax, by - ay
        t = np.clip(((u - ax) * dx + (v - ay) * dy) / (dx * dx + dy * dy), 0, 1)
        best = np.minimum(best, np.hypot(u - ax - t * dx, v - ay - t * dy))
    return best


def _paint(img: np.ndarray, alpha: np.ndarray, colour) -> None:
    img *= 1 - alpha
    img += alpha * np.asarray(colour, dtype=img.dtype)[:, None, None]


def render_face(f: FaceSpec, size: tuple[int, int]) -> np.ndarray:
    """Noise-free rendering, float32 ``[3,H,W]`` in [0,1]."""
    h, w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = f.to_face(x, y)
    aa = 1.5 / f.iod
    lm = face_landmarks_normalised(f)
    eye_dy, mouth_dx, jaw_tilt = f.asym

    t = (y / max(h - 1, 1))[None]
    img = (np.asarray(f.bg_top)[:, None, None] * (1 - t) + np.asarray(f.bg_bottom)[:, None, None] * t)
    img = img.astype(np.float32)

    hair_d = (np.sqrt((u / (f.face_a * 1.12)) ** 2 + ((v - f.face_cy + 0.3) / (f.face_b * 1.02)) ** 2) - 1)
    hair_d = np.maximum(hair_d, v - f.face_cy - 0.2)
    _paint(img, _smooth_step(hair_d * f.face_a, aa), f.hair)

    neck = np.maximum(np.abs(u) - 0.5 * f.face_a, f.face_cy + 0.6 * f.face_b - v)
    _paint(img, _smooth_step(neck, aa), np.asarray(f.skin) * 0.8)

    ell = np.sqrt((u / f.face_a) ** 2 + ((v - f.face_cy - jaw_tilt * u / f.face_a) / f.face_b) ** 2)
    face_alpha = _smooth_step((ell - 1) * f.face_a, aa)
    shade = 1.0 - 0.18 * (u / f.face_a) ** 2 + f.light * u / f.face_a * 0.5
    skin = np.asarray(f.skin)[:, None, None] * np.clip(shade, 0.3, 1.2)[None]
    img = img * (1 - face_alpha) + skin.astype(np.float32) * face_alpha

    for seg in (lm[17:22], lm[22:27]):
        _paint(img, _smooth_step(_seg_dist(u, v, seg) - 0.035, aa), f.hair)
    nose = _seg_dist(u, v, np.array([[0.0, 0.15], lm[30]]))
    _paint(img, 0.25 * _smooth_step(nose - 0.03, aa * 2), np.asarray(f.skin) * 0.6)
    for sx in (-1, 1):
        d = np.hypot((u - sx * 0.09) / 0.06, (v - f.nose_tip_y - 0.05) / 0.03) - 1
        _paint(img, _smooth_step(d * 0.03, aa), np.asarray(f.skin) * 0.35)

    for cx, dy in ((-0.5, 0.0), (0.5, eye_dy)):
        d = (np.hypot((u - cx) / f.eye_hw, (v - dy) / f.eye_hh) - 1) * f.eye_hh
        _paint(img, _smooth_step(d, aa), (0.93, 0.92, 0.9))
        ir = f.eye_hh * 0.95
        d_ir = np.hypot(u - cx - f.gaze * f.eye_hw * 0.5, v - dy) - ir
        d_ir = np.maximum(d_ir, d)
        _paint(img, _smooth_step(d_ir, aa), f.iris)
        d_pu = np.maximum(np.hypot(u - cx - f.gaze * f.eye_hw * 0.5, v - dy) - ir * 0.45, d)
        _paint(img, _smooth_step(d_pu, aa), (0.03, 0.03, 0.03))

    mx, my, mw = mouth_dx, f.mouth_y, f.mouth_hw
    xn = np.clip((u - mx) / mw, -1, 1)
    root = np.sqrt(1 - xn**2)
    lip_d = np.maximum.reduce([
        np.abs(u - mx) - mw,
        (my - f.lip_up * root) - v,
        v - (my + f.lip_down * root),
    ])
    _paint(img, _smooth_step(lip_d, aa), f.lips)
    iw = 0.85 * mw
    xi = np.clip((u - mx) / iw, -1, 1)
    ri = np.sqrt(1 - xi**2)
    inner_d = np.maximum.reduce([np.abs(u - mx) - iw, (my - 0.3 * f.lip_up * ri) - v, v - (my + 0.3 * f.lip_down * ri)])
    _paint(img, _smooth_step(inner_d, aa), np.asarray(f.lips) * 0.3)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------ textures


def sensor_grain(rng: np.random.Generator, size: tuple[int, int], family: SourceClass) -> np.ndarray:
    """Camera-like noise that marks pristine pixels; coarse for RealA, fine for RealB."""
    h, w = size
    if family == SourceClass.RealB:
        g = rng.normal(0.0, 0.035, (1, h, w)) + rng.normal(0.0, 0.01, (3, h, w))
    else:
        g = gaussian_filter(rng.normal(0.0, 0.07, (1, h, w)), sigma=(0, 0.8, 0.8)) + rng.normal(0.0, 0.012, (3, h, w))
    return g.astype(np.float32)


def _ripple(size, period, angle):
    h, w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.sin(2 * math.pi * (x * math.cos(angle) + y * math.sin(angle)) / period)


def artifact(family: SourceClass, clean: np.ndarray, spec: FaceSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive signature of a generator family at unit strength."""
    _, h, w = clean.shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    # pattern periods are in units of the face size so they survive alignment
    unit = spec.iod / 40.0
    if family == SourceClass.GenA:  # checkerboard from strided upsampling
        p = 4 * unit
        pat = np.sign(np.sin(math.pi * x / p) * np.sin(math.pi * y / p))
        return (0.07 * pat * (0.4 + clean.mean(axis=0)))[None].repeat(3, 0).astype(np.float32)
    if family == SourceClass.GenB:  # concentric halo around the face
        r = np.hypot(x - spec.cx, y - spec.cy)
        pat = 0.07 * np.sin(2 * math.pi * r / (7 * unit))
        return np.stack([pat, pat * 0.6, pat * 0.2]).astype(np.float32)
    if family == SourceClass.GenC:  # over-smoothed output
        return (gaussian_filter(clean, sigma=(0, 1.6 * unit, 1.6 * unit)) - clean).astype(np.float32)
    if family == SourceClass.GenD:  # hue rotation plus colour blotches
        a = math.radians(28)
        k = (1 - math.cos(a)) / 3
        q = math.sin(a) / math.sqrt(3)
        m = np.array([[math.cos(a) + k, k - q, k + q], [k + q, math.cos(a) + k, k - q], [k - q, k + q, math.cos(a) + k]])
        rotated = np.einsum("ij,jhw->ihw", m, clean)
        blot = gaussian_filter(rng.normal(0, 1, (3, h, w)), sigma=(0, 5 * unit, 5 * unit))
        blot *= 0.08 / (blot.std() + 1e-9)
        return (rotated - clean + blot).astype(np.float32)
    if family == SourceClass.GenE:  # grid lines from progressive upsampling
        p = max(2, round(8 * unit))
        grid = ((np.round(x) % p == 0) | (np.round(y) % p == 0)).astype(np.float64)
        return (0.09 * (grid - grid.mean()))[None].repeat(3, 0).astype(np.float32)
    if family == SourceClass.GenF:  # spectral comb
        pat = sum(_ripple((h, w), per * unit, ang) for per, ang in ((5.0, 0.3), (6.5, 1.2), (9.0, 2.2)))
        return (0.035 * pat)[None].repeat(3, 0).astype(np.float32)
    raise ValueError(f"{family.name} has no generator artifact")


def edit_render(family: SourceClass, clean: np.ndarray, spec: FaceSpec, rng: np.random.Generator) -> np.ndarray:
    """The counterfeit version of a face for the two editing sources."""
    _, h, w = clean.shape
    unit = spec.iod / 40.0
    if family == SourceClass.EditA:
        # whole-face re-render: slightly smoothed, tinted, with upsampling checker
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        p = 4 * unit
        pat = np.sign(np.sin(math.pi * x / p) * np.sin(math.pi * y / p))
        out = gaussian_filter(clean, sigma=(0, 0.8 * unit, 0.8 * unit))
        out = out * np.array([1.06, 0.97, 0.93])[:, None, None] + 0.045 * pat[None]
        return np.clip(out, 0, 1).astype(np.float32)
    if family == SourceClass.EditB:
        # inpainting look: blurred content with blotchy low-frequency texture
        out = gaussian_filter(clean, sigma=(0, 2.0 * unit, 2.0 * unit))
        blot = gaussian_filter(rng.normal(0, 1, (1, h, w)), sigma=(0, 3 * unit, 3 * unit))
        out = out + 0.06 * blot / (blot.std() + 1e-9)
        return np.clip(out, 0, 1).astype(np.float32)
    raise ValueError(f"{family.name} is not an editing source")


def distort_geometry(spec: FaceSpec, rng: np.random.Generator, strength: float) -> FaceSpec:
    """Small landmark inconsistencies typical of synthesised faces."""
    if strength == 0:
        return spec
    d = rng.uniform(0.015, 0.03) * rng.choice([-1, 1])
    m = rng.uniform(0.015, 0.03) * rng.choice([-1, 1])
    j = rng.uniform(0.02, 0.04) * rng.choice([-1, 1])
    return replace(spec, asym=(strength * d, strength * m, strength * j))


# ------------------------------------------------------------------ public generators


def _rngs(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    geo, tex, art = ss.spawn(3)
    return np.random.default_rng(geo), np.random.default_rng(tex), np.random.default_rng(art)


def gen_real_face(seed, family: SourceClass = SourceClass.RealA, size: tuple[int, int] | None = None):
    """A pristine procedural face and its 68 landmarks."""
    family = SourceClass(family)
    if family not in REAL:
        raise ValueError(f"{family.name} is not a real family")
    size = size or DEFAULT_SIZE[family]
    geo, tex, _ = _rngs(seed)
    spec = sample_face(geo, size, family)
    clean = render_face(spec, size)
    img = np.clip(clean + sensor_grain(tex, size, family), 0, 1).astype(np.float32)
    return img, face_landmarks(spec)


def gen_fake_face(seed, family: SourceClass, strength: float = 1.0, size: tuple[int, int] | None = None):
    """A face from one of the six generator families.

    ``strength`` scales both the family artifact and the landmark
    inconsistency; at 0 the result equals ``gen_real_face(seed, RealA, size)``.
    """
    family = SourceClass(family)
    if family not in GENERATED:
        raise ValueError(f"{family.name} is not a generated family")
    size = size or DEFAULT_SIZE[family]
    geo, tex, art = _rngs(seed)
    spec = sample_face(geo, size, SourceClass.RealA)
    grain = sensor_grain(tex, size, SourceClass.RealA)
    if strength == 0:
        clean = render_face(spec, size)
        return np.clip(clean + grain, 0, 1).astype(np.float32), face_landmarks(spec)
    spec = distort_geometry(spec, art, strength)
    clean = render_face(spec, size)
    img = clean + (1 - strength) * grain + strength * artifact(family, clean, spec, art)
    return np.clip(img, 0, 1).astype(np.float32), face_landmarks(spec)


def gen_edit_pair(seed, family: SourceClass, base: SourceClass | None = None, size: tuple[int, int] | None = None):
    """Pristine and counterfeit renderings of the same face, plus landmarks."""
    family = SourceClass(family)
    if family not in EDITED:
        raise ValueError(f"{family.name} is not an editing family")
    geo, tex, art = _rngs(seed)
    if base is None:
        base = SourceClass.RealA if family == SourceClass.EditA else REAL[int(art.integers(2))]
    size = size or DEFAULT_SIZE[base]
    spec = sample_face(geo, size, base)
    clean = render_face(spec, size)
    real = np.clip(clean + sensor_grain(tex, size, base), 0, 1).astype(np.float32)
    fake = edit_render(family, clean, spec, art)
    return real, fake, face_landmarks(spec)


def mean_face_shape(samples: int = 2000, seed: int = 0) -> np.ndarray:
    """Average normalised landmark shape of pristine faces (both real families)."""
    rng = np.random.default_rng(seed)
    acc = np.zeros((68, 2))
    for i in range(samples):
        family = REAL[i % 2]
        acc += face_landmarks_normalised(sample_face(rng, DEFAULT_SIZE[family], family))
    return acc / samples


def canonical_template(samples: int = 2000, seed: int = 0, interocular: float = 40.0, frame: int = 128) -> np.ndarray:
    """Mean shape scaled to the given inter-ocular distance, bounding box centred in the frame."""
    pts = mean_face_shape(samples, seed) * interocular
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return pts - (lo + hi) / 2 + (frame - 1) / 2
