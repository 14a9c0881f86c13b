"""Two-branch detection + localization network.

Encoder: three stride-2 conv stages on the image (and, optionally, a mirror
stem on 68-channel landmark maps fused into every skip), two separable
residual blocks, then a class head (pool + dense) and a mask decoder of three
transposed convs, each fed the concatenation of the running decoder state
and the skip of matching resolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from functools import cached_property

import numpy as np

from . import functional as F
from .geometry import NUM_LANDMARKS
from .tensor import ShapeError, Tensor, add, concat, mul, relu, scale, sigmoid, softmax

VARIANTS = ("share", "hard", "soft")
SSMA_REDUCTION = 4
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    num_classes: int = 10
    input_size: int = 128
    variant: str = "soft"
    use_landmarks: bool = True
    base_channels: int = 16
    lam: float = 100.0
    class_weight: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size % 8 != 0 or self.input_size <= 0:
            raise ValueError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be an even number >= 2, got {self.base_channels}")

    @property
    def mask_channels(self) -> int:
        return 1 if self.variant == "share" else self.num_classes

    def to_dict(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in d:
                raw = d[key]
                if f.type in ("bool", bool):
                    kw[f.name] = raw == "True"
                elif f.type in ("int", int):
                    kw[f.name] = int(raw)
                elif f.type in ("float", float):
                    kw[f.name] = float(raw)
                else:
                    kw[f.name] = raw
        return cls(**kw)


@dataclass
class ModelOutputs:
    class_logits: Tensor  # [N,C]
    mask_logits: Tensor | None  # [N,K,H,W]
    class_probs: Tensor  # [N,C]
    variant: str = "share"

    @cached_property
    def mask_probs(self) -> Tensor | None:
        """``P_mask [N,1,H,W]``; built on first access since training never needs it."""
        if self.mask_logits is None:
            return None
        if self.variant == "share":
            return predict_mask_shared(self.mask_logits)
        if self.variant == "hard":
            return predict_mask_hard(self.mask_logits, self.class_probs)
        return predict_mask_soft(self.mask_logits, self.class_probs)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(np.float32)


def _conv_param(rng, f, c, k):
    return _glorot(rng, (f, c, k, k), c * k * k, f * k * k), np.zeros(f, np.float32)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, named by position in the network."""
    rng = np.random.default_rng(seed)
    b = config.base_channels
    chans = (b, 2 * b, 4 * b)
    raw: dict[str, np.ndarray] = {}

    def conv(name, f, c, k):
        raw[name + ".w"], raw[name + ".b"] = _conv_param(rng, f, c, k)

    stems = ("img", "lmk") if config.use_landmarks else ("img",)
    for stem in stems:
        cin = 3 if stem == "img" else NUM_LANDMARKS
        for i, c in enumerate(chans, start=1):
            conv(f"{stem}.conv{i}", c, cin, 3)
            cin = c
    if config.use_landmarks:
        for i, c in enumerate(chans, start=1):
            width, mid = 2 * c, max(1, 2 * c // SSMA_REDUCTION)
            conv(f"fuse{i}.reduce", mid, width, 1)
            conv(f"fuse{i}.expand", width, mid, 1)
            conv(f"fuse{i}.out", c, width, 1)
    deep = chans[2]
    for blk in (1, 2):
        for j in (1, 2):
            raw[f"mid{blk}.dw{j}.w"] = _glorot(rng, (deep, 1, 3, 3), 9, 9)
            raw[f"mid{blk}.dw{j}.b"] = np.zeros(deep, np.float32)
            conv(f"mid{blk}.pw{j}", deep, deep, 1)
    raw["cls.w"] = _glorot(rng, (deep, config.num_classes), deep, config.num_classes)
    raw["cls.b"] = np.zeros(config.num_classes, np.float32)
    # decoder: (running state + skip) -> next resolution
    up_in = (deep + chans[2], chans[1] + chans[1], chans[0] + chans[0])
    up_out = (chans[1], chans[0], chans[0])
    for i, (ci, co) in enumerate(zip(up_in, up_out), start=1):
        raw[f"up{i}.w"] = _glorot(rng, (ci, co, 2, 2), ci * 4, co * 4)
        raw[f"up{i}.b"] = np.zeros(co, np.float32)
    conv("mask_head", config.mask_channels, up_out[-1], 1)
    # identical per-class mask channels at start: the mask term then exerts no
    # pull on the class probabilities until the channels have specialised
    raw["mask_head.w"][:] = raw["mask_head.w"][:1]
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def fuse_skip(params: dict[str, Tensor], prefix: str, image_feat: Tensor, landmark_feat: Tensor) -> Tensor:
    """Gated fusion of image and landmark activations at one skip connection.

    concat -> 1x1 reduce -> ReLU -> 1x1 expand -> sigmoid gate, multiplied
    back onto the concatenation, then a 1x1 projection to the image width.
    """
    if image_feat.shape != landmark_feat.shape:
        raise ShapeError(f"fuse_skip: image {image_feat.shape} vs landmark {landmark_feat.shape}")
    both = concat([image_feat, landmark_feat], axis=1)
    p = lambda n: params[f"{prefix}.{n}"]
    gate = relu(F.conv2d(both, p("reduce.w"), p("reduce.b")))
    gate = sigmoid(F.conv2d(gate, p("expand.w"), p("expand.b")))
    return F.conv2d(mul(both, gate), p("out.w"), p("out.b"))


def _residual(params, name: str, x: Tensor) -> Tensor:
    p = lambda n: params[f"{name}.{n}"]
    h = F.conv2d(F.depthwise_conv2d(x, p("dw1.w"), p("dw1.b"), padding=1), p("pw1.w"), p("pw1.b"))
    h = relu(h)
    h = F.conv2d(F.depthwise_conv2d(h, p("dw2.w"), p("dw2.b"), padding=1), p("pw2.w"), p("pw2.b"))
    return relu(add(x, h))


def _normalise(image, dtype) -> Tensor:
    """Map [0,1] pixels to roughly zero mean, unit variance."""
    if isinstance(image, Tensor):
        shift = Tensor(np.full(image.shape, -PIXEL_MEAN, dtype=image.dtype))
        return scale(add(image, shift), 1.0 / PIXEL_STD)
    return Tensor(((np.asarray(image, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD).astype(dtype))


def predict_mask_shared(mask_logits: Tensor) -> Tensor:
    if mask_logits.shape[1] != 1:
        raise ShapeError(f"shared mask head must have one channel, got {mask_logits.shape}")
    return sigmoid(mask_logits)


def hard_selection(class_probs) -> np.ndarray:
    """Argmax per row; ``np.argmax`` returns the lowest index on ties."""
    p = class_probs.data if isinstance(class_probs, Tensor) else np.asarray(class_probs)
    return np.argmax(p, axis=1)


def predict_mask_hard(mask_logits: Tensor, class_probs) -> Tensor:
    c = class_probs.shape[1]
    if mask_logits.shape[1] != c:
        raise ShapeError(f"hard mask head needs {c} channels, got {mask_logits.shape}")
    return sigmoid(F.select_channel(mask_logits, hard_selection(class_probs)))


def soft_mask_logits(mask_logits: Tensor, class_probs: Tensor) -> Tensor:
    """``(1/C) * sum_c P_class(c) * O_mask(c)``, differentiable in both."""
    c = class_probs.shape[1]
    if mask_logits.shape[1] != c:
        raise ShapeError(f"soft mask head needs {c} channels, got {mask_logits.shape}")
    return F.channel_mix(mask_logits, class_probs, 1.0 / c)


def predict_mask_soft(mask_logits: Tensor, class_probs: Tensor) -> Tensor:
    return sigmoid(soft_mask_logits(mask_logits, class_probs))


def forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    image,
    landmark_maps=None,
    landmark_points: np.ndarray | None = None,
    need_mask: bool = True,
) -> ModelOutputs:
    """Run the network on ``image [N,3,H,W]``.

    Landmarks come either as dense ``[N,68,H,W]`` maps or as integer pixel
    positions ``[N,68,2]`` (the hot pixels of those maps), which is much
    cheaper and numerically identical.
    """
    dtype = params["img.conv1.w"].dtype
    x = _normalise(image, dtype)
    n, c, h, w = x.shape
    if c != 3 or h != config.input_size or w != config.input_size:
        raise ShapeError(f"forward: image {x.shape} does not match config input {config.input_size}")
    has_lm = landmark_maps is not None or landmark_points is not None
    if has_lm != config.use_landmarks:
        raise ShapeError("landmark input must be given exactly when use_landmarks is set")
    p = params

    feats = []
    for i in (1, 2, 3):
        x = relu(F.conv2d(x, p[f"img.conv{i}.w"], p[f"img.conv{i}.b"], stride=2, padding=1))
        feats.append(x)
    if config.use_landmarks:
        if landmark_points is not None:
            pts = np.asarray(landmark_points)
            if pts.shape != (n, NUM_LANDMARKS, 2):
                raise ShapeError(f"forward: landmark points {pts.shape}, expected {(n, NUM_LANDMARKS, 2)}")
            y = relu(F.landmark_conv2d(pts, p["lmk.conv1.w"], p["lmk.conv1.b"], (h, w), stride=2, padding=1))
        else:
            lm = landmark_maps if isinstance(landmark_maps, Tensor) else Tensor(np.asarray(landmark_maps, dtype=dtype))
            if lm.shape != (n, NUM_LANDMARKS, h, w):
                raise ShapeError(f"forward: landmark maps {lm.shape}, expected {(n, NUM_LANDMARKS, h, w)}")
            y = relu(F.conv2d(lm, p["lmk.conv1.w"], p["lmk.conv1.b"], stride=2, padding=1))
        lfeats = [y]
        for i in (2, 3):
            y = relu(F.conv2d(y, p[f"lmk.conv{i}.w"], p[f"lmk.conv{i}.b"], stride=2, padding=1))
            lfeats.append(y)
        skips = [fuse_skip(p, f"fuse{i}", f, g) for i, (f, g) in enumerate(zip(feats, lfeats), start=1)]
    else:
        skips = feats

    deep = skips[2]
    for blk in (1, 2):
        deep = _residual(p, f"mid{blk}", deep)

    class_logits = F.dense(F.global_average_pool(deep), p["cls.w"], p["cls.b"])
    class_probs = softmax(class_logits)
    if not need_mask:
        return ModelOutputs(class_logits, None, class_probs, config.variant)

    d = deep
    for i, skip in zip((1, 2, 3), (skips[2], skips[1], skips[0])):
        d = relu(F.conv2d_transpose(concat([d, skip], axis=1), p[f"up{i}.w"], p[f"up{i}.b"], stride=2))
    mask_logits = F.conv2d(d, p["mask_head.w"], p["mask_head.b"])
    return ModelOutputs(class_logits, mask_logits, class_probs, config.variant)


def combined_loss(outputs: ModelOutputs, gt_class, gt_mask, config: ModelConfig) -> Tensor:
    """Class cross-entropy plus ``lam`` times the per-pixel mean mask cross-entropy.

    share: the single mask channel; hard: the channel of the ground-truth
    class; soft: the probability-weighted channel mix, so the mask term also
    trains the class branch.
    """
    gt_class = np.asarray(gt_class, dtype=np.int64)
    terms = []
    if config.class_weight != 0:
        terms.append(scale(F.softmax_cross_entropy(outputs.class_logits, gt_class), config.class_weight))
    if config.lam != 0:
        o = outputs.mask_logits
        if o is None:
            raise ValueError("mask term requested but the forward pass skipped the mask branch")
        if config.variant == "share":
            logits = o
            if o.shape[1] != 1:
                raise ShapeError(f"shared variant expects 1 mask channel, got {o.shape}")
        elif config.variant == "hard":
            logits = F.select_channel(o, gt_class)
        else:
            logits = soft_mask_logits(o, outputs.class_probs)
        target = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask)
        terms.append(scale(F.sigmoid_binary_cross_entropy(logits, target.reshape(logits.shape)), config.lam))
    if not terms:
        raise ValueError("both loss terms are disabled")
    loss = terms[0]
    for t in terms[1:]:
        loss = add(loss, t)
    return loss
