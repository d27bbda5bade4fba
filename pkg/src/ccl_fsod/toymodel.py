"""A tiny two-layer convnet with a hand-written backward pass, and the
synthetic shape-composite dataset it is trained on.

Architecture: conv3x3 (valid) -> ReLU -> conv3x3 (valid) -> ReLU -> global
average pool -> linear classifier. A separate 128-d projection head reads
the pooled feature. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .knowledge import AttributeLabelVector
from .losses import PROJECTION_DIM

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "cls_w", "cls_b", "proj_w")


@dataclass
class ToyModelParams:
    conv1_w: np.ndarray  # (3, 3, in, c1)
    conv1_b: np.ndarray  # (c1,)
    conv2_w: np.ndarray  # (3, 3, c1, c2)
    conv2_b: np.ndarray  # (c2,)
    cls_w: np.ndarray  # (C, c2)
    cls_b: np.ndarray  # (C,)
    proj_w: np.ndarray  # (128, c2)

    @property
    def d(self) -> int:
        return self.conv2_w.shape[-1]

    @property
    def C(self) -> int:
        return self.cls_w.shape[0]

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.as_dict().values())

    def dump(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name, value in self.as_dict().items():
            io.write_matrix(directory / f"{name}.bin", value.reshape(1, -1))
            shapes[name] = list(value.shape)
        io.dump_json(directory / "params.json", shapes)

    @classmethod
    def load(cls, directory) -> "ToyModelParams":
        directory = Path(directory)
        shapes = io.load_json(directory / "params.json")
        return cls(**{n: io.read_matrix(directory / f"{n}.bin").reshape(shapes[n]) for n in PARAM_NAMES})


def init_params(C: int, channels=(8, 16), in_channels: int = 3, seed: int = 0) -> ToyModelParams:
    """He-style random init from a seeded generator."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    return ToyModelParams(
        conv1_w=rng.normal(0, np.sqrt(2.0 / (9 * in_channels)), (3, 3, in_channels, c1)),
        conv1_b=np.zeros(c1),
        conv2_w=rng.normal(0, np.sqrt(2.0 / (9 * c1)), (3, 3, c1, c2)),
        conv2_b=np.zeros(c2),
        cls_w=rng.normal(0, np.sqrt(1.0 / c2), (C, c2)),
        cls_b=np.zeros(C),
        proj_w=rng.normal(0, np.sqrt(1.0 / c2), (PROJECTION_DIM, c2)),
    )


# -- layers -------------------------------------------------------------------


def _conv(x, w, b):
    """Valid 3x3 convolution (cross-correlation), NHWC."""
    kh, kw = w.shape[:2]
    B, H, W, _ = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    out = np.broadcast_to(b, (B, Ho, Wo, w.shape[-1])).copy()
    for i in range(kh):
        for j in range(kw):
            out += x[:, i:i + Ho, j:j + Wo, :] @ w[i, j]
    return out


def _conv_backward(x, w, dout):
    kh, kw = w.shape[:2]
    _, Ho, Wo, _ = dout.shape
    dx = np.zeros_like(x)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i:i + Ho, j:j + Wo, :]
            dw[i, j] = np.tensordot(patch, dout, axes=([0, 1, 2], [0, 1, 2]))
            dx[:, i:i + Ho, j:j + Wo, :] += dout @ w[i, j].T
    return dx, dw, dout.sum(axis=(0, 1, 2))


INPUT_CENTER = 128.0
INPUT_SCALE = 64.0


def preprocess(images) -> np.ndarray:
    x = (np.asarray(images, dtype=np.float64) - INPUT_CENTER) / INPUT_SCALE
    return x[None] if x.ndim == 3 else x


@dataclass
class ForwardResult:
    feature_map: np.ndarray  # (B, h_p, w_p, c_p)
    pooled: np.ndarray  # (B, d)
    class_scores: np.ndarray  # (B, C)
    cache: dict = field(repr=False, default_factory=dict)


def forward(params: ToyModelParams, images) -> ForwardResult:
    x = preprocess(images)
    a1 = _conv(x, params.conv1_w, params.conv1_b)
    h1 = np.maximum(a1, 0.0)
    a2 = _conv(h1, params.conv2_w, params.conv2_b)
    fmap = np.maximum(a2, 0.0)
    pooled = fmap.mean(axis=(1, 2))
    scores = pooled @ params.cls_w.T + params.cls_b
    return ForwardResult(fmap, pooled, scores, {"x": x, "a1": a1, "h1": h1, "a2": a2})


def backprop(params: ToyModelParams, fwd: ForwardResult, d_scores, d_pooled=None, through_conv=True) -> dict:
    """Reverse pass from upstream gradients on the scores (and optionally the pooled feature).

    Returns a dict with a gradient per parameter name (``proj_w`` is zero here;
    the projection head is handled by :func:`ccl_fsod.losses.project_backward`)
    plus ``feature_map`` and ``pooled`` entries.
    """
    d_scores = np.atleast_2d(np.asarray(d_scores, dtype=np.float64))
    grads = {
        "cls_w": d_scores.T @ fwd.pooled,
        "cls_b": d_scores.sum(axis=0),
        "proj_w": np.zeros_like(params.proj_w),
    }
    dp = d_scores @ params.cls_w
    if d_pooled is not None:
        dp = dp + d_pooled
    _, hp, wp, _ = fwd.feature_map.shape
    d_fmap = np.broadcast_to(dp[:, None, None, :] / (hp * wp), fwd.feature_map.shape).copy()
    grads["pooled"] = dp
    grads["feature_map"] = d_fmap
    if not through_conv:
        for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
            grads[name] = np.zeros_like(getattr(params, name))
        return grads
    c = fwd.cache
    d_a2 = d_fmap * (c["a2"] > 0)
    d_h1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(c["h1"], params.conv2_w, d_a2)
    d_a1 = d_h1 * (c["a1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(c["x"], params.conv1_w, d_a1)
    return grads


def backward(params: ToyModelParams, images, target: int) -> dict:
    """Gradients of the class-``target`` score (summed over the batch).

    ``feature_map`` holds d y_target / d feature_map, the Grad-CAM input.
    """
    if not 0 <= target < params.C:
        raise ValueError(f"target {target} outside 0..{params.C - 1}")
    fwd = forward(params, images)
    d_scores = np.zeros_like(fwd.class_scores)
    d_scores[:, target] = 1.0
    return backprop(params, fwd, d_scores)


def softmax_cross_entropy(scores, labels, allowed=None):
    """Mean cross-entropy and its gradient w.r.t. the scores.

    ``allowed`` restricts the softmax to a subset of classes (base training).
    """
    scores = np.atleast_2d(scores)
    labels = np.asarray(labels)
    if allowed is not None:
        mask = np.full(scores.shape[1], -np.inf)
        mask[list(allowed)] = 0.0
        scores = scores + mask
    shifted = scores - scores.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# -- synthetic dataset ----------------------------------------------------------

IMAGE_SIZE = 16
PATCH = 4

# (pattern, rgb) per attribute; patterns are 4x4 binary stencils
_STENCILS = {
    "hbar": np.array([[0, 0, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0]]),
    "vbar": np.array([[0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0]]),
    "diag": np.eye(4, dtype=int),
    "anti": np.fliplr(np.eye(4, dtype=int)),
    "ring": np.array([[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]]),
    "dot": np.array([[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]]),
    "check": np.array([[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]]),
    "corner": np.array([[1, 1, 1, 1], [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]]),
}
_COLORS = {
    "red": (230, 40, 40),
    "green": (40, 210, 60),
    "blue": (50, 70, 235),
    "yellow": (230, 220, 40),
}
ATTRIBUTE_PARTS = (
    ("hbar", "red"),
    ("vbar", "green"),
    ("diag", "blue"),
    ("ring", "yellow"),
    ("dot", "red"),
    ("check", "green"),
    ("anti", "blue"),
    ("corner", "yellow"),
    ("hbar", "blue"),
    ("ring", "green"),
)

# 8 base + 4 novel categories, three parts each; every novel category
# shares two parts with some base category.
DEFAULT_ATTRIBUTE_TABLE = {
    "b0": [1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
    "b1": [0, 0, 0, 1, 1, 1, 0, 0, 0, 0],
    "b2": [0, 0, 0, 0, 0, 0, 1, 1, 1, 0],
    "b3": [1, 0, 0, 1, 0, 0, 1, 0, 0, 0],
    "b4": [0, 1, 0, 0, 1, 0, 0, 1, 0, 0],
    "b5": [0, 0, 1, 0, 0, 1, 0, 0, 0, 1],
    "b6": [1, 0, 0, 0, 0, 0, 0, 1, 0, 1],
    "b7": [0, 0, 0, 1, 0, 0, 0, 0, 1, 1],
    "n0": [1, 1, 0, 0, 0, 0, 0, 0, 0, 1],
    "n1": [0, 0, 0, 1, 1, 0, 0, 0, 1, 0],
    "n2": [0, 0, 0, 0, 0, 0, 1, 1, 0, 1],
    "n3": [0, 1, 0, 0, 1, 0, 0, 0, 1, 0],
}


@dataclass(frozen=True)
class DatasetConfig:
    C_base: int = 8
    C_novel: int = 4
    k_shot: int = 5
    base_per_class: int = 60
    test_per_class: int = 40
    attribute_table: dict = field(default_factory=lambda: dict(DEFAULT_ATTRIBUTE_TABLE))
    seed: int = 0
    noise: float = 30.0
    part_dropout: float = 0.15


@dataclass
class ToyDataset:
    """Images are uint8 arrays (N, H, W, 3); ``split`` is ``"base"``, ``"novel"`` or ``"test"``."""

    images: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    category_names: list
    attribute_table: dict
    C_base: int
    k_shot: int

    @property
    def C(self) -> int:
        return len(self.category_names)

    @property
    def base_classes(self) -> list:
        return list(range(self.C_base))

    @property
    def novel_classes(self) -> list:
        return list(range(self.C_base, self.C))

    def subset(self, split: str):
        idx = np.flatnonzero(self.split == split)
        return self.images[idx], self.labels[idx]

    def attribute_labels(self) -> dict:
        return {
            i: AttributeLabelVector(i, np.asarray(self.attribute_table[name]))
            for i, name in enumerate(self.category_names)
        }

    def dump(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        io.write_matrix(directory / "images.bin", self.images.reshape(len(self.images), -1))
        io.dump_json(
            directory / "dataset.json",
            {
                "image_shape": list(self.images.shape[1:]),
                "labels": self.labels.tolist(),
                "split": self.split.tolist(),
                "category_names": list(self.category_names),
                "attribute_table": self.attribute_table,
                "C_base": self.C_base,
                "k_shot": self.k_shot,
            },
        )

    @classmethod
    def load(cls, directory) -> "ToyDataset":
        directory = Path(directory)
        m = io.load_json(directory / "dataset.json")
        flat = io.read_matrix(directory / "images.bin")
        images = flat.reshape(len(flat), *m["image_shape"]).astype(np.uint8)
        return cls(
            images,
            np.array(m["labels"], dtype=np.int64),
            np.array(m["split"]),
            m["category_names"],
            m["attribute_table"],
            m["C_base"],
            m["k_shot"],
        )


def render(bits, rng: np.random.Generator, noise: float = 30.0, part_dropout: float = 0.0) -> np.ndarray:
    """Draw one composite: each set attribute becomes a colored 4x4 part."""
    bits = np.asarray(bits)
    if bits.size > len(ATTRIBUTE_PARTS):
        raise ValueError(f"at most {len(ATTRIBUTE_PARTS)} renderable attributes, got {bits.size}")
    img = rng.normal(100.0, noise, (IMAGE_SIZE, IMAGE_SIZE, 3))
    parts = np.flatnonzero(bits)
    keep = [p for p in parts if rng.random() >= part_dropout] or [parts[rng.integers(len(parts))]]
    # non-overlapping slots on a 3x3 grid of 4x4 cells with 1px jitter
    slots = rng.permutation(9)[: len(keep)]
    for part, slot in zip(keep, slots):
        stencil_name, color_name = ATTRIBUTE_PARTS[part]
        stencil = _STENCILS[stencil_name].astype(bool)
        color = np.asarray(_COLORS[color_name], dtype=np.float64)
        color = color * rng.uniform(0.8, 1.1)
        r0 = 1 + 5 * (slot // 3) + rng.integers(-1, 2)
        c0 = 1 + 5 * (slot % 3) + rng.integers(-1, 2)
        r0, c0 = int(np.clip(r0, 0, IMAGE_SIZE - PATCH)), int(np.clip(c0, 0, IMAGE_SIZE - PATCH))
        region = img[r0:r0 + PATCH, c0:c0 + PATCH]
        region[stencil] = color + rng.normal(0, noise / 3, (stencil.sum(), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_dataset(config: DatasetConfig = DatasetConfig()) -> ToyDataset:
    names = list(config.attribute_table)
    if len(names) != config.C_base + config.C_novel:
        raise ValueError(
            f"attribute table has {len(names)} categories, config wants {config.C_base + config.C_novel}"
        )
    widths = {len(v) for v in config.attribute_table.values()}
    if len(widths) != 1:
        raise ValueError(f"attribute vectors have differing lengths {sorted(widths)}")
    for name, bits in config.attribute_table.items():
        bits = np.asarray(bits)
        if not np.isin(bits, (0, 1)).all() or not bits.any():
            raise ValueError(f"category {name!r}: attribute bits must be 0/1 with at least one set")
    if len({tuple(v) for v in config.attribute_table.values()}) != len(names):
        raise ValueError("two categories share an identical attribute vector")

    rng = np.random.default_rng(config.seed)
    images, labels, split = [], [], []
    for c, name in enumerate(names):
        bits = config.attribute_table[name]
        n_train = config.base_per_class if c < config.C_base else config.k_shot
        tag = "base" if c < config.C_base else "novel"
        for _ in range(n_train):
            images.append(render(bits, rng, config.noise, config.part_dropout))
            labels.append(c)
            split.append(tag)
        for _ in range(config.test_per_class):
            images.append(render(bits, rng, config.noise, config.part_dropout))
            labels.append(c)
            split.append("test")
    return ToyDataset(
        np.stack(images),
        np.array(labels, dtype=np.int64),
        np.array(split),
        names,
        {k: list(map(int, v)) for k, v in config.attribute_table.items()},
        config.C_base,
        config.k_shot,
    )
