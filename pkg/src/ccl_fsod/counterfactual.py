"""Grad-CAM attributions and counterfactual-guided erasing.

Pipeline for one annotated image of class ``c``:

* pick a counter class ``c'`` among the ``k_e`` classes most similar to ``c``,
* Grad-CAM maps ``A_c`` and ``A_c'`` on the last conv feature map,
* counterfactual map ``norm(A_c * (max A_c' - A_c'))``,
* bilinear upsampling to the box, threshold at ``t``, and replace the
  selected pixels by uniform random integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .knowledge import top_counter_categories
from . import toymodel

DEFAULT_THRESHOLD = 0.8
DEFAULT_K_E = 3
DEFAULT_EPSILON = 0.05


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentedSample:
    image: np.ndarray
    label: int
    is_augmented: bool = True
    mask: np.ndarray | None = field(default=None, repr=False)
    counter_category: int | None = None
    maps: dict = field(default_factory=dict, repr=False)


def channel_weights(grad_map) -> np.ndarray:
    """Spatial mean of each channel of a (h, w, channels) gradient tensor."""
    g = np.asarray(grad_map, dtype=np.float64)
    if g.ndim != 3:
        raise AugmentError(f"expected (h, w, channels), got shape {g.shape}")
    return g.mean(axis=(0, 1))


def gradcam(feature_map, alpha) -> np.ndarray:
    f = np.asarray(feature_map, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if f.ndim != 3 or f.shape[-1] != alpha.shape[0]:
        raise AugmentError(f"feature map {f.shape} does not match {alpha.shape[0]} channel weights")
    return np.maximum(f @ alpha, 0.0)


def minmax_normalize(a) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def counterfactual_map(A_c, A_counter) -> np.ndarray:
    A_c = np.asarray(A_c, dtype=np.float64)
    A_counter = np.asarray(A_counter, dtype=np.float64)
    if A_c.shape != A_counter.shape:
        raise AugmentError(f"attribution shapes differ: {A_c.shape} vs {A_counter.shape}")
    return minmax_normalize(A_c * (A_counter.max() - A_counter))


def upsample(A, shape) -> np.ndarray:
    """Bilinear resize of a 2-d map to ``shape`` (pixel-center aligned).

    Samples outside the map read as 0, so the result stays inside [0, max A].
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape == tuple(shape):
        return A.copy()
    zoom = (shape[0] / A.shape[0], shape[1] / A.shape[1])
    out = ndimage.zoom(A, zoom, order=1, mode="grid-constant", cval=0.0, grid_mode=True)
    return out[: shape[0], : shape[1]]


def erase_mask(A, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """0 where ``A >= t`` (erase), 1 elsewhere."""
    if not 0.0 < t < 1.0:
        raise AugmentError(f"threshold must lie in (0, 1), got {t}")
    A = np.asarray(A, dtype=np.float64)
    return np.where(A >= t, 0, 1).astype(np.uint8)


def apply_mask(image, H, rng_seed) -> AugmentedSample:
    """Keep pixels where ``H == 1``; fill the rest with uniform integers in [0, 255]."""
    image = np.asarray(image)
    H = np.asarray(H)
    if H.shape != image.shape[:2]:
        raise AugmentError(f"mask {H.shape} does not cover image {image.shape[:2]}")
    rng = np.random.default_rng(rng_seed)
    E = rng.integers(0, 256, size=image.shape, dtype=np.int64)
    keep = H.astype(bool)[..., None] if image.ndim == 3 else H.astype(bool)
    out = np.where(keep, image, E).astype(image.dtype)
    return AugmentedSample(out, label=-1, mask=H)


def attribution(params, image, category: int, fwd=None) -> np.ndarray:
    """Grad-CAM map of ``category`` at feature-map resolution for one image."""
    grads = toymodel.backward(params, image, category)
    if fwd is None:
        fwd = toymodel.forward(params, image)
    return gradcam(fwd.feature_map[0], channel_weights(grads["feature_map"][0]))


def random_mask_map(shape, rng: np.random.Generator) -> np.ndarray:
    """Ablation baseline: a random normalized map in place of the counterfactual one."""
    return minmax_normalize(rng.random(shape))


def augment(
    image,
    label: int,
    params,
    zeta,
    k_e: int = DEFAULT_K_E,
    t: float = DEFAULT_THRESHOLD,
    rng: np.random.Generator | None = None,
    random_mask: bool = False,
) -> AugmentedSample:
    """Counterfactual erasing of one whole-image ROI.

    The counter class is drawn uniformly from the ``k_e`` most similar
    classes under ``zeta``. With ``random_mask`` the attribution step is
    replaced by a random map (ablation baseline).
    """
    rng = np.random.default_rng() if rng is None else rng
    image = np.asarray(image)
    candidates = top_counter_categories(zeta, int(label), min(k_e, zeta.C - 1))
    counter = int(candidates[rng.integers(len(candidates))])
    fwd = toymodel.forward(params, image)
    if random_mask:
        A_c = A_cf = np.zeros(fwd.feature_map.shape[1:3])
        A = random_mask_map(fwd.feature_map.shape[1:3], rng)
    else:
        A_c = attribution(params, image, int(label), fwd)
        A_cf = attribution(params, image, counter, fwd)
        A = counterfactual_map(A_c, A_cf)
    A_img = upsample(A, image.shape[:2])
    H = erase_mask(A_img, t)
    fill_seed = int(rng.integers(2**63 - 1))
    out = apply_mask(image, H, fill_seed)
    return AugmentedSample(
        out.image,
        int(label),
        True,
        H,
        counter,
        {"A_c": A_c, "A_counter": A_cf, "counterfactual": A, "upsampled": A_img, "fill_seed": fill_seed},
    )
