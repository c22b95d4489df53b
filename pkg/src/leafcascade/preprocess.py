"""Leaf image preparation for the three stages.

Stage 1 sees a binary silhouette, stage 2 the whole RGB leaf, stage 3
square RGB patches lying (almost) entirely inside the leaf.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .imageio import read_rgb

LUMA = np.array([0.299, 0.587, 0.114])


class NoForeground(ValueError):
    """Binarisation found nothing to separate from the background."""


class PatchShortfall(RuntimeError):
    """Fewer acceptable windows than requested; ``partial`` holds what was found."""

    def __init__(self, found: int, wanted: int, partial: "PatchSet"):
        super().__init__(f"found {found} of {wanted} patches satisfying the leaf-coverage rule")
        self.found = found
        self.wanted = wanted
        self.partial = partial


@dataclass(frozen=True)
class LeafImage:
    rgb: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {self.rgb.shape}")
        if self.mask.shape != (1,) + self.rgb.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} does not match rgb {self.rgb.shape}")


@dataclass(frozen=True)
class PatchSet:
    patches: list  # each (3, patch_px, patch_px)
    origins: list  # (row, col) of each window's top-left corner


@dataclass(frozen=True)
class AugmentPolicy:
    rotate_deg: float = 45.0  # 0 disables
    shift: float = 0.1  # fraction of each extent; 0 disables
    hflip: bool = True
    vflip: bool = True


NO_AUGMENT = AugmentPolicy(0.0, 0.0, False, False)


# -- binarisation ---------------------------------------------------------


def _quantized_luma(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        lum = rgb
    elif rgb.ndim == 3 and rgb.shape[0] in (1, 3):
        lum = rgb[0] if rgb.shape[0] == 1 else np.tensordot(LUMA, rgb, axes=1)
    else:
        raise ValueError(f"expected (3, H, W), (1, H, W) or (H, W), got {rgb.shape}")
    if lum.size == 0:
        raise ValueError("empty image")
    return np.clip(np.round(lum * 255), 0, 255).astype(np.int64)


def otsu_threshold(q: np.ndarray) -> int:
    """Otsu threshold ``t`` on 8-bit levels; classes are ``q <= t`` and ``q > t``."""
    hist = np.bincount(q.ravel(), minlength=256).astype(np.float64)
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]
    total = hist.sum()
    w1 = total - w0
    s0 = np.cumsum(hist * levels)[:-1]
    s1 = (hist * levels).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - s1 / w1) ** 2
    between = np.nan_to_num(between, nan=0.0)
    t = int(np.argmax(between))
    if between[t] <= 0:
        raise NoForeground("no foreground: image has a single intensity level")
    return t


def _largest_component(binary):
    labels, n = ndimage.label(binary)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _border_contact(region):
    return int(region[0].sum() + region[-1].sum() + region[1:-1, 0].sum() + region[1:-1, -1].sum())


def binarize(rgb) -> np.ndarray:
    """Leaf mask ``(1, H, W)`` uint8: Otsu on luminance, polarity by border contact.

    Of the two Otsu classes, the one whose largest connected component
    touches the image border less is the leaf. Only that component is kept,
    with interior holes filled.
    """
    q = _quantized_luma(rgb)
    t = otsu_threshold(q)
    bright = q > t
    candidates = []
    for region in (bright, ~bright):
        comp = _largest_component(region)
        if comp is not None:
            candidates.append((_border_contact(comp), int(comp.sum()), comp))
    if not candidates:
        raise NoForeground("no foreground: no connected component found")
    candidates.sort(key=lambda c: (c[0], c[1]))
    leaf = ndimage.binary_fill_holes(candidates[0][2])
    return leaf.astype(np.uint8)[None]


def load_leaf(path, mask: Optional[np.ndarray] = None) -> LeafImage:
    rgb = read_rgb(path)
    return LeafImage(rgb, binarize(rgb) if mask is None else mask)


def leaf_from_rgb(rgb) -> LeafImage:
    rgb = np.asarray(rgb, dtype=np.float32)
    return LeafImage(rgb, binarize(rgb))


# -- resizing -------------------------------------------------------------


def _bilinear_axis(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _nearest_axis(n_in, n_out):
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def resize(image, height: int, width: int, nearest: bool = False) -> np.ndarray:
    """Resize a ``(C, H, W)`` array with half-pixel-centred bilinear (or nearest) sampling."""
    image = np.asarray(image)
    if height < 1 or width < 1:
        raise ValueError("target size must be at least 1x1")
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    if nearest:
        return image[:, _nearest_axis(h, height)][:, :, _nearest_axis(w, width)]
    y0, y1, wy = _bilinear_axis(h, height)
    x0, x1, wx = _bilinear_axis(w, width)
    img = image.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[:, None] + bot * wy[:, None]
    return out.astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32)


def stage1_input(leaf: LeafImage, hw: int = 128) -> np.ndarray:
    """Binary silhouette resized to ``(1, hw, hw)`` float32."""
    return resize(leaf.mask, hw, hw, nearest=True).astype(np.float32)


def stage2_input(leaf: LeafImage, hw: int = 196) -> np.ndarray:
    return resize(leaf.rgb, hw, hw).astype(np.float32)


# -- patches --------------------------------------------------------------


def window_counts(mask2d: np.ndarray, size: int) -> np.ndarray:
    """Leaf-pixel count of every ``size x size`` window, indexed by top-left corner."""
    ii = np.zeros((mask2d.shape[0] + 1, mask2d.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(mask2d.astype(np.int64), axis=0), axis=1)
    return ii[size:, size:] - ii[:-size, size:] - ii[size:, :-size] + ii[:-size, :-size]


def extract_patches(leaf: LeafImage, P: int, patch_px: int = 96, min_leaf_fraction: float = 1.0,
                    seed: int = 0, max_tries: Optional[int] = None) -> PatchSet:
    """Sample ``P`` random windows whose leaf coverage meets ``min_leaf_fraction``.

    Candidates are drawn uniformly with a seeded generator; the first ``P``
    acceptances are returned. Raises :class:`PatchShortfall` otherwise.
    """
    if P < 1:
        raise ValueError("P must be at least 1")
    if not 0 < min_leaf_fraction <= 1:
        raise ValueError("min_leaf_fraction must be in (0, 1]")
    max_tries = 200 * P if max_tries is None else max_tries
    _, h, w = leaf.rgb.shape
    patches, origins = [], []
    if h >= patch_px and w >= patch_px:
        counts = window_counts(leaf.mask[0], patch_px)
        need = min_leaf_fraction * patch_px * patch_px
        rng = np.random.default_rng(seed)
        for _ in range(max_tries):
            r = int(rng.integers(0, h - patch_px + 1))
            c = int(rng.integers(0, w - patch_px + 1))
            if counts[r, c] >= need:
                origins.append((r, c))
                patches.append(np.ascontiguousarray(leaf.rgb[:, r:r + patch_px, c:c + patch_px]))
                if len(patches) == P:
                    return PatchSet(patches, origins)
    raise PatchShortfall(len(patches), P, PatchSet(patches, origins))


# -- augmentation ---------------------------------------------------------


def augment(image, mask, seed: int, policy: AugmentPolicy = AugmentPolicy()):
    """Apply one seeded random transform to ``image`` (C, H, W) and ``mask`` alike.

    Rotation and shift are about the image centre; uncovered pixels become 0.
    Image uses bilinear interpolation, mask nearest. ``mask`` may be None.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-policy.rotate_deg, policy.rotate_deg) if policy.rotate_deg else 0.0
    dy = rng.uniform(-policy.shift, policy.shift) if policy.shift else 0.0
    dx = rng.uniform(-policy.shift, policy.shift) if policy.shift else 0.0
    hflip = policy.hflip and rng.random() < 0.5
    vflip = policy.vflip and rng.random() < 0.5

    image = np.asarray(image)
    _, h, w = image.shape
    out_img, out_mask = image.copy(), None if mask is None else np.asarray(mask).copy()
    if angle or dy or dx:
        theta = np.deg2rad(angle)
        cos, sin = np.cos(theta), np.sin(theta)
        # output -> input coordinate map: rotate about centre, then undo the shift
        rot = np.array([[cos, sin], [-sin, cos]])
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        shift = np.array([dy * h, dx * w])
        offset = centre - rot @ (centre + shift)

        def warp(arr, order):
            return np.stack([
                ndimage.affine_transform(ch.astype(np.float64), rot, offset=offset, order=order,
                                         mode="constant", cval=0.0)
                for ch in arr
            ]).astype(arr.dtype)

        out_img = warp(out_img, 1)
        if out_mask is not None:
            out_mask = warp(out_mask, 0)
    if hflip:
        out_img = out_img[:, :, ::-1]
        out_mask = None if out_mask is None else out_mask[:, :, ::-1]
    if vflip:
        out_img = out_img[:, ::-1]
        out_mask = None if out_mask is None else out_mask[:, ::-1]
    out_img = np.ascontiguousarray(out_img)
    return out_img, (None if out_mask is None else np.ascontiguousarray(out_mask))
