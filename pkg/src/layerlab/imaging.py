"""RGBA image values, alpha compositing, programmatic layer edits and mask morphology.

Images are straight-alpha (non-premultiplied) float arrays of shape (H, W, 4)
with every channel in [0, 1]. Masks are binary (H, W) uint8 arrays. All
operations are pure functions; nothing here mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


class ImagingError(Exception):
    """Base class for errors raised by this module."""


class SizeMismatchError(ImagingError):
    pass


class PreconditionError(ImagingError):
    pass


class ParameterError(ImagingError):
    pass


class ImageIOError(ImagingError):
    pass


# Directions for movement edits.
DIRECTIONS = ("up", "down", "left", "right")

# The three displacement magnitudes used by the measured editing protocol.
MOVE_MAGNITUDES = (0.20, 0.30, 0.50)

RECOLOR_IDS = (1, 2, 3, 4, 5, 6, 7)

# Rec. 601 luma weights used by the grayscale recolor.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RgbaImage:
    """Straight-alpha RGBA raster with float64 channels in [0, 1]."""

    data: np.ndarray  # (H, W, 4) float64

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 4:
            raise ParameterError(f"expected (H, W, 4) array, got shape {arr.shape}")
        if arr.min() < -1e-12 or arr.max() > 1 + 1e-12:
            raise ParameterError("channel values must lie in [0, 1]")
        object.__setattr__(self, "data", np.clip(arr, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def rgb(self) -> np.ndarray:
        return self.data[:, :, :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.data[:, :, 3]

    def allclose(self, other: "RgbaImage", atol: float = 1e-6) -> bool:
        return self.data.shape == other.data.shape and bool(
            np.all(np.abs(self.data - other.data) <= atol)
        )


@dataclass(frozen=True)
class Mask:
    """Binary (H, W) mask; values are exactly 0 or 1."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ParameterError(f"expected (H, W) array, got shape {arr.shape}")
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ParameterError("mask must be strictly binary")
        object.__setattr__(self, "data", arr.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class EditOp:
    """A recolor, a move, or their composition.

    kind: "recolor", "move" or "compose".
    """

    kind: str
    recolor_id: int | None = None
    direction: str | None = None
    magnitude: float | None = None

    def __post_init__(self):
        if self.kind not in ("recolor", "move", "compose"):
            raise ParameterError(f"unknown edit kind {self.kind!r}")
        if self.kind in ("recolor", "compose"):
            if self.recolor_id not in RECOLOR_IDS:
                raise ParameterError(f"recolor id must be in 1..7, got {self.recolor_id}")
        if self.kind in ("move", "compose"):
            if self.direction not in DIRECTIONS:
                raise ParameterError(f"direction must be one of {DIRECTIONS}")
            if not (0.0 < float(self.magnitude) < 1.0):
                raise ParameterError("magnitude must lie in (0, 1)")


def compose_over(fg: RgbaImage, bg: RgbaImage) -> RgbaImage:
    """Alpha-blend ``fg`` over an opaque background ``bg``."""
    if fg.data.shape != bg.data.shape:
        raise SizeMismatchError(
            f"foreground {fg.data.shape[:2]} vs background {bg.data.shape[:2]}"
        )
    if not np.all(bg.alpha == 1.0):
        raise PreconditionError("background must be fully opaque")
    a = fg.alpha[:, :, None]
    out = np.empty_like(bg.data)
    out[:, :, :3] = a * fg.rgb + (1.0 - a) * bg.rgb
    out[:, :, 3] = 1.0
    return RgbaImage(out)


def layer_over(top: RgbaImage, bottom: RgbaImage) -> RgbaImage:
    """Straight-alpha over operator for two possibly-transparent layers."""
    if top.data.shape != bottom.data.shape:
        raise SizeMismatchError(
            f"top {top.data.shape[:2]} vs bottom {bottom.data.shape[:2]}"
        )
    at = top.alpha
    ab = bottom.alpha
    ao = at + (1.0 - at) * ab
    num = at[:, :, None] * top.rgb + ((1.0 - at) * ab)[:, :, None] * bottom.rgb
    rgb = np.divide(num, ao[:, :, None], out=np.zeros_like(num), where=ao[:, :, None] > 0)
    out = np.concatenate([rgb, ao[:, :, None]], axis=2)
    return RgbaImage(np.clip(out, 0.0, 1.0))


def _recolor_rgb(rgb: np.ndarray, recolor_id: int) -> np.ndarray:
    out = rgb.copy()
    if recolor_id == 1:
        out[..., [0, 1]] = rgb[..., [1, 0]]
    elif recolor_id == 2:
        out[..., [1, 2]] = rgb[..., [2, 1]]
    elif recolor_id == 3:
        out[..., [0, 2]] = rgb[..., [2, 0]]
    elif recolor_id == 4:
        out[..., 0] *= 0.5
    elif recolor_id == 5:
        out[..., 1] *= 0.5
    elif recolor_id == 6:
        out[..., 2] *= 0.5
    elif recolor_id == 7:
        luma = rgb @ _LUMA
        out = np.repeat(luma[..., None], 3, axis=-1)
    else:
        raise ParameterError(f"recolor id must be in 1..7, got {recolor_id}")
    return out


def apply_recolor(layer: RgbaImage, recolor_id: int, alpha_threshold: float = 0.9) -> RgbaImage:
    """Recolor the opaque object body; fringe below the alpha threshold is untouched.

    Alpha is never modified: only pixels with alpha >= alpha_threshold have
    their rgb transformed. The seven transforms: 1/2/3 swap channel pairs
    (R-G, G-B, R-B), 4/5/6 halve one channel, 7 is luma grayscale.
    """
    if recolor_id not in RECOLOR_IDS:
        raise ParameterError(f"recolor id must be in 1..7, got {recolor_id}")
    if not (0.0 <= alpha_threshold <= 1.0):
        raise ParameterError("alpha_threshold must lie in [0, 1]")
    body = layer.alpha >= alpha_threshold
    out = layer.data.copy()
    out[body, :3] = _recolor_rgb(layer.rgb[body], recolor_id)
    return RgbaImage(out)


def displacement_pixels(magnitude: float, extent: int) -> int:
    """Pixel displacement for a fractional magnitude: round half away from zero."""
    return int(np.floor(magnitude * extent + 0.5))


def apply_move(layer: RgbaImage, direction: str, magnitude: float) -> RgbaImage:
    """Rigidly translate all four channels; vacated pixels become transparent."""
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}")
    if not (0.0 < magnitude < 1.0):
        raise ParameterError("magnitude must lie in (0, 1)")
    h, w = layer.height, layer.width
    if direction in ("left", "right"):
        d = displacement_pixels(magnitude, w)
        dy, dx = 0, d if direction == "right" else -d
    else:
        d = displacement_pixels(magnitude, h)
        dy, dx = (d if direction == "down" else -d), 0
    out = np.zeros_like(layer.data)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = layer.data[ys_src, xs_src]
    return RgbaImage(out)


def apply_edit(layer: RgbaImage, op: EditOp, alpha_threshold: float = 0.9) -> RgbaImage:
    if op.kind == "recolor":
        return apply_recolor(layer, op.recolor_id, alpha_threshold)
    if op.kind == "move":
        return apply_move(layer, op.direction, op.magnitude)
    moved = apply_move(layer, op.direction, op.magnitude)
    return apply_recolor(moved, op.recolor_id, alpha_threshold)


def dilate(mask: Mask, radius: int) -> Mask:
    """Dilation with a square (Chebyshev) structuring element of side 2r+1."""
    if radius < 0 or int(radius) != radius:
        raise ParameterError("radius must be a non-negative integer")
    if radius == 0:
        return Mask(mask.data.copy())
    out = ndimage.maximum_filter(mask.data, size=2 * radius + 1, mode="constant", cval=0)
    return Mask(out)


def erode(mask: Mask, radius: int) -> Mask:
    """Erosion with a square structuring element of side 2r+1."""
    if radius < 0 or int(radius) != radius:
        raise ParameterError("radius must be a non-negative integer")
    if radius == 0:
        return Mask(mask.data.copy())
    out = ndimage.minimum_filter(mask.data, size=2 * radius + 1, mode="constant", cval=1)
    return Mask(out)


def read_image(path) -> RgbaImage:
    """Read an 8-bit RGBA PNG; bytes map to [0, 1] by v/255."""
    try:
        with Image.open(path) as im:
            if im.mode != "RGBA":
                raise ImageIOError(f"{path}: expected RGBA, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except ImageIOError:
        raise
    except Exception as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    return RgbaImage(arr)


def write_image(img: RgbaImage, path) -> None:
    """Write an 8-bit RGBA PNG; values quantize by round(v*255)."""
    arr = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="RGBA").save(path, format="PNG")
    except Exception as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def read_mask(path) -> Mask:
    """Read a mask stored as an 8-bit grayscale PNG with {0, 255} values."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ImageIOError(f"{path}: expected grayscale mask, got mode {im.mode}")
            arr = np.asarray(im)
    except ImageIOError:
        raise
    except Exception as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    if not np.all(np.isin(np.unique(arr), (0, 255))):
        raise ImageIOError(f"{path}: mask bytes must be 0 or 255")
    return Mask((arr > 0).astype(np.uint8))


def write_mask(mask: Mask, path) -> None:
    arr = (mask.data * 255).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    except Exception as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def mask_to_image(mask: Mask) -> RgbaImage:
    """Replicate a mask into an opaque RGBA carrier (rgb = mask value)."""
    m = mask.data.astype(np.float64)
    out = np.empty(mask.data.shape + (4,), dtype=np.float64)
    out[:, :, 0] = m
    out[:, :, 1] = m
    out[:, :, 2] = m
    out[:, :, 3] = 1.0
    return RgbaImage(out)
