"""Procedural layered scenes with analytic ground truth.

Each sample is a triplet: an opaque composite, a clean background, and a
foreground layer whose alpha carries the object's visual effects (a cast
shadow and an optional reflection). Shadows are the object silhouette
translated by the light offset and box-blurred, so editing a layer by an
integer translation is exactly equivalent to re-rendering the moved scene
for interior placements. Object alpha is binary (no edge antialiasing),
which keeps paste-back and equivariance identities exact.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import (
    DIRECTIONS,
    Mask,
    ParameterError,
    RgbaImage,
    compose_over,
    dilate,
    displacement_pixels,
    layer_over,
    read_image,
    read_mask,
    write_image,
    write_mask,
)

MANIFEST_SCHEMA_VERSION = 1

SHAPES = ("circle", "rectangle", "triangle", "capsule")
BACKGROUND_STYLES = ("flat", "vertical-gradient", "floor-wall", "checker")
CORRUPTION_KINDS = ("good", "hole_fill", "inconsistent", "shadow_residue")

_PALETTE = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.7, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.1),
    "purple": (0.55, 0.15, 0.7),
    "orange": (0.95, 0.55, 0.1),
    "cyan": (0.1, 0.75, 0.8),
}


class SceneError(Exception):
    """Base class for scene generation failures."""


class GenerationError(SceneError):
    pass


class OracleUnavailableError(SceneError):
    """The moved scene cannot be re-rendered without clipping; skip it."""


class ManifestError(SceneError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    shape: str = "circle"
    fill: tuple[float, float, float] = (0.85, 0.1, 0.1)
    cx: int = 32
    cy: int = 32
    scale: int = 8
    bg_style: str = "flat"
    bg_color0: tuple[float, float, float] = (0.7, 0.7, 0.7)
    bg_color1: tuple[float, float, float] = (0.5, 0.5, 0.5)
    shadow_dx: int = 4
    shadow_dy: int = 4
    shadow_opacity: float = 0.45
    shadow_blur: int = 1
    reflection: bool = False
    reflection_opacity: float = 0.35
    reflection_attenuation: float = 0.85
    rng_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown shape {self.shape!r}")
        if self.bg_style not in BACKGROUND_STYLES:
            raise ParameterError(f"unknown background style {self.bg_style!r}")
        if not (0.0 <= self.shadow_opacity <= 1.0):
            raise ParameterError("shadow opacity must lie in [0, 1]")
        if not (0.0 <= self.reflection_opacity <= 1.0):
            raise ParameterError("reflection opacity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("fill", "bg_color0", "bg_color1"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class CorruptionLabel:
    kind: str
    severity: float = 1.0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}")
        if not (0.0 < self.severity <= 1.0):
            raise ParameterError("severity must lie in (0, 1]")

    @property
    def is_good(self) -> bool:
        return self.kind == "good"


@dataclass
class LayerTriplet:
    composite: RgbaImage
    background: RgbaImage
    fg_ve: RgbaImage
    fg_clean: RgbaImage
    mask: Mask
    captions: dict[str, str] = field(default_factory=dict)
    config: SceneConfig | None = None
    corruption: CorruptionLabel | None = None


def box_blur(channel: np.ndarray, radius: int) -> np.ndarray:
    """Zero-padded box blur. Summation order is fixed by the offset loop, so
    the result is bitwise translation-equivariant away from the borders."""
    if radius <= 0:
        return channel.copy()
    h, w = channel.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=channel.dtype)
    padded[radius : radius + h, radius : radius + w] = channel
    acc = np.zeros_like(channel)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            acc = acc + padded[dy : dy + h, dx : dx + w]
    return acc / float((2 * radius + 1) ** 2)


def _shift2d(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation without wraparound; vacated area is zero."""
    h, w = arr.shape[:2]
    out = np.zeros_like(arr)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    out[ys, xs] = arr[slice(max(-dy, 0), h + min(-dy, 0)), slice(max(-dx, 0), w + min(-dx, 0))]
    return out


def _silhouette(cfg: SceneConfig) -> np.ndarray:
    """Binary object coverage sampled at integer pixel centers."""
    ys, xs = np.mgrid[0 : cfg.height, 0 : cfg.width]
    x = xs - cfg.cx
    y = ys - cfg.cy
    s = float(cfg.scale)
    if cfg.shape == "circle":
        inside = x * x + y * y <= s * s
    elif cfg.shape == "rectangle":
        inside = (np.abs(x) <= s) & (np.abs(y) <= 0.7 * s)
    elif cfg.shape == "triangle":
        inside = (y >= -s) & (y <= s) & (np.abs(x) <= (y + s) / 2.0)
    else:  # capsule: distance to the vertical segment of half-length s/2
        cy_off = np.clip(y, -0.5 * s, 0.5 * s)
        inside = x * x + (y - cy_off) ** 2 <= (0.5 * s) ** 2
    return inside.astype(np.float64)


def _background(cfg: SceneConfig) -> RgbaImage:
    h, w = cfg.height, cfg.width
    c0 = np.array(cfg.bg_color0)
    c1 = np.array(cfg.bg_color1)
    rgb = np.empty((h, w, 3), dtype=np.float64)
    if cfg.bg_style == "flat":
        rgb[:] = c0
    elif cfg.bg_style == "vertical-gradient":
        t = (np.arange(h) / max(h - 1, 1))[:, None, None]
        rgb[:] = (1.0 - t) * c0 + t * c1
    elif cfg.bg_style == "floor-wall":
        horizon = int(0.55 * h)
        rgb[:horizon] = c0
        rgb[horizon:] = c1
    else:  # checker, 8 px cells
        ys, xs = np.mgrid[0:h, 0:w]
        cell = ((ys // 8) + (xs // 8)) % 2
        rgb[:] = np.where(cell[:, :, None] == 0, c0, c1)
    out = np.concatenate([rgb, np.ones((h, w, 1))], axis=2)
    return RgbaImage(np.clip(out, 0.0, 1.0))


def _shadow_layer(cfg: SceneConfig, sil: np.ndarray) -> RgbaImage:
    shifted = _shift2d(sil, cfg.shadow_dy, cfg.shadow_dx)
    alpha = box_blur(shifted, cfg.shadow_blur) * cfg.shadow_opacity
    out = np.zeros(sil.shape + (4,), dtype=np.float64)
    out[:, :, 3] = alpha
    return RgbaImage(out)


def _reflection_layer(cfg: SceneConfig, sil: np.ndarray) -> RgbaImage:
    h, w = sil.shape
    out = np.zeros((h, w, 4), dtype=np.float64)
    if not cfg.reflection or not sil.any():
        return RgbaImage(out)
    rows = np.nonzero(sil.any(axis=1))[0]
    base = int(rows.max())
    fill = np.array(cfg.fill)
    for k in range(rows.max() - rows.min() + 1):
        src = base - k
        dst = base + 1 + k
        if src < 0 or dst >= h:
            break
        a = sil[src] * cfg.reflection_opacity * (cfg.reflection_attenuation**k)
        out[dst, :, 3] = a
        out[dst, :, :3] = fill
    return RgbaImage(out)


def _fg_clean(cfg: SceneConfig, sil: np.ndarray) -> RgbaImage:
    out = np.zeros(sil.shape + (4,), dtype=np.float64)
    out[:, :, :3] = np.array(cfg.fill) * sil[:, :, None]
    out[:, :, 3] = sil
    return RgbaImage(out)


def _color_name(rgb) -> str:
    dists = {name: sum((a - b) ** 2 for a, b in zip(rgb, c)) for name, c in _PALETTE.items()}
    return min(dists, key=dists.get)


def _bg_phrase(cfg: SceneConfig) -> str:
    c = _color_name(cfg.bg_color0)
    return {
        "flat": f"a plain {c} background",
        "vertical-gradient": f"a {c} gradient background",
        "floor-wall": f"a {c} wall above a floor",
        "checker": f"a {c} checkered background",
    }[cfg.bg_style]


def scene_fits(cfg: SceneConfig) -> bool:
    """Conservative check that object, shadow and reflection stay in-canvas
    with a one pixel margin (the blur window must not cross the border)."""
    s = cfg.scale
    b = cfg.shadow_blur
    x0 = cfg.cx - s - 1
    x1 = cfg.cx + s + 1
    y0 = cfg.cy - s - 1
    y1 = cfg.cy + s + 1
    xs = [x0, x1, x0 + cfg.shadow_dx - b, x1 + cfg.shadow_dx + b]
    ys = [y0, y1, y0 + cfg.shadow_dy - b, y1 + cfg.shadow_dy + b]
    if cfg.reflection:
        ys.append(y1 + 2 * s + 3)
    return (
        min(xs) >= 0
        and max(xs) <= cfg.width - 1
        and min(ys) >= 0
        and max(ys) <= cfg.height - 1
    )


def render_scene(cfg: SceneConfig) -> LayerTriplet:
    """Render a full triplet from a scene description."""
    if not scene_fits(cfg):
        raise GenerationError("object, shadow or reflection does not fit the canvas")
    sil = _silhouette(cfg)
    if not sil.any():
        raise GenerationError("empty object silhouette")
    background = _background(cfg)
    fg_clean = _fg_clean(cfg, sil)
    effects = layer_over(_reflection_layer(cfg, sil), _shadow_layer(cfg, sil))
    fg_ve = layer_over(fg_clean, effects)
    composite = compose_over(fg_ve, background)
    mask = Mask((fg_clean.alpha > 0.5).astype(np.uint8))
    color = _color_name(cfg.fill)
    captions = {
        "composite_text": f"a {color} {cfg.shape} on {_bg_phrase(cfg)}",
        "background_text": _bg_phrase(cfg),
        "foreground_text": f"a {color} {cfg.shape}",
    }
    return LayerTriplet(
        composite=composite,
        background=background,
        fg_ve=fg_ve,
        fg_clean=fg_clean,
        mask=mask,
        captions=captions,
        config=cfg,
    )


def moved_config(cfg: SceneConfig, direction: str, magnitude: float) -> SceneConfig:
    """The scene with the object displaced by the layer-edit pixel rule."""
    if direction not in DIRECTIONS:
        raise ParameterError(f"direction must be one of {DIRECTIONS}")
    if direction in ("left", "right"):
        d = displacement_pixels(magnitude, cfg.width)
        dx, dy = (d if direction == "right" else -d), 0
    else:
        d = displacement_pixels(magnitude, cfg.height)
        dx, dy = 0, (d if direction == "down" else -d)
    return dataclasses.replace(cfg, cx=cfg.cx + dx, cy=cfg.cy + dy)


def render_moved(cfg: SceneConfig, direction: str, magnitude: float) -> LayerTriplet:
    new_cfg = moved_config(cfg, direction, magnitude)
    if not scene_fits(new_cfg):
        raise OracleUnavailableError(
            f"moved object leaves the canvas (direction={direction}, magnitude={magnitude})"
        )
    return render_scene(new_cfg)


def sample_scene_config(
    seed: int,
    width: int = 64,
    height: int = 64,
    max_attempts: int = 100,
    shadow_opacity_range: tuple[float, float] = (0.3, 0.6),
) -> SceneConfig:
    """Draw a random scene; the position is resampled until everything fits."""
    rng = np.random.default_rng(seed)
    shape = SHAPES[rng.integers(len(SHAPES))]
    style = BACKGROUND_STYLES[rng.integers(len(BACKGROUND_STYLES))]
    bg0 = tuple(np.round(rng.uniform(0.4, 0.95, 3), 4))
    bg1 = tuple(np.round(rng.uniform(0.4, 0.95, 3), 4))
    for _ in range(max_attempts):
        name = list(_PALETTE)[rng.integers(len(_PALETTE))]
        fill = np.clip(np.array(_PALETTE[name]) + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        if np.abs(fill - np.array(bg0)).mean() > 0.25:
            break
    fill = tuple(np.round(fill, 4))
    scale = int(rng.integers(6, 12))
    blur = int(rng.integers(0, 3))
    cfg_kwargs = dict(
        width=width,
        height=height,
        shape=shape,
        fill=fill,
        scale=scale,
        bg_style=style,
        bg_color0=bg0,
        bg_color1=bg1,
        shadow_dx=int(rng.integers(2, 7)),
        shadow_dy=int(rng.integers(2, 7)),
        shadow_opacity=float(np.round(rng.uniform(*shadow_opacity_range), 4)),
        shadow_blur=blur,
        reflection=bool(rng.uniform() < 0.4),
        reflection_opacity=float(np.round(rng.uniform(0.25, 0.5), 4)),
        reflection_attenuation=float(np.round(rng.uniform(0.75, 0.92), 4)),
        rng_seed=int(seed),
    )
    for _ in range(max_attempts):
        cx = int(rng.integers(0, width))
        cy = int(rng.integers(0, height))
        cfg = SceneConfig(cx=cx, cy=cy, **cfg_kwargs)
        if scene_fits(cfg):
            return cfg
    raise GenerationError(f"no valid placement found in {max_attempts} attempts")


def corrupt_background(
    triplet: LayerTriplet, label: CorruptionLabel, seed: int = 0
) -> RgbaImage:
    """Inject a background defect of the requested kind and severity."""
    if label.is_good:
        raise ParameterError("corruption label must not be 'good'")
    bg = triplet.background.data
    sev = label.severity
    out = bg.copy()
    if label.kind == "hole_fill":
        m = triplet.mask.data.astype(bool)
        comp = triplet.composite.data
        out[m, :3] = (1.0 - sev) * bg[m, :3] + sev * comp[m, :3]
    elif label.kind == "inconsistent":
        rng = np.random.default_rng(seed)
        shift = rng.uniform(-0.25, 0.25, 3) * sev
        region = dilate(triplet.mask, 4).data.astype(bool)
        blurred = np.stack([box_blur(bg[:, :, c], 2) for c in range(3)], axis=2)
        mixed = np.clip(blurred + shift, 0.0, 1.0)
        out[region, :3] = (1.0 - sev) * bg[region, :3] + sev * mixed[region]
    else:  # shadow_residue
        if triplet.config is None:
            raise ParameterError("shadow_residue corruption needs the scene config")
        cfg = triplet.config
        shadow = _shadow_layer(cfg, _silhouette(cfg))
        a = shadow.alpha * sev
        out[:, :, :3] = (1.0 - a[:, :, None]) * out[:, :, :3]
    return RgbaImage(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Manifest persistence: one JSON-lines record per sample plus PNG assets.
# ---------------------------------------------------------------------------

_ROLE_FILES = ("composite", "background", "fg_ve", "fg_clean")


def write_manifest(samples: list[LayerTriplet], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for i, trip in enumerate(samples):
            record = {"schema_version": MANIFEST_SCHEMA_VERSION}
            for role in _ROLE_FILES:
                fname = f"{i:05d}_{role}.png"
                write_image(getattr(trip, role), directory / fname)
                record[role] = fname
            mask_name = f"{i:05d}_mask.png"
            write_mask(trip.mask, directory / mask_name)
            record["mask"] = mask_name
            record["captions"] = trip.captions
            record["scene"] = trip.config.to_dict() if trip.config else None
            if trip.corruption is not None:
                record["corruption"] = {
                    "kind": trip.corruption.kind,
                    "severity": trip.corruption.severity,
                }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(directory) -> list[LayerTriplet]:
    directory = Path(directory)
    manifest_path = directory / "manifest.jsonl"
    if not manifest_path.is_file():
        raise ManifestError(f"no manifest.jsonl in {directory}")
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"record {lineno}: invalid JSON: {exc}") from exc
            try:
                images = {role: read_image(directory / record[role]) for role in _ROLE_FILES}
                mask = read_mask(directory / record["mask"])
            except Exception as exc:
                raise ManifestError(f"record {lineno}: {exc}") from exc
            corruption = None
            if record.get("corruption"):
                corruption = CorruptionLabel(
                    kind=record["corruption"]["kind"],
                    severity=record["corruption"]["severity"],
                )
            samples.append(
                LayerTriplet(
                    composite=images["composite"],
                    background=images["background"],
                    fg_ve=images["fg_ve"],
                    fg_clean=images["fg_clean"],
                    mask=mask,
                    captions=record.get("captions", {}),
                    config=SceneConfig.from_dict(record["scene"]) if record.get("scene") else None,
                    corruption=corruption,
                )
            )
    return samples
