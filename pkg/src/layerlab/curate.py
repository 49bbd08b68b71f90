"""Background-fidelity curation: mask variants, a small logistic scorer over
hand-built image features, and manifest filtering with a JSON report.

The scorer sees (composite, object mask, candidate background) and outputs
the probability that the background is a faithful object removal. Its three
features mirror the failure taxonomy used to label corrupted samples:
leftover object content inside the mask, a discontinuity ring around the
removal region, and residual shadow darkening just outside the mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .imaging import Mask, RgbaImage, dilate
from .scenes import (
    CorruptionLabel,
    LayerTriplet,
    corrupt_background,
    read_manifest,
    render_scene,
    sample_scene_config,
    write_manifest,
)

REPORT_SCHEMA_VERSION = 1

_LUMA = np.array([0.299, 0.587, 0.114])

DEFAULT_RING_RADIUS = 8


class CurateError(Exception):
    pass


@dataclass(frozen=True)
class CuratorFeatures:
    paste_back_similarity: float
    boundary_discontinuity: float
    ring_darkening: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.paste_back_similarity, self.boundary_discontinuity, self.ring_darkening]
        )


@dataclass
class CuratorModel:
    weights: np.ndarray  # (3,)
    bias: float
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "weights": list(np.asarray(self.weights, dtype=float)),
            "bias": float(self.bias),
            "threshold": float(self.threshold),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CuratorModel":
        return cls(np.array(d["weights"], dtype=float), float(d["bias"]), float(d["threshold"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "CuratorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def ring_radius_for(triplet: LayerTriplet, fallback: int = DEFAULT_RING_RADIUS) -> int:
    """Shadow-prone ring radius: offset magnitude plus blur when the scene is known."""
    if triplet.config is None:
        return fallback
    cfg = triplet.config
    return int(max(abs(cfg.shadow_dx), abs(cfg.shadow_dy)) + cfg.shadow_blur + 1)


def _luma(rgb: np.ndarray) -> np.ndarray:
    return rgb @ _LUMA


def _grad_mag(luma: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(luma)
    return np.sqrt(gy * gy + gx * gx)


def _plane_predict(luma: np.ndarray, fit_region: np.ndarray, eval_region: np.ndarray) -> np.ndarray:
    """Least-squares plane over fit_region, evaluated at eval_region pixels.

    A linear trend absorbs gradient backgrounds; checker texture averages
    out in the fit. Mirror-symmetric because the fit follows the pixels.
    """
    ys, xs = np.nonzero(fit_region)
    a = np.stack([np.ones_like(ys, dtype=float), xs.astype(float), ys.astype(float)], axis=1)
    coef, *_ = np.linalg.lstsq(a, luma[fit_region], rcond=None)
    ey, ex = np.nonzero(eval_region)
    return coef[0] + coef[1] * ex + coef[2] * ey


def curator_features(
    composite: RgbaImage,
    mask: Mask,
    candidate_bg: RgbaImage,
    ring_radius: int = DEFAULT_RING_RADIUS,
) -> CuratorFeatures:
    if composite.data.shape != candidate_bg.data.shape or mask.data.shape != composite.data.shape[:2]:
        raise CurateError("composite, mask and candidate background sizes differ")
    m = mask.data.astype(bool)
    if not m.any():
        raise CurateError("empty mask: curator features are undefined")

    comp = composite.rgb
    cand = candidate_bg.rgb
    cand_luma = _luma(cand)
    comp_luma = _luma(comp)

    # Leftover object content: how much closer the candidate sits to the
    # composite inside the mask than a plausible background would. The
    # object/background contrast reference comes from the ring colour.
    ring_near = dilate(mask, 3).data.astype(bool) & ~m
    ring_color = cand[ring_near].mean(axis=0) if ring_near.any() else cand.mean(axis=(0, 1))
    dist = float(np.abs(cand[m] - comp[m]).mean())
    contrast = float(np.abs(comp[m] - ring_color).mean())
    paste_back = 1.0 - float(np.clip(dist / max(contrast, 1e-3), 0.0, 1.0))

    # Seams near the removal region: gradient energy the composite does not have.
    ring_b = dilate(mask, 5).data.astype(bool) & ~m
    jump = np.maximum(0.0, _grad_mag(cand_luma) - _grad_mag(comp_luma))
    raw = float(jump[ring_b].mean()) if ring_b.any() else 0.0
    boundary = raw / (raw + 0.005)

    # Residual shadow: luma deficit of the candidate under its own smooth
    # background trend, normalized by the composite's full shadow deficit so
    # the feature approximates the residue fraction.
    r = int(ring_radius)
    ring_s = dilate(mask, r).data.astype(bool) & ~m
    outer = dilate(mask, r + 4).data.astype(bool) & ~dilate(mask, r).data.astype(bool)
    if ring_s.any() and outer.any():
        pred = _plane_predict(cand_luma, outer, ring_s)
        cand_deficit = float((pred - cand_luma[ring_s]).mean())
        comp_deficit = float((pred - comp_luma[ring_s]).mean())
        darkening = float(np.clip(cand_deficit / max(comp_deficit, 0.02), 0.0, 1.0))
    else:
        darkening = 0.0

    return CuratorFeatures(paste_back, boundary, darkening)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def curator_score(
    composite: RgbaImage,
    mask: Mask,
    candidate_bg: RgbaImage,
    model: CuratorModel,
    ring_radius: int = DEFAULT_RING_RADIUS,
) -> float:
    feats = curator_features(composite, mask, candidate_bg, ring_radius).as_array()
    return float(_sigmoid(feats @ model.weights + model.bias))


def fit_logistic(
    features: np.ndarray, labels: np.ndarray, iters: int = 2000, lr: float = 0.1
) -> CuratorModel:
    """Full-batch gradient descent; deterministic given data order."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if set(np.unique(labels)) != {0.0, 1.0}:
        raise CurateError("fit needs both good and bad samples")
    w = np.zeros(features.shape[1])
    b = 0.0
    n = len(labels)
    for _ in range(iters):
        p = _sigmoid(features @ w + b)
        err = p - labels
        w -= lr * (features.T @ err) / n
        b -= lr * float(err.mean())
    return CuratorModel(weights=w, bias=b)


def fit_curator(
    samples: list[tuple[RgbaImage, Mask, RgbaImage, bool]],
    ring_radius: int = DEFAULT_RING_RADIUS,
    iters: int = 2000,
    lr: float = 0.1,
) -> CuratorModel:
    """samples: (composite, mask, candidate background, is_good)."""
    feats = np.stack(
        [curator_features(c, m, bg, ring_radius).as_array() for c, m, bg, _ in samples]
    )
    labels = np.array([bool(good) for *_, good in samples], dtype=float)
    return fit_logistic(feats, labels, iters=iters, lr=lr)


def mask_variants(triplet: LayerTriplet, dilate_radius: int = 3) -> dict[str, Mask]:
    """vanilla / salient (high-alpha core) / dilated mask variants."""
    vanilla = triplet.mask
    salient = Mask(
        ((triplet.fg_clean.alpha >= 0.95) & vanilla.data.astype(bool)).astype(np.uint8)
    )
    return {
        "vanilla": vanilla,
        "salient": salient,
        "dilated": dilate(vanilla, dilate_radius),
    }


def build_curator_dataset(
    n: int, seed: int, width: int = 64, height: int = 64
) -> list[tuple[RgbaImage, Mask, RgbaImage, bool, int, str]]:
    """Balanced synthetic set: half clean backgrounds, half corrupted ones.

    Returns (composite, mask, candidate_bg, is_good, ring_radius, kind) rows.
    Severity is drawn from [0.3, 1.0] to avoid near-good negatives.
    """
    rng = np.random.default_rng(seed)
    kinds = ("hole_fill", "inconsistent", "shadow_residue")
    rows = []
    for i in range(n):
        cfg = sample_scene_config(int(rng.integers(2**63)), width=width, height=height)
        trip = render_scene(cfg)
        ring = ring_radius_for(trip)
        if i % 2 == 0:
            rows.append((trip.composite, trip.mask, trip.background, True, ring, "good"))
        else:
            kind = kinds[(i // 2) % len(kinds)]
            label = CorruptionLabel(kind=kind, severity=float(rng.uniform(0.3, 1.0)))
            bad_bg = corrupt_background(trip, label, seed=int(rng.integers(2**63)))
            rows.append((trip.composite, trip.mask, bad_bg, False, ring, kind))
    return rows


def filter_dataset(
    manifest_dir,
    model: CuratorModel,
    threshold: float | None = None,
    out_dir=None,
    ring_radius: int | None = None,
) -> tuple[list[LayerTriplet], list[LayerTriplet], dict]:
    """Partition a manifest by curator decision on each stored background.

    When ``out_dir`` is given, kept/ and rejected/ manifests are written
    under it. The report includes counts, a score histogram, and a
    per-corruption-kind confusion table when records carry labels.
    """
    threshold = model.threshold if threshold is None else float(threshold)
    samples = read_manifest(manifest_dir)
    kept, rejected = [], []
    scores = []
    confusion: dict[str, dict[str, int]] = {}
    for trip in samples:
        ring = ring_radius_for(trip) if ring_radius is None else ring_radius
        score = curator_score(trip.composite, trip.mask, trip.background, model, ring)
        scores.append(score)
        decision_keep = score >= threshold
        (kept if decision_keep else rejected).append(trip)
        kind = trip.corruption.kind if trip.corruption else "good"
        if trip.corruption is not None or kind == "good":
            row = confusion.setdefault(kind, {"kept": 0, "rejected": 0})
            row["kept" if decision_keep else "rejected"] += 1
    hist, edges = np.histogram(scores, bins=10, range=(0.0, 1.0))
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "threshold": threshold,
        "total": len(samples),
        "kept": len(kept),
        "rejected": len(rejected),
        "score_histogram": {"bin_edges": edges.tolist(), "counts": hist.tolist()},
        "confusion_by_kind": confusion,
        "curator": model.to_dict(),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_manifest(kept, out_dir / "kept")
        write_manifest(rejected, out_dir / "rejected")
        (out_dir / "filter_report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    return kept, rejected, report


def precision_recall(
    model: CuratorModel,
    rows: list[tuple[RgbaImage, Mask, RgbaImage, bool, int, str]],
) -> tuple[float, float]:
    """Precision/recall of the 'good' decision at the model threshold."""
    tp = fp = fn = 0
    for comp, mask, cand, good, ring, _ in rows:
        pred = curator_score(comp, mask, cand, model, ring) >= model.threshold
        if pred and good:
            tp += 1
        elif pred and not good:
            fp += 1
        elif not pred and good:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


# Adapter signatures for the pipeline stages that are not shipped here.
# External tools can populate manifests through these callables:
#   decompose(composite, mask) -> (background, fg_with_effects)
#   caption(triplet) -> {"composite_text": ..., "background_text": ..., "foreground_text": ...}
DecomposeFn = Callable[[RgbaImage, Mask], tuple[RgbaImage, RgbaImage]]
CaptionFn = Callable[[LayerTriplet], dict[str, str]]
