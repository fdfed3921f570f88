"""Oracle metrics for generated sprites.

These replace learned image/text encoders: the corpus is synthetic, so the
ground-truth attributes and style domains are known and can be checked
directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .data import (GRID, HUE_CENTERS, HUES, IMAGE_SIZE, PIXEL, SHAPES, SIZE_RADIUS, SIZES, STYLE_DOMAINS,
                   Attrs, StyleDomain, all_attrs, extract_style_feature, foreground_mask, render, rgb_to_hsv)

SHIFTS = range(-2, 3)


def to_art(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {img.shape}")
    return img.reshape(GRID, PIXEL, GRID, PIXEL, 3).mean(axis=(1, 3))


@lru_cache(maxsize=None)
def _templates() -> tuple[np.ndarray, list[tuple[str, str]]]:
    from .data import shape_mask

    masks, labels = [], []
    for shape in SHAPES:
        for size in SIZES:
            for dx in SHIFTS:
                for dy in SHIFTS:
                    m = shape_mask(shape, SIZE_RADIUS[size], GRID / 2 + dx, GRID / 2 + dy)
                    masks.append(m.ravel())
                    labels.append((shape, size))
    return np.stack(masks).astype(np.float64), labels


def _unshifted_area(shape: str, size: str) -> float:
    from .data import shape_mask

    return float(shape_mask(shape, SIZE_RADIUS[size], GRID / 2, GRID / 2).sum())


def shape_responses(image: np.ndarray) -> np.ndarray:
    """Best IoU of the foreground mask against each of the 5 shape templates."""
    fg = foreground_mask(to_art(image)).ravel().astype(np.float64)
    masks, labels = _templates()
    inter = masks @ fg
    union = masks.sum(axis=1) + fg.sum() - inter
    iou = inter / np.maximum(union, 1e-12)
    out = np.zeros(len(SHAPES))
    for score, (shape, _) in zip(iou, labels):
        k = SHAPES.index(shape)
        out[k] = max(out[k], score)
    return out


def classify(image: np.ndarray) -> Attrs | None:
    """Predict (shape, hue, size); fields the oracle cannot decide are ``"?"``."""
    art = to_art(image)
    fg = foreground_mask(art)
    if not fg.any():
        return Attrs("?", "?", "?")
    resp = shape_responses(image)
    shape = SHAPES[int(np.argmax(resp))]
    area = fg.sum()
    cut = 0.5 * (_unshifted_area(shape, "small") + _unshifted_area(shape, "large"))
    size = "large" if area > cut else "small"

    hsv = rgb_to_hsv(art)
    colourful = fg & (hsv[..., 1] > 0.2) & (hsv[..., 2] > 0.2)
    if colourful.any():
        deg = hsv[..., 0][colourful] * 360.0
        bins = np.round(deg / 45.0).astype(int) % len(HUES)
        hue = HUES[int(np.argmax(np.bincount(bins, minlength=len(HUES))))]
    else:
        hue = "?"
    return Attrs(shape, hue, size)


def semantic_accuracy(image: np.ndarray, attrs: Attrs) -> float:
    """Fraction of the three attributes the oracle recovers from the image."""
    pred = classify(image)
    return (int(pred.shape == attrs.shape) + int(pred.hue == attrs.hue) + int(pred.size == attrs.size)) / 3.0


def _cosine_matrix(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / np.maximum(n, 1e-12)
    return u @ u.T


def _mean_pairwise(cos: np.ndarray) -> float:
    n = cos.shape[0]
    if n < 2:
        return 1.0
    return float((cos.sum() - np.trace(cos)) / (n * (n - 1)))


def image_consistency(images) -> float:
    """Average of mean pairwise cosine over style features and over shape responses."""
    images = list(images)
    if len(images) < 2:
        return 1.0
    feats = np.stack([extract_style_feature(im) for im in images]).astype(np.float64)
    shapes = np.stack([shape_responses(im) for im in images])
    return 0.5 * (_mean_pairwise(_cosine_matrix(feats)) + _mean_pairwise(_cosine_matrix(shapes)))


def cross_consistency(images_a, images_b) -> float:
    """Mean cosine between the two sets (same feature recipe as image_consistency)."""
    fa = np.stack([extract_style_feature(im) for im in images_a]).astype(np.float64)
    fb = np.stack([extract_style_feature(im) for im in images_b]).astype(np.float64)
    sa = np.stack([shape_responses(im) for im in images_a])
    sb = np.stack([shape_responses(im) for im in images_b])

    def cross(a, b):
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return float((a @ b.T).mean())

    return 0.5 * (cross(fa, fb) + cross(sa, sb))


@dataclass
class StyleReference:
    """Per-domain feature centroids of a reference corpus and the distance scale."""

    centroids: dict[int, np.ndarray]
    scale: dict[int, float]

    @classmethod
    def from_corpus(cls, features: np.ndarray, style_ids: np.ndarray) -> "StyleReference":
        features = np.asarray(features, dtype=np.float64)
        cents, scale = {}, {}
        for sid in sorted(set(int(s) for s in style_ids)):
            c = features[style_ids == sid].mean(axis=0)
            cents[sid] = c
            scale[sid] = float(np.linalg.norm(features - c, axis=1).max())
        return cls(cents, scale)

    @classmethod
    def from_domains(cls, per_domain: int = 80, seed: int = 0,
                     domains: tuple[StyleDomain, ...] = STYLE_DOMAINS) -> "StyleReference":
        """Reference built from a balanced render of every attribute combination."""
        rng = np.random.default_rng(seed)
        combos = all_attrs()
        feats, sids = [], []
        for sid, dom in enumerate(domains):
            for i in range(per_domain):
                a = combos[i % len(combos)]
                feats.append(extract_style_feature(render(a, dom, (0, 0), rng)))
                sids.append(sid)
        return cls.from_corpus(np.stack(feats), np.asarray(sids))


def style_consistency_of_features(features: np.ndarray, target: int, ref: StyleReference) -> np.ndarray:
    d = np.linalg.norm(np.asarray(features, dtype=np.float64) - ref.centroids[target], axis=-1)
    return np.clip(1.0 - d / ref.scale[target], 0.0, 1.0)


def style_consistency(images, target: int, ref: StyleReference) -> float:
    """1 - normalised distance of each image's features to the target centroid, averaged."""
    feats = np.stack([extract_style_feature(im) for im in images])
    return float(style_consistency_of_features(feats, target, ref).mean())


@dataclass
class MetricReport:
    semantic_accuracy: float
    image_consistency: float
    style_consistency: float
    per_sample: list[dict] = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"semantic_accuracy": self.semantic_accuracy, "image_consistency": self.image_consistency,
                "style_consistency": self.style_consistency, "per_sample": self.per_sample,
                "fingerprint": self.fingerprint}


def evaluate_images(images, attrs: list[Attrs], target: int, ref: StyleReference,
                    fingerprint: dict | None = None) -> MetricReport:
    images = list(images)
    feats = np.stack([extract_style_feature(im) for im in images])
    style = style_consistency_of_features(feats, target, ref)
    per = []
    for im, a, s in zip(images, attrs, style):
        per.append({"semantic_accuracy": semantic_accuracy(im, a), "style_consistency": float(s)})
    sem = float(np.mean([p["semantic_accuracy"] for p in per]))
    sty = float(np.mean([p["style_consistency"] for p in per]))
    return MetricReport(sem, image_consistency(images), sty, per, dict(fingerprint or {}))
