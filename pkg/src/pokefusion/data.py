"""Procedural sprite corpus, caption grammar, style features and latent codec.

Sprites are 16x16 pixel art shown at 32x32 (every art pixel is a 2x2 block),
so the 2x average-pool latent encoding loses nothing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = 32
GRID = 16
PIXEL = IMAGE_SIZE // GRID

SHAPES = ("circle", "square", "triangle", "star", "diamond")
HUES = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink")
SIZES = ("small", "large")
HUE_CENTERS = tuple(45.0 * i for i in range(len(HUES)))
SIZE_RADIUS = {"small": 4.5, "large": 6.5}

NULL_TOKEN = 0
PAD_TOKEN = 1
VOCAB = ("<null>", "<pad>", "a") + SIZES + HUES + SHAPES
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
# parse-only aliases; captions are always written with the canonical word
SYNONYMS = {"big": "large", "tiny": "small", "box": "square", "rhombus": "diamond", "an": "a"}
GRAMMAR_VERSION = 1

LUMA = np.array([0.299, 0.587, 0.114])
STYLE_FEATURE_DIM = 32
OUTLINE_VALUE = 0.25


@dataclass(frozen=True)
class StyleDomain:
    name: str
    hue_shift: float  # degrees, kept inside one hue bin
    saturation: float
    value: float
    outline_width: int  # art pixels
    texture: str  # flat | noise | stripes
    background: tuple[float, float, float]

    def params_vector(self) -> np.ndarray:
        """Normalised position in the generator's style-parameter space."""
        tex = {"flat": 0.0, "noise": 0.5, "stripes": 1.0}[self.texture]
        return np.array([self.hue_shift / 20.0, self.saturation, self.value,
                         (self.outline_width - 1) / 2.0, tex, float(np.mean(self.background))])


STYLE_DOMAINS: tuple[StyleDomain, ...] = (
    StyleDomain("classic", 0.0, 0.90, 0.95, 1, "flat", (0.92, 0.92, 0.88)),
    StyleDomain("noir", 10.0, 0.55, 0.70, 3, "stripes", (0.80, 0.80, 0.84)),
    StyleDomain("pastel", -8.0, 0.40, 1.00, 1, "noise", (0.80, 0.84, 0.90)),
    StyleDomain("bold", 5.0, 1.00, 0.80, 2, "stripes", (0.60, 0.58, 0.55)),
)


@dataclass(frozen=True)
class Attrs:
    shape: str
    hue: str
    size: str

    def to_dict(self) -> dict:
        return {"shape": self.shape, "hue": self.hue, "size": self.size}


def all_attrs() -> list[Attrs]:
    return [Attrs(s, h, z) for s in SHAPES for h in HUES for z in SIZES]


# ---------------------------------------------------------------------------
# captions


def caption(attrs: Attrs) -> str:
    return f"a {attrs.size} {attrs.hue} {attrs.shape}"


def parse_caption(text: str) -> Attrs:
    words = [SYNONYMS.get(w, w) for w in text.lower().split()]
    shape = [w for w in words if w in SHAPES]
    hue = [w for w in words if w in HUES]
    size = [w for w in words if w in SIZES]
    if len(shape) != 1 or len(hue) != 1 or len(size) != 1:
        raise ValueError(f"caption does not name exactly one shape, hue and size: {text!r}")
    return Attrs(shape[0], hue[0], size[0])


def tokenize(text: str, max_tokens: int = 16) -> np.ndarray:
    words = [SYNONYMS.get(w, w) for w in text.lower().split()]
    if len(words) > max_tokens:
        raise ValueError(f"caption longer than {max_tokens} tokens")
    unknown = [w for w in words if w not in TOKEN_ID or TOKEN_ID[w] <= PAD_TOKEN]
    if unknown:
        raise ValueError(f"unknown words {unknown}")
    ids = np.full(max_tokens, PAD_TOKEN, dtype=np.int64)
    ids[: len(words)] = [TOKEN_ID[w] for w in words]
    return ids


def null_tokens(max_tokens: int = 16) -> np.ndarray:
    return np.full(max_tokens, NULL_TOKEN, dtype=np.int64)


# ---------------------------------------------------------------------------
# colour helpers


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64) % 1.0
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


# ---------------------------------------------------------------------------
# rendering


def shape_mask(shape: str, radius: float, cx: float, cy: float, grid: int = GRID) -> np.ndarray:
    """Boolean silhouette on the art grid (pixel centres at i + 0.5)."""
    yy, xx = np.mgrid[0:grid, 0:grid] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= radius ** 2
    if shape == "square":
        r = radius * 0.85
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius * 1.15
    if shape == "triangle":
        # apex up, base at cy + r*0.8
        top, bottom = cy - radius, cy + radius * 0.85
        frac = (yy - top) / (bottom - top)
        return (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * radius * 1.05)
    if shape == "star":
        ang = np.arctan2(dy, dx) + np.pi / 2
        rr = np.hypot(dx, dy)
        # five-point star: radius oscillates between inner and outer
        k = np.abs(((ang * 5 / (2 * np.pi)) % 1.0) - 0.5) * 2.0
        limit = radius * (0.45 + 0.6 * k)
        return rr <= limit
    raise ValueError(f"unknown shape {shape!r}")


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    m = mask.copy()
    for _ in range(steps):
        p = np.pad(m, 1, constant_values=False)
        m = m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m


def render_art(attrs: Attrs, domain: StyleDomain, offset: tuple[int, int] = (0, 0),
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Render a sprite on the 16x16 art grid, RGB float in [0,1]."""
    cx = GRID / 2 + offset[0]
    cy = GRID / 2 + offset[1]
    sil = shape_mask(attrs.shape, SIZE_RADIUS[attrs.size], cx, cy)
    fill = _erode(sil, domain.outline_width)
    outline = sil & ~fill

    hue = (HUE_CENTERS[HUES.index(attrs.hue)] + domain.hue_shift) / 360.0
    val = np.full((GRID, GRID), domain.value)
    if domain.texture == "stripes":
        val[1::2, :] *= 0.72
    elif domain.texture == "noise":
        rng = rng or np.random.default_rng(0)
        val = np.clip(val - rng.uniform(0.0, 0.25, size=val.shape), 0.0, 1.0)
    col = hsv_to_rgb(np.full((GRID, GRID), hue), np.full((GRID, GRID), domain.saturation), val)

    art = np.empty((GRID, GRID, 3))
    art[:] = domain.background
    art[fill] = col[fill]
    # outline is a dark shade of the fill hue
    art[outline] = hsv_to_rgb(np.array(hue), np.array(min(1.0, domain.saturation + 0.3)), np.array(OUTLINE_VALUE))
    return art


def upscale(art: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(art, PIXEL, axis=0), PIXEL, axis=1)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render(attrs: Attrs, domain: StyleDomain, offset: tuple[int, int] = (0, 0),
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Full-resolution 32x32x3 sprite, quantised to 8-bit levels."""
    return quantize(upscale(render_art(attrs, domain, offset, rng)))


# ---------------------------------------------------------------------------
# latent codec


def encode_latent(image: np.ndarray) -> np.ndarray:
    """2x average-pool per RGB channel plus a pooled luminance channel: (4, 16, 16)."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {image.shape}")
    pooled = image.reshape(GRID, PIXEL, GRID, PIXEL, 3).mean(axis=(1, 3), dtype=np.float64)
    luma = pooled @ LUMA
    return np.concatenate([pooled.transpose(2, 0, 1), luma[None]], axis=0).astype(np.float32)


def decode_latent(latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float32)
    if latent.shape != (4, GRID, GRID):
        raise ValueError(f"expected a (4, {GRID}, {GRID}) latent, got {latent.shape}")
    rgb = np.clip(latent[:3].transpose(1, 2, 0), 0.0, 1.0)
    return upscale(rgb).astype(np.float32)


# ---------------------------------------------------------------------------
# style features


def _hist(values: np.ndarray, bins: int) -> np.ndarray:
    idx = np.clip((values * bins).astype(int), 0, bins - 1)
    return np.bincount(idx.ravel(), minlength=bins) / idx.size


def background_estimate(img: np.ndarray) -> np.ndarray:
    ring = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
    return np.median(ring, axis=0)


def foreground_mask(img: np.ndarray, thresh: float = 0.15) -> np.ndarray:
    bg = background_estimate(img)
    return np.linalg.norm(img - bg, axis=-1) > thresh


def extract_style_feature(image: np.ndarray) -> np.ndarray:
    """Handcrafted 32-d style descriptor, every entry in [0, 1].

    Layout: hue/sat/val histograms (8 bins each), edge density, outline
    width estimate, background tone, 5 texture-energy statistics.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected a {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {img.shape}")
    art = img.reshape(GRID, PIXEL, GRID, PIXEL, 3).mean(axis=(1, 3))
    hsv = rgb_to_hsv(art)
    hist = np.concatenate([_hist(hsv[..., k], 8) for k in range(3)])

    y = art @ LUMA
    gx = np.abs(np.diff(y, axis=1))
    gy = np.abs(np.diff(y, axis=0))
    edge_density = 0.5 * ((gx > 0.1).mean() + (gy > 0.1).mean())

    fg = foreground_mask(art)
    p = np.pad(fg, 1, constant_values=False)
    boundary = fg & ~(p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:])
    dark = fg & (hsv[..., 2] < OUTLINE_VALUE + 0.05)
    outline = min(dark.sum() / max(boundary.sum(), 1) / 3.0, 1.0)

    bg_tone = float(np.mean(background_estimate(art)))

    h1 = np.abs(np.diff(y, axis=1)).mean()
    v1 = np.abs(np.diff(y, axis=0)).mean()
    v2 = np.abs(y[2:] - y[:-2]).mean()
    # stripes alternate every row: lag-1 energy minus lag-2 energy
    alt = max(v1 - v2, 0.0)
    pad = np.pad(y, 1, mode="edge")
    local_mean = sum(pad[i:i + GRID, j:j + GRID] for i in range(3) for j in range(3)) / 9.0
    local_var = ((y - local_mean) ** 2).mean()
    texture = np.clip(np.array([h1 * 4, v1 * 4, v2 * 4, alt * 8, np.sqrt(local_var) * 4]), 0.0, 1.0)

    feat = np.concatenate([hist, [edge_density, outline, bg_tone], texture])
    return feat.astype(np.float32)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class SpriteDataset:
    images: np.ndarray  # (N, 32, 32, 3) float32
    latents: np.ndarray  # (N, 4, 16, 16) float32
    tokens: np.ndarray  # (N, M) int64
    features: np.ndarray  # (N, 32) float32
    style_ids: np.ndarray  # (N,) int64
    attrs: list[Attrs] = field(default_factory=list)
    captions: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.attrs)

    def subset(self, idx) -> "SpriteDataset":
        idx = np.asarray(idx)
        return SpriteDataset(self.images[idx], self.latents[idx], self.tokens[idx], self.features[idx],
                             self.style_ids[idx], [self.attrs[i] for i in idx],
                             [self.captions[i] for i in idx])

    def split(self, holdout: float = 0.1) -> tuple["SpriteDataset", "SpriteDataset"]:
        n_hold = max(1, int(round(len(self) * holdout))) if len(self) > 1 else 0
        cut = len(self) - n_hold
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))


def generate_dataset(n: int, styles: int = 2, seed: int = 0, max_tokens: int = 16) -> SpriteDataset:
    """Deterministic corpus of ``n`` sprites spread over the first ``styles`` domains."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= styles <= len(STYLE_DOMAINS):
        raise ValueError(f"styles must be in [1, {len(STYLE_DOMAINS)}]")
    rng = np.random.default_rng(seed)
    images, attrs, sids = [], [], []
    for _ in range(n):
        a = Attrs(SHAPES[rng.integers(len(SHAPES))], HUES[rng.integers(len(HUES))],
                  SIZES[rng.integers(len(SIZES))])
        sid = int(rng.integers(styles))
        off = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
        images.append(render(a, STYLE_DOMAINS[sid], off, rng))
        attrs.append(a)
        sids.append(sid)
    images = np.stack(images)
    caps = [caption(a) for a in attrs]
    return SpriteDataset(
        images=images,
        latents=np.stack([encode_latent(im) for im in images]),
        tokens=np.stack([tokenize(c, max_tokens) for c in caps]),
        features=np.stack([extract_style_feature(im) for im in images]),
        style_ids=np.asarray(sids, dtype=np.int64),
        attrs=attrs,
        captions=caps,
    )


def style_separability(ds: SpriteDataset) -> float:
    """Mean within-domain feature cosine minus mean cross-domain cosine."""
    f = ds.features.astype(np.float64)
    f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    cos = f @ f.T
    same = ds.style_ids[:, None] == ds.style_ids[None, :]
    off_diag = ~np.eye(len(f), dtype=bool)
    within = cos[same & off_diag]
    cross = cos[~same]
    if within.size == 0 or cross.size == 0:
        return float("nan")
    return float(within.mean() - cross.mean())


def save_png(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, optimize=False)


def load_png(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0)


def write_dataset(ds: SpriteDataset, out_dir: Path) -> Path:
    """Write PNGs plus ``manifest.jsonl``; returns the manifest path.

    Each manifest line is a JSON object with keys ``path`` (relative to the
    manifest), ``caption``, ``attrs`` ({shape, hue, size}), ``style_id`` and
    ``feature`` (32 floats).
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i in range(len(ds)):
            rel = f"images/{i:05d}.png"
            save_png(ds.images[i], out_dir / rel)
            rec = {"path": rel, "caption": ds.captions[i], "attrs": ds.attrs[i].to_dict(),
                   "style_id": int(ds.style_ids[i]),
                   "feature": [float(v) for v in ds.features[i]]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def read_dataset(manifest: Path, max_tokens: int = 16) -> SpriteDataset:
    manifest = Path(manifest)
    images, attrs, sids, caps = [], [], [], []
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            images.append(load_png(manifest.parent / rec["path"]))
            attrs.append(Attrs(**rec["attrs"]))
            sids.append(int(rec["style_id"]))
            caps.append(rec["caption"])
    if not images:
        raise ValueError(f"empty manifest {manifest}")
    images = np.stack(images)
    return SpriteDataset(
        images=images,
        latents=np.stack([encode_latent(im) for im in images]),
        tokens=np.stack([tokenize(c, max_tokens) for c in caps]),
        features=np.stack([extract_style_feature(im) for im in images]),
        style_ids=np.asarray(sids, dtype=np.int64),
        attrs=attrs,
        captions=caps,
    )
