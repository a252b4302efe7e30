"""Synthetic patterned-individual dataset with exact geometric ground
truth, plus the fixed blob-detecting model used to embed it.

Each "individual" is a unique constellation of dark dots inside a
shared elliptical outline on a light canvas. Every image of an
individual is the same analytic artwork rendered through a known
homography with photometric jitter, so reference correspondences
between any two images are exact by construction: a fixed set of
canonical anchor points is pushed through each image's homography.

The companion model is handcrafted, not trained: an off/on-center
difference-of-Gaussians front end with oriented gradients, followed by
small structured mixing layers, ending in a flattened coarse grid so
the embedding keeps spatial arrangement. Two intermediate taps make the
layer sweep meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pngio import write_png
from .runtime import ModelGraph, build_model, save_model
from .tensor import LayerSpec

CANVAS = 128
DOTS_TOTAL = 24
POOL_SIZE = 40  # species-wide dot vocabulary
POOL_DOTS_RANGE = (5, 24)  # dots an individual draws from the pool
DOT_RADIUS = (2.6, 4.6)
ELLIPSE_AXES = (46.0, 55.0)
OUTLINE_WIDTH = 0.05  # in normalized ellipse-radius units
OUTLINE_INK = 0.7  # outline is fainter than the dots
INK_CONTRAST = 0.75
BACKGROUND_LEVEL = 0.94
SHADING_STRENGTH = 0.10  # linear illumination gradient across the canvas
ANCHOR_GRID = 5  # anchor points per axis for correspondences

# per-render difficulty ladder: warp amplitude, pixel noise, dot dropout
RENDER_DIFFICULTY = (
    (0.55, 0.008, 0.00),
    (0.80, 0.012, 0.05),
    (1.00, 0.015, 0.08),
    (1.20, 0.020, 0.12),
    (1.45, 0.025, 0.16),
)


@dataclass(frozen=True)
class RenderedImage:
    image_id: str
    identity: str
    split: str
    path: Path
    homography: np.ndarray  # canonical frame -> this image


def make_pair_id(query_id: str, gallery_id: str) -> str:
    return f"{query_id}__{gallery_id}"


def _rotation_scale(theta: float, scale: float, shear: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([
        [scale * c, -scale * s + shear, 0.0],
        [scale * s, scale * c, 0.0],
        [0.0, 0.0, 1.0],
    ])


def random_homography(rng: np.random.Generator, amplitude: float = 1.0) -> np.ndarray:
    """A mild perspective warp about the canvas centre; ``amplitude``
    scales every deviation from the identity."""
    theta = amplitude * rng.uniform(-0.15, 0.15)
    scale = 1.0 + amplitude * rng.uniform(-0.09, 0.09)
    shear = amplitude * rng.uniform(-0.03, 0.03)
    tx, ty = amplitude * rng.uniform(-5.0, 5.0, size=2)
    px, py = amplitude * rng.uniform(-8e-5, 8e-5, size=2)
    centre = CANVAS / 2.0
    to_origin = np.array([[1, 0, -centre], [0, 1, -centre], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, centre + tx], [0, 1, centre + ty], [0, 0, 1]], dtype=np.float64)
    persp = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1]], dtype=np.float64)
    h = back @ persp @ _rotation_scale(theta, scale, shear) @ to_origin
    return h / h[2, 2]


def _dot_positions(rng: np.random.Generator, count: int) -> np.ndarray:
    """Dot centres sampled inside the outline."""
    centre = CANVAS / 2.0
    rx, ry = ELLIPSE_AXES
    pts = []
    while len(pts) < count:
        u = rng.uniform(-1, 1, size=2)
        if u[0] ** 2 + u[1] ** 2 < 0.78:
            pts.append((centre + u[0] * rx, centre + u[1] * ry))
    return np.array(pts)


def _dot_pool(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """The species-wide dot vocabulary individuals draw from. Sharing
    pool dots makes some individuals near-twins, giving the evaluation a
    continuum of pair difficulty."""
    return _dot_positions(rng, POOL_SIZE), rng.uniform(*DOT_RADIUS, size=POOL_SIZE)


@dataclass(frozen=True)
class Individual:
    identity: str
    dot_xy: np.ndarray  # (k, 2) canonical coordinates
    dot_r: np.ndarray  # (k,)


def _sample_individual(rng: np.random.Generator, identity: str,
                       pool: tuple[np.ndarray, np.ndarray] | None = None) -> Individual:
    if pool is None:
        xy = _dot_positions(rng, DOTS_TOTAL)
        return Individual(identity=identity, dot_xy=xy,
                          dot_r=rng.uniform(*DOT_RADIUS, size=DOTS_TOTAL))
    n_pool = int(rng.integers(*POOL_DOTS_RANGE))
    chosen = rng.choice(POOL_SIZE, size=n_pool, replace=False)
    unique = _dot_positions(rng, DOTS_TOTAL - n_pool)
    xy = np.vstack([pool[0][chosen], unique])
    radii = np.concatenate([pool[1][chosen],
                            rng.uniform(*DOT_RADIUS, size=DOTS_TOTAL - n_pool)])
    return Individual(identity=identity, dot_xy=xy, dot_r=radii)


def _artwork_ink(ind: Individual, px: np.ndarray, py: np.ndarray,
                 keep_dots: np.ndarray | None = None) -> np.ndarray:
    """Analytic ink amount in [0, 1] at canonical coordinates."""
    centre = CANVAS / 2.0
    rx, ry = ELLIPSE_AXES
    r = np.sqrt(((px - centre) / rx) ** 2 + ((py - centre) / ry) ** 2)
    outline = OUTLINE_INK * np.clip(1.0 - np.abs(r - 1.0) / OUTLINE_WIDTH, 0.0, 1.0)
    ink = outline
    for idx, ((dx, dy), radius) in enumerate(zip(ind.dot_xy, ind.dot_r)):
        if keep_dots is not None and not keep_dots[idx]:
            continue
        dist = np.sqrt((px - dx) ** 2 + (py - dy) ** 2)
        ink = np.maximum(ink, np.clip(radius + 0.5 - dist, 0.0, 1.0))
    return ink


def render_image(ind: Individual, homography: np.ndarray, rng: np.random.Generator,
                 noise_sigma: float = 0.012, dot_dropout: float = 0.08) -> np.ndarray:
    """Render the artwork through the homography as (h, w, 3) uint8.

    Photometric variation per render: global brightness, a linear
    illumination gradient, pixel noise, and occasional dot occlusion."""
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    inv = np.linalg.inv(homography)
    hx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    hy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    hw = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    keep = rng.random(len(ind.dot_xy)) >= dot_dropout
    ink = _artwork_ink(ind, hx / hw, hy / hw, keep_dots=keep)
    brightness = rng.uniform(0.78, 1.02)
    angle = rng.uniform(0.0, 2 * np.pi)
    ramp = ((xs - CANVAS / 2) * np.cos(angle) + (ys - CANVAS / 2) * np.sin(angle)) / CANVAS
    shading = 1.0 + SHADING_STRENGTH * 2.0 * ramp * rng.uniform(0.2, 1.0)
    level = (BACKGROUND_LEVEL - ink * INK_CONTRAST) * brightness * shading
    level = level + rng.normal(scale=noise_sigma, size=level.shape)
    gray = np.clip(level, 0.0, 1.0)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    return np.rint(rgb * 255).astype(np.uint8)


def anchor_points() -> np.ndarray:
    """Fixed canonical anchors used to emit correspondences."""
    margin = 18.0
    axis = np.linspace(margin, CANVAS - margin, ANCHOR_GRID)
    pts = [(x, y) for y in axis for x in axis]
    return np.array(pts, dtype=np.float64)


def _apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ones = np.ones((len(pts), 1))
    proj = np.hstack([pts, ones]) @ h.T
    return proj[:, :2] / proj[:, 2:3]


# ---------------------------------------------------------------------------
# The fixed blob-detecting model
# ---------------------------------------------------------------------------


def _gaussian_kernel(size: int, sigma: float, cy: float | None = None,
                     cx: float | None = None) -> np.ndarray:
    centre = (size - 1) / 2.0
    cy = centre if cy is None else cy
    cx = centre if cx is None else cx
    ax = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _gradient_kernel(size: int, sigma: float, axis: int) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    xx, yy = np.meshgrid(ax, ax)
    g = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    k = (xx if axis == 0 else yy) * g
    return k / np.abs(k).sum()


def blob_model() -> ModelGraph:
    """Two-scale centre-surround front end, a wide smoothing layer that
    spreads constellation context (plus offset taps of the blob field),
    then a mixing head flattened into the embedding.

    Taps: layer 3 is the smoothed 32x32 map (stride 4), layer 6 the
    mixed 16x16 map (stride 8). The smoothing makes descriptor fields
    vary slowly, so nearest-neighbour matching tolerates the warp."""
    k1 = 7
    dog_small = _gaussian_kernel(k1, 1.8) - _gaussian_kernel(k1, 0.9)  # dark blobs -> +
    dog_large = _gaussian_kernel(k1, 3.2) - _gaussian_kernel(k1, 1.6)
    grad_x = _gradient_kernel(k1, 1.6, axis=0)
    grad_y = _gradient_kernel(k1, 1.6, axis=1)
    w0 = np.zeros((6, 3, k1, k1), dtype=np.float32)
    for c in range(3):
        w0[0, c] = 8.0 * dog_small / 3.0
        w0[1, c] = 8.0 * dog_large / 3.0
        w0[2, c] = 4.0 * grad_x / 3.0
        w0[3, c] = -4.0 * grad_x / 3.0
        w0[4, c] = 4.0 * grad_y / 3.0
        w0[5, c] = -4.0 * grad_y / 3.0
    # thresholds chosen so pixel noise leaves the background exactly zero
    b0 = np.array([-0.10, -0.10, -0.15, -0.15, -0.15, -0.15], dtype=np.float32)

    k2 = 9
    smooth = _gaussian_kernel(k2, 2.2)
    centre = (k2 - 1) / 2.0
    w1 = np.zeros((14, 6, k2, k2), dtype=np.float32)
    for c in range(6):
        w1[c, c] = smooth
    # constellation context: the blob field sampled at 4 directions and
    # two offset radii (6 px and 8 px in input coordinates)
    for k, offset in enumerate((3.0, 4.0)):
        base = 6 + 4 * k
        w1[base + 0, 0] = _gaussian_kernel(k2, 1.6, cy=centre - offset)
        w1[base + 1, 0] = _gaussian_kernel(k2, 1.6, cy=centre + offset)
        w1[base + 2, 0] = _gaussian_kernel(k2, 1.6, cx=centre - offset)
        w1[base + 3, 0] = _gaussian_kernel(k2, 1.6, cx=centre + offset)
    b1 = np.zeros(14, dtype=np.float32)

    w2 = np.zeros((14, 14, 3, 3), dtype=np.float32)
    for c in range(14):
        w2[c, c] = 1.0 / 9.0
    b2 = np.zeros(14, dtype=np.float32)

    layers = [
        LayerSpec(kind="conv2d", kernel=k1, stride=2, padding=3, in_channels=3,
                  out_channels=6, weight="w0", bias="b0"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="conv2d", kernel=k2, stride=2, padding=4, in_channels=6,
                  out_channels=14, weight="w1", bias="b1"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="avgpool2d", kernel=2, stride=2),
        LayerSpec(kind="conv2d", kernel=3, stride=1, padding=1, in_channels=14,
                  out_channels=14, weight="w2", bias="b2"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="flatten"),
    ]
    weights = {"w0": w0, "b0": b0, "w1": w1, "b1": b1, "w2": w2, "b2": b2}
    return build_model(layers, weights, (3, CANVAS, CANVAS), [0.0, 0.0, 0.0],
                       [1.0, 1.0, 1.0], tap_points=(3, 6), embedding_index=7)


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------


def generate_dataset(
    out_dir,
    n_individuals: int = 40,
    renders_per_individual: int = 6,
    rng_seed: int = 0,
) -> dict:
    """Write images, manifest, correspondences, and the model container.

    Renders per individual are split round-robin over gallery, query,
    and train. Correspondences are emitted for every query x gallery and
    train x train image pair. Returns the paths of everything written.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rng_seed)

    split_cycle = ["gallery", "query", "train"]
    pool = _dot_pool(rng)
    rendered: list[RenderedImage] = []
    manifest_lines = []
    for n in range(n_individuals):
        ident = f"ind{n:03d}"
        individual = _sample_individual(rng, ident, pool=pool)
        for r in range(renders_per_individual):
            amplitude, noise, dropout = RENDER_DIFFICULTY[r % len(RENDER_DIFFICULTY)]
            h = random_homography(rng, amplitude=amplitude)
            image = render_image(individual, h, rng, noise_sigma=noise, dot_dropout=dropout)
            image_id = f"{ident}_r{r}"
            path = img_dir / f"{image_id}.png"
            write_png(path, image)
            split = split_cycle[r % 3]
            rendered.append(RenderedImage(image_id=image_id, identity=ident,
                                          split=split, path=path, homography=h))
            manifest_lines.append(json.dumps({
                "image_path": str(path),
                "identity": ident,
                "split": split,
            }))

    manifest_path = out / "manifest.jsonl"
    manifest_path.write_text("\n".join(manifest_lines) + "\n")

    anchors = anchor_points()
    by_split: dict[str, list[RenderedImage]] = {"query": [], "gallery": [], "train": []}
    for img in rendered:
        by_split[img.split].append(img)

    records = []
    for a_list, b_list in ((by_split["query"], by_split["gallery"]),
                           (by_split["train"], by_split["train"])):
        for a in a_list:
            pa = _apply_h(a.homography, anchors)
            for b in b_list:
                if a.image_id == b.image_id:
                    continue
                pb = _apply_h(b.homography, anchors)
                records.append({
                    "pair_id": make_pair_id(a.image_id, b.image_id),
                    "points": np.hstack([pa, pb]).round(4).tolist(),
                })
    corr_path = out / "correspondences.json"
    corr_path.write_text(json.dumps(records))

    model_path = out / "model.pxw"
    save_model(blob_model(), model_path)

    return {
        "manifest": manifest_path,
        "correspondences": corr_path,
        "model": model_path,
        "images": img_dir,
        "n_images": len(rendered),
    }
