"""Composite explanation rendering.

The canvas holds four panels: the two images side by side on the top
row with match lines drawn between them, and the same two images on the
bottom row as grayscale with per-match relevance heatmaps tinted in.
All drawing is integer/deterministic (Bresenham lines, fixed palette,
fixed blend constants), so identical inputs give byte-identical PNGs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .pngio import encode_png

log = logging.getLogger(__name__)

GUTTER = 8
HEATMAP_ALPHA = 0.65
BACKGROUND = (24, 24, 28, 255)
ENDPOINT_RADIUS = 2

# 20 hues at fixed saturation 0.78 and value 0.95, evenly spaced; match
# rank r uses PALETTE[r % 20]. Frozen for regression stability.
PALETTE = (
    (242, 53, 53), (242, 110, 53), (242, 167, 53), (242, 223, 53),
    (204, 242, 53), (148, 242, 53), (91, 242, 53), (53, 242, 72),
    (53, 242, 129), (53, 242, 186), (53, 242, 242), (53, 186, 242),
    (53, 129, 242), (53, 72, 242), (91, 53, 242), (148, 53, 242),
    (204, 53, 242), (242, 53, 223), (242, 53, 167), (242, 53, 110),
)


def match_color(rank: int) -> tuple[int, int, int]:
    return PALETTE[rank % len(PALETTE)]


@dataclass
class Panel:
    x: int
    y: int
    width: int
    height: int

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px < self.x + self.width and self.y <= py < self.y + self.height


@dataclass
class ExplanationCanvas:
    width: int
    height: int
    buffer: np.ndarray  # (height, width, 4) uint8
    panels: dict[str, Panel]

    def to_png(self) -> bytes:
        return encode_png(self.buffer)


def make_canvas(image_w: int, image_h: int, gutter: int = GUTTER) -> ExplanationCanvas:
    """Two images wide, two rows tall, with gutters around every panel."""
    width = 2 * image_w + 3 * gutter
    height = 2 * image_h + 3 * gutter
    buffer = np.empty((height, width, 4), dtype=np.uint8)
    buffer[:, :] = BACKGROUND
    panels = {
        "a_top": Panel(gutter, gutter, image_w, image_h),
        "b_top": Panel(2 * gutter + image_w, gutter, image_w, image_h),
        "a_bottom": Panel(gutter, 2 * gutter + image_h, image_w, image_h),
        "b_bottom": Panel(2 * gutter + image_w, 2 * gutter + image_h, image_w, image_h),
    }
    return ExplanationCanvas(width=width, height=height, buffer=buffer, panels=panels)


def _blit(canvas: ExplanationCanvas, panel: Panel, rgb: np.ndarray) -> None:
    if rgb.shape[:2] != (panel.height, panel.width):
        raise ContractError(f"image shape {rgb.shape[:2]} does not fit panel {panel}")
    canvas.buffer[panel.y : panel.y + panel.height, panel.x : panel.x + panel.width, :3] = rgb
    canvas.buffer[panel.y : panel.y + panel.height, panel.x : panel.x + panel.width, 3] = 255


def _clamp_to_panel(panel: Panel, px: float, py: float) -> tuple[int, int]:
    x = min(max(int(round(px)), 0), panel.width - 1)
    y = min(max(int(round(py)), 0), panel.height - 1)
    return panel.x + x, panel.y + y


def _draw_line(buffer: np.ndarray, x0: int, y0: int, x1: int, y1: int, color) -> None:
    """Bresenham line with alpha 255."""
    h, w = buffer.shape[:2]
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        if 0 <= x < w and 0 <= y < h:
            buffer[y, x, :3] = color
            buffer[y, x, 3] = 255
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def _draw_marker(buffer: np.ndarray, cx: int, cy: int, color, radius: int = ENDPOINT_RADIUS) -> None:
    h, w = buffer.shape[:2]
    for y in range(cy - radius, cy + radius + 1):
        for x in range(cx - radius, cx + radius + 1):
            if 0 <= x < w and 0 <= y < h:
                buffer[y, x, :3] = color
                buffer[y, x, 3] = 255


def draw_matches(canvas: ExplanationCanvas, image_a: np.ndarray, image_b: np.ndarray,
                 matches, grid_to_pixel) -> ExplanationCanvas:
    """Blit the pair into the top panels and draw one line per match,
    colored by rank, endpoints marked."""
    pa, pb = canvas.panels["a_top"], canvas.panels["b_top"]
    _blit(canvas, pa, image_a)
    _blit(canvas, pb, image_b)
    for rank, m in enumerate(matches.matches):
        color = match_color(rank)
        ax, ay = _clamp_to_panel(pa, *grid_to_pixel(m.kp_a))
        bx, by = _clamp_to_panel(pb, *grid_to_pixel(m.kp_b))
        _draw_line(canvas.buffer, ax, ay, bx, by, color)
        _draw_marker(canvas.buffer, ax, ay, color)
        _draw_marker(canvas.buffer, bx, by, color)
    return canvas


def _grayscale(rgb: np.ndarray) -> np.ndarray:
    lum = (0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2])
    return np.repeat(lum[:, :, None], 3, axis=2)


def _composite_heatmaps(rgb: np.ndarray, heatmaps) -> np.ndarray:
    """Grayscale base; each pixel takes the color of the match with the
    largest normalized relevance there, blended by that relevance."""
    base = _grayscale(rgb)
    h, w = base.shape[:2]
    layers = []
    colors = []
    for pr in heatmaps:
        hm = np.asarray(pr.heatmap(), dtype=np.float64)
        if hm.shape != (h, w):
            raise ContractError(f"heatmap extents {hm.shape} do not match image extents {(h, w)}")
        peak = hm.max()
        if peak <= 0.0:
            log.warning("skipping all-zero heatmap for match %d", pr.match_id)
            continue
        layers.append(hm / peak)  # per-match normalization
        colors.append(match_color(pr.match_id))
    if not layers:
        return np.rint(base).astype(np.uint8)
    stack = np.stack(layers)  # (n, h, w)
    winner = stack.argmax(axis=0)  # first maximal layer wins ties
    strength = stack.max(axis=0)
    color_arr = np.asarray(colors, dtype=np.float64)[winner]  # (h, w, 3)
    alpha = (HEATMAP_ALPHA * strength)[:, :, None]
    out = base * (1.0 - alpha) + color_arr * alpha
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8)


def draw_heatmaps(canvas: ExplanationCanvas, image_a: np.ndarray, image_b: np.ndarray,
                  heatmaps_a, heatmaps_b) -> ExplanationCanvas:
    """Fill the bottom panels with tinted relevance composites."""
    _blit(canvas, canvas.panels["a_bottom"], _composite_heatmaps(image_a, heatmaps_a))
    _blit(canvas, canvas.panels["b_bottom"], _composite_heatmaps(image_b, heatmaps_b))
    return canvas


def compose_explanation(image_a: np.ndarray, image_b: np.ndarray, matches,
                        heatmaps_a, heatmaps_b, grid_to_pixel) -> ExplanationCanvas:
    """The full figure: matched features on top, relevance maps below."""
    if image_a.shape != image_b.shape:
        raise ContractError(f"pair images must share a shape, got {image_a.shape} vs {image_b.shape}")
    h, w = image_a.shape[:2]
    canvas = make_canvas(w, h)
    draw_matches(canvas, image_a, image_b, matches, grid_to_pixel)
    draw_heatmaps(canvas, image_a, image_b, heatmaps_a, heatmaps_b)
    return canvas
