"""Homography estimation from reference correspondences and the two
per-pair plausibility metrics.

The reference correspondences arrive from a JSON file (one object per
pair: ``{"pair_id": ..., "points": [[x, y, x', y'], ...]}`` in pixel
coordinates of the original images). Estimation is RANSAC over 4-point
samples, each solved with a Hartley-normalized direct linear transform,
followed by a DLT refit on all inliers.

Keypoints live on the tapped grid; ``grid_to_pixel_map`` places them at
receptive-field centres, pixel = (grid + 0.5) * cumulative_stride.
Residuals are measured in model-input pixels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateError, InputError
from .lrp import RelevanceMap
from .matching import MatchSet

RESIDUAL_UNITS = "model_input_pixels"
INVERTED_RESIDUAL_CLAMP = 1e9
_W_EPS = 1e-12
_RANSAC_CONFIDENCE = 0.9999


@dataclass(frozen=True)
class Homography:
    """3x3 projective map with RANSAC inlier metadata."""

    matrix: np.ndarray
    inlier_count: int
    inlier_threshold: float

    def inverse(self) -> "Homography":
        return Homography(
            matrix=np.linalg.inv(self.matrix),
            inlier_count=self.inlier_count,
            inlier_threshold=self.inlier_threshold,
        )


@dataclass(frozen=True)
class PairMetrics:
    """Per-pair quantities feeding the dataset aggregation."""

    inverted_residual_mean: float | None
    match_coverage: float | None
    cosine_similarity: float
    is_correct: bool
    num_matches: int
    num_points_at_infinity: int = 0


def grid_to_pixel_map(stride: int):
    """Map a grid keypoint (i, j) to the centre of its stride cell."""

    def to_pixel(kp):
        i, j = kp
        return ((i + 0.5) * stride, (j + 0.5) * stride)

    return to_pixel


def _normalization(points: np.ndarray) -> np.ndarray:
    """Hartley transform: centroid to origin, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    scale = math.sqrt(2.0) / dist if dist > 0 else 1.0
    return np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform over >= 4 correspondences."""
    t1 = _normalization(src)
    t2 = _normalization(dst)
    ones = np.ones((len(src), 1))
    s = (np.hstack([src, ones]) @ t1.T)[:, :2]
    d = (np.hstack([dst, ones]) @ t2.T)[:, :2]
    rows = []
    for (x, y), (xp, yp) in zip(s, d):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, x * xp, y * xp, xp])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, x * yp, y * yp, yp])
    a = np.asarray(rows, dtype=np.float64)
    _, _, vt = np.linalg.svd(a)
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ h_norm @ t1
    if abs(h[2, 2]) > _W_EPS:
        h = h / h[2, 2]
    return h


def _collinear_triple_present(points: np.ndarray, tol: float = 1e-9) -> bool:
    n = len(points)
    scale = max(points.max() - points.min(), 1.0)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                ab = points[j] - points[i]
                ac = points[k] - points[i]
                area = abs(ab[0] * ac[1] - ab[1] * ac[0])
                if area < tol * scale * scale:
                    return True
    return False


def project(h: Homography, p) -> tuple[float, float]:
    """Perspective projection of a 2-D point; points at infinity rejected."""
    x, y = float(p[0]), float(p[1])
    m = h.matrix
    hx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    hy = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    hw = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(hw) < _W_EPS:
        raise DegenerateError(f"point {p} projects to infinity under this homography")
    return (hx / hw, hy / hw)


def _residuals(h_matrix: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ones = np.ones((len(src), 1))
    proj = np.hstack([src, ones]) @ h_matrix.T
    w = proj[:, 2]
    out = np.full(len(src), np.inf)
    ok = np.abs(w) >= _W_EPS
    out[ok] = np.sqrt(((proj[ok, :2] / w[ok, None] - dst[ok]) ** 2).sum(axis=1))
    return out


def estimate_homography(correspondences, threshold: float, max_iters: int = 2000,
                        rng_seed: int = 0) -> Homography:
    """RANSAC + normalized DLT. Fully deterministic for a fixed seed.

    Degenerate 4-point samples (any 3 collinear) are resampled. The best
    consensus set is refit with DLT over all its inliers, and the inlier
    set is recomputed under the refit matrix so every reported inlier
    satisfies the threshold under the returned homography.
    """
    pairs = [((float(a[0]), float(a[1])), (float(b[0]), float(b[1])))
             for a, b in correspondences]
    n = len(pairs)
    if n < 4:
        raise DegenerateError(f"homography unavailable: {n} correspondences (need >= 4)")
    src = np.array([p[0] for p in pairs], dtype=np.float64)
    dst = np.array([p[1] for p in pairs], dtype=np.float64)

    rng = np.random.default_rng(rng_seed)
    best_inliers: np.ndarray | None = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _collinear_triple_present(src[idx]) or _collinear_triple_present(dst[idx]):
            continue
        try:
            h = _dlt(src[idx], dst[idx])
        except np.linalg.LinAlgError:
            continue
        if abs(np.linalg.det(h)) < _W_EPS:
            continue
        res = _residuals(h, src, dst)
        inliers = res <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            ratio = count / n
            if ratio >= 1.0:
                break
            denom = math.log(max(1.0 - ratio**4, 1e-12))
            needed = min(max_iters, int(math.ceil(math.log(1.0 - _RANSAC_CONFIDENCE) / denom)))

    if best_inliers is None or best_count < 4:
        raise DegenerateError("homography unavailable: no non-degenerate consensus found")

    refit = _dlt(src[best_inliers], dst[best_inliers])
    if abs(np.linalg.det(refit)) > _W_EPS:
        res = _residuals(refit, src, dst)
        final_inliers = res <= threshold
        if int(final_inliers.sum()) >= 4:
            best_inliers = final_inliers
            h = refit
        else:
            h = _dlt(src[best_inliers], dst[best_inliers])
    if abs(np.linalg.det(h)) < _W_EPS:
        raise DegenerateError("homography unavailable: estimate is singular")
    return Homography(matrix=h, inlier_count=int(best_inliers.sum()),
                      inlier_threshold=float(threshold))


def projected_residuals(matches: MatchSet, h: Homography, grid_to_pixel):
    """Per-match reprojection residuals in pixels, plus the count of
    keypoints dropped for projecting to infinity."""
    residuals = []
    at_infinity = 0
    for m in matches.matches:
        pa = grid_to_pixel(m.kp_a)
        pb = grid_to_pixel(m.kp_b)
        try:
            px, py = project(h, pa)
        except DegenerateError:
            at_infinity += 1
            continue
        residuals.append(math.hypot(px - pb[0], py - pb[1]))
    return residuals, at_infinity


def inverted_residual_mean(matches: MatchSet, h: Homography, grid_to_pixel) -> float:
    """Match count over the summed reprojection residuals (the reciprocal
    of the mean residual), computed over the unfiltered match set."""
    if len(matches) == 0:
        raise DegenerateError("metric undefined: empty match set")
    residuals, _ = projected_residuals(matches, h, grid_to_pixel)
    if not residuals:
        raise DegenerateError("metric undefined: every keypoint projected to infinity")
    total = float(sum(residuals))
    if total < 1e-9:
        return INVERTED_RESIDUAL_CLAMP
    return len(residuals) / total


def match_coverage(matched_a, matched_b, rel_a: RelevanceMap, rel_b: RelevanceMap) -> float:
    """Share of total relevance mass sitting at matched keypoints.

    Channel sums are clamped at zero before entering either side of the
    ratio, keeping the result in [0, 1].
    """
    sums_a = np.maximum(rel_a.cell_sums(), 0.0)
    sums_b = np.maximum(rel_b.cell_sums(), 0.0)
    if sums_a.shape != sums_b.shape:
        raise ContractError(f"relevance grids differ: {sums_a.shape} vs {sums_b.shape}")
    h, w = sums_a.shape

    def side(matched, sums):
        acc = 0.0
        for (i, j) in matched:
            if not (0 <= i < w and 0 <= j < h):
                raise ContractError(f"matched keypoint ({i}, {j}) outside the {w}x{h} grid")
            acc += float(sums[j, i])
        return acc

    numerator = side(matched_a, sums_a) + side(matched_b, sums_b)
    denominator = float(sums_a.sum()) + float(sums_b.sum())
    if denominator == 0.0:
        raise DegenerateError("metric undefined: zero total relevance")
    return numerator / denominator


def load_correspondences(path) -> dict[str, list]:
    """Load correspondence records from a JSON file or a directory of
    them, keyed by pair_id. Values are [((x, y), (x', y')), ...]."""
    p = Path(path)
    if p.is_dir():
        records = []
        for child in sorted(p.glob("*.json")):
            records.extend(_correspondence_records(child))
    elif p.is_file():
        records = _correspondence_records(p)
    else:
        raise InputError(f"correspondence path not found: {p}")
    table: dict[str, list] = {}
    for rec in records:
        table[rec["pair_id"]] = [((float(x), float(y)), (float(xp), float(yp)))
                                 for x, y, xp, yp in rec["points"]]
    return table


def _correspondence_records(path: Path) -> list[dict]:
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read correspondence file {path}: {exc}") from exc
    records = payload if isinstance(payload, list) else [payload]
    for rec in records:
        if not isinstance(rec, dict) or "pair_id" not in rec or "points" not in rec:
            raise InputError(f"correspondence record in {path} lacks pair_id/points")
    return records
