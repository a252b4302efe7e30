"""Dataset-level aggregation: pair selection, rank correlation, and the
binned Bhattacharyya separability statistic.

Pair selection mirrors the evaluation protocol: each query's top-k
gallery images by cosine similarity form the candidate pool, k starting
at 5 and doubling up to a cap of 20 until enough correct and incorrect
candidates exist, then a seeded uniform sample of the target size per
class. When the pool is exhausted everything available is returned and
a warning is logged.

The separability statistic windows cosine similarity to the overlap of
the two classes' middle 95%, splits it into 10 equal bins, skips bins
with fewer than 3 points of either class, and inside each bin compares
kernel density estimates of the two score distributions on a shared
256-point grid. Bin distances are sign-flipped when the correct-class
mean is below the incorrect-class mean and combined as a point-count
weighted mean.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateError, InputError

log = logging.getLogger(__name__)

BIN_COUNT = 10
KDE_GRID_POINTS = 256
MIN_BIN_CLASS_POINTS = 3
PERCENTILE_LOW = 2.5
PERCENTILE_HIGH = 97.5
LAYER_SELECT_SAMPLE = 500

SPLITS = ("query", "gallery", "train")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    identity: str
    split: str


@dataclass
class PairRecord:
    query_id: str
    gallery_id: str
    cosine_similarity: float
    is_correct: bool
    pairx_score: float | None = None
    layer_index: int = -1


@dataclass
class DatasetAggregate:
    rho_res: float | None
    delta_res: float | None
    rho_mc: float | None
    delta_mc: float | None
    n_correct: int
    n_incorrect: int
    bins_used: int  # bins contributing to the residual-metric delta
    layer_index: int


def image_id(path) -> str:
    return Path(path).stem


def load_manifest(path) -> list[ManifestEntry]:
    """JSON-lines manifest: {image_path, identity, split} per record.
    Image ids (path stems) must be unique across the manifest."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"manifest not found: {p}")
    entries = []
    seen: set[str] = set()
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"manifest line {lineno} is not valid JSON: {exc}") from exc
        try:
            entry = ManifestEntry(
                image_path=rec["image_path"],
                identity=str(rec["identity"]),
                split=rec["split"],
            )
        except KeyError as exc:
            raise InputError(f"manifest line {lineno} lacks field {exc}") from exc
        if entry.split not in SPLITS:
            raise InputError(f"manifest line {lineno} has unknown split {entry.split!r}")
        iid = image_id(entry.image_path)
        if iid in seen:
            raise InputError(f"duplicate image id {iid!r} in manifest (line {lineno})")
        seen.add(iid)
        entries.append(entry)
    return entries


def select_pairs(
    manifest: list[ManifestEntry],
    embeddings: dict[str, np.ndarray],
    k_init: int = 5,
    k_cap: int = 20,
    target: int = 1000,
    rng_seed: int = 0,
    query_split: str = "query",
    gallery_split: str = "gallery",
) -> list[PairRecord]:
    """Build the fixed evaluation pair set from top-k retrieval pools."""
    queries = [e for e in manifest if e.split == query_split]
    gallery = [e for e in manifest if e.split == gallery_split]
    if not gallery:
        raise ContractError(f"no {gallery_split!r} images in the manifest")
    if not queries:
        raise ContractError(f"no {query_split!r} images in the manifest")
    same_split = query_split == gallery_split
    if not same_split:
        overlap = {image_id(e.image_path) for e in queries} & {
            image_id(e.image_path) for e in gallery}
        if overlap:
            raise ContractError(f"query/gallery splits share image ids: {sorted(overlap)[:5]}")

    for e in queries + gallery:
        if image_id(e.image_path) not in embeddings:
            raise ContractError(f"no embedding for image {image_id(e.image_path)!r}")

    gal_ids = [image_id(e.image_path) for e in gallery]
    gal_identity = {image_id(e.image_path): e.identity for e in gallery}
    gmat = np.stack([_unit(embeddings[g]) for g in gal_ids])

    ranked: dict[str, list[tuple[str, float]]] = {}
    q_identity = {}
    for q in queries:
        qid = image_id(q.image_path)
        q_identity[qid] = q.identity
        sims = gmat @ _unit(embeddings[qid])
        order = sorted(range(len(gal_ids)), key=lambda k: (-sims[k], gal_ids[k]))
        if same_split:
            order = [k for k in order if gal_ids[k] != qid]
        ranked[qid] = [(gal_ids[k], float(sims[k])) for k in order]

    k = k_init
    while True:
        correct_pool: list[tuple[str, str, float]] = []
        incorrect_pool: list[tuple[str, str, float]] = []
        for qid in sorted(ranked):
            for gid, sim in ranked[qid][:k]:
                rec = (qid, gid, sim)
                if q_identity[qid] == gal_identity[gid]:
                    correct_pool.append(rec)
                else:
                    incorrect_pool.append(rec)
        if (len(correct_pool) >= target and len(incorrect_pool) >= target) or k >= k_cap:
            break
        k = min(k * 2, k_cap)

    rng = np.random.default_rng(rng_seed)
    out: list[PairRecord] = []
    for pool, is_correct in ((correct_pool, True), (incorrect_pool, False)):
        pool = sorted(pool)
        if len(pool) > target:
            idx = rng.choice(len(pool), size=target, replace=False)
            chosen = [pool[i] for i in sorted(idx)]
        else:
            chosen = pool
            if len(pool) < target:
                log.warning(
                    "only %d %s pairs available (target %d); using all of them",
                    len(pool), "correct" if is_correct else "incorrect", target,
                )
        out.extend(
            PairRecord(query_id=q, gallery_id=g, cosine_similarity=sim, is_correct=is_correct)
            for q, g, sim in chosen
        )
    return out


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateError("zero-norm embedding in pair selection")
    return v / n


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the mean of their ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys) -> float:
    """Pearson correlation of average-assigned ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"rank correlation needs equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ContractError("rank correlation needs at least 2 observations")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0:
        raise DegenerateError("rank correlation undefined: zero rank variance")
    return float((dx * dy).sum() / denom)


def bhattacharyya_distance(p: np.ndarray, n: np.ndarray) -> float:
    """-ln of the Bhattacharyya coefficient of two discrete densities."""
    coeff = float(np.sqrt(np.asarray(p, dtype=np.float64) * np.asarray(n, dtype=np.float64)).sum())
    coeff = min(coeff, 1.0)
    if coeff <= 0.0:
        return float("inf")
    return -float(np.log(coeff))


def kernel_density_on_grid(values, lo: float, hi: float,
                           grid_points: int = KDE_GRID_POINTS) -> np.ndarray:
    """Gaussian KDE sampled on a uniform grid over [lo, hi], renormalized
    to sum 1. Bandwidth is Scott's rule, n**(-1/5) times the sample
    standard deviation, floored when the sample is constant."""
    v = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.full(grid_points, 1.0 / grid_points)
    grid = np.linspace(lo, hi, grid_points)
    sigma = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    h = len(v) ** (-0.2) * sigma
    if h <= 0.0:
        h = max((hi - lo) * 1e-3, 1e-12)
    dens = np.exp(-0.5 * ((grid[:, None] - v[None, :]) / h) ** 2).sum(axis=1)
    total = dens.sum()
    if total <= 0.0:
        return np.full(grid_points, 1.0 / grid_points)
    return dens / total


def binned_bhattacharyya_detailed(correct, incorrect):
    """The separability statistic plus (bins_used, points_counted)."""
    corr = [(float(c), float(s)) for c, s in correct]
    incorr = [(float(c), float(s)) for c, s in incorrect]
    if not corr or not incorr:
        raise ContractError("separability needs nonempty correct and incorrect lists")
    corr_cos = np.array([c for c, _ in corr])
    incorr_cos = np.array([c for c, _ in incorr])
    left = max(np.percentile(corr_cos, PERCENTILE_LOW), np.percentile(incorr_cos, PERCENTILE_LOW))
    right = min(np.percentile(corr_cos, PERCENTILE_HIGH), np.percentile(incorr_cos, PERCENTILE_HIGH))
    if not right > left:
        raise DegenerateError("separability undefined: class similarity windows do not overlap")
    bin_size = (right - left) / BIN_COUNT

    weighted_sum = 0.0
    points_counted = 0
    bins_used = 0
    for b in range(BIN_COUNT):
        bin_start = left + b * bin_size
        bin_end = bin_start + bin_size
        corr_scores = np.array([s for c, s in corr if bin_start < c < bin_end])
        incorr_scores = np.array([s for c, s in incorr if bin_start < c < bin_end])
        if len(corr_scores) < MIN_BIN_CLASS_POINTS or len(incorr_scores) < MIN_BIN_CLASS_POINTS:
            continue
        score_max = max(corr_scores.max(), incorr_scores.max())
        score_min = min(corr_scores.min(), incorr_scores.min())
        p = kernel_density_on_grid(corr_scores, score_min, score_max)
        n = kernel_density_on_grid(incorr_scores, score_min, score_max)
        bd = bhattacharyya_distance(p, n)
        if corr_scores.mean() < incorr_scores.mean():
            bd = -bd
        count = len(corr_scores) + len(incorr_scores)
        weighted_sum += bd * count
        points_counted += count
        bins_used += 1
    if points_counted == 0:
        raise DegenerateError("separability undefined: every bin was skipped")
    return weighted_sum / points_counted, bins_used, points_counted


def binned_bhattacharyya(correct, incorrect) -> float:
    """Signed, cosine-binned, count-weighted Bhattacharyya separability of
    the two classes' score distributions."""
    value, _, _ = binned_bhattacharyya_detailed(correct, incorrect)
    return value


@dataclass(frozen=True)
class LayerSweepSample:
    """One pair's cosine similarity plus its score at every candidate tap."""

    cosine_similarity: float
    scores_by_layer: dict


def sweep_layer_rhos(model, samples) -> dict[int, float | None]:
    """Rank correlation between score and similarity, per tap point."""
    out: dict[int, float | None] = {}
    for tap in model.tap_points:
        xs, ys = [], []
        for s in samples:
            score = s.scores_by_layer.get(tap)
            if score is None:
                continue
            xs.append(s.cosine_similarity)
            ys.append(score)
        if len(xs) < 2:
            out[tap] = None
            continue
        try:
            out[tap] = spearman_rho(xs, ys)
        except DegenerateError:
            out[tap] = None
    return out


def select_layer(model, train_pairs_sample) -> int:
    """The tap whose scores correlate best with similarity; ties go to the
    shallower layer. A single-tap model returns that tap."""
    taps = model.tap_points
    if not taps:
        raise ContractError("layer selection needs at least one tap point")
    if len(taps) == 1:
        return taps[0]
    rhos = sweep_layer_rhos(model, train_pairs_sample)
    best_tap = None
    best_rho = None
    for tap in sorted(taps):
        rho = rhos.get(tap)
        if rho is None:
            continue
        if best_rho is None or rho > best_rho:
            best_tap, best_rho = tap, rho
    if best_tap is None:
        raise DegenerateError("layer selection failed: correlation undefined at every tap")
    return best_tap
