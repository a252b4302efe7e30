"""Keypoint/descriptor decomposition of tapped activations and
cross-checked mutual nearest-neighbour matching.

A tapped (c, h, w) activation becomes one keypoint per grid cell with
its channel vector as descriptor. Keypoints are (i, j) = (column, row),
fixed project-wide. Matching is brute force under L2 distance; a pair
is kept only when each side is the other's nearest neighbour, so the
result is one-to-one. Match relevance is the product of the two
endpoints' channel-summed relevances; sign is preserved, negative
products simply rank low.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .lrp import RelevanceMap

DESCRIPTOR_METRIC = "l2"  # config hook; cosine distance may join later


@dataclass(frozen=True)
class KeypointDescriptorSet:
    """Full-grid keypoints with index-aligned descriptors, (n, c) float32."""

    layer_index: int
    keypoints: tuple[tuple[int, int], ...]
    descriptors: np.ndarray
    grid_shape: tuple[int, int]  # (h, w)


@dataclass(frozen=True)
class Match:
    kp_a: tuple[int, int]
    kp_b: tuple[int, int]
    descriptor_distance: float
    relevance: float = 0.0


@dataclass(frozen=True)
class MatchSet:
    layer_index: int
    matches: tuple[Match, ...]

    def __len__(self) -> int:
        return len(self.matches)


def decompose(activation: np.ndarray, layer_index: int = -1) -> KeypointDescriptorSet:
    """One descriptor per spatial cell of a rank-3 activation."""
    act = np.asarray(activation)
    if act.ndim != 3:
        raise ContractError(f"decompose expects a rank-3 activation, got shape {act.shape}")
    c, h, w = act.shape
    keypoints = tuple((i, j) for j in range(h) for i in range(w))
    descriptors = np.ascontiguousarray(
        act.transpose(1, 2, 0).reshape(h * w, c), dtype=np.float32
    )
    return KeypointDescriptorSet(layer_index=layer_index, keypoints=keypoints,
                                 descriptors=descriptors, grid_shape=(h, w))


def _distance_table(da: np.ndarray, db: np.ndarray, block: int = 256) -> np.ndarray:
    """Exact pairwise L2 distances in float64, blocked over rows."""
    na = da.shape[0]
    out = np.empty((na, db.shape[0]), dtype=np.float64)
    a64 = da.astype(np.float64)
    b64 = db.astype(np.float64)
    for start in range(0, na, block):
        stop = min(start + block, na)
        diff = a64[start:stop, None, :] - b64[None, :, :]
        out[start:stop] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def mutual_match(set_a: KeypointDescriptorSet, set_b: KeypointDescriptorSet) -> MatchSet:
    """Brute-force matching with cross-checking: keep (x, y) only when x
    is y's nearest neighbour and vice versa."""
    if set_a.descriptors.shape[1] != set_b.descriptors.shape[1]:
        raise ContractError(
            f"descriptor length mismatch: {set_a.descriptors.shape[1]} vs {set_b.descriptors.shape[1]}"
        )
    dist = _distance_table(set_a.descriptors, set_b.descriptors)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    matches = []
    for ia, ib in enumerate(nn_ab):
        if nn_ba[ib] == ia:
            matches.append(Match(
                kp_a=set_a.keypoints[ia],
                kp_b=set_b.keypoints[int(ib)],
                descriptor_distance=float(dist[ia, ib]),
            ))
    layer = set_a.layer_index if set_a.layer_index >= 0 else set_b.layer_index
    return MatchSet(layer_index=layer, matches=tuple(matches))


def score_matches(matches: MatchSet, rel_a: RelevanceMap, rel_b: RelevanceMap) -> MatchSet:
    """Attach each match the product of its endpoints' channel-summed
    relevances."""
    sums_a = rel_a.cell_sums()
    sums_b = rel_b.cell_sums()
    if sums_a.shape != sums_b.shape:
        raise ContractError(f"relevance grids differ: {sums_a.shape} vs {sums_b.shape}")
    h, w = sums_a.shape
    scored = []
    for m in matches.matches:
        (i1, j1), (i2, j2) = m.kp_a, m.kp_b
        if not (0 <= i1 < w and 0 <= j1 < h and 0 <= i2 < w and 0 <= j2 < h):
            raise ContractError(
                f"match {m.kp_a}->{m.kp_b} lies outside the {w}x{h} relevance grid"
            )
        scored.append(replace(m, relevance=float(sums_a[j1, i1] * sums_b[j2, i2])))
    return MatchSet(layer_index=matches.layer_index, matches=tuple(scored))


def top_n(matches: MatchSet, n: int) -> MatchSet:
    """The n largest-relevance matches, descending. Ties break by smaller
    descriptor distance, then row-major kp_a order."""
    if n < 1:
        raise ContractError(f"top_n requires n >= 1, got {n}")
    ordered = sorted(
        matches.matches,
        key=lambda m: (-m.relevance, m.descriptor_distance, m.kp_a[1], m.kp_a[0]),
    )
    return MatchSet(layer_index=matches.layer_index, matches=tuple(ordered[:n]))
