"""End-to-end orchestration shared by the CLI commands: single-pair
explanation, dataset evaluation, and the tap-layer sweep.

Per-pair work is a pure function of the cached forward traces, so
evaluation fans out across a thread pool and reduces in sorted pair
order; results are bitwise independent of the thread count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractError, DegenerateError, InputError
from .geometry import (
    RESIDUAL_UNITS,
    INVERTED_RESIDUAL_CLAMP,
    estimate_homography,
    grid_to_pixel_map,
    inverted_residual_mean,
    load_correspondences,
    match_coverage,
)
from .lrp import lrp_backward, masked_pixel_backprop, seed_relevance_from_cosine
from .matching import decompose, mutual_match, score_matches, top_n
from .pngio import read_png
from .render import compose_explanation
from .runtime import (
    ForwardTrace,
    ModelGraph,
    cosine_similarity,
    cumulative_stride_of,
    forward,
    load_model,
    resize_bilinear,
)
from .stats import (
    DatasetAggregate,
    LayerSweepSample,
    ManifestEntry,
    PairRecord,
    binned_bhattacharyya_detailed,
    image_id,
    load_manifest,
    select_layer,
    select_pairs,
    spearman_rho,
    sweep_layer_rhos,
)
from .synth import make_pair_id


def default_thread_count() -> int:
    return os.cpu_count() or 1


@dataclass
class RunConfig:
    """Effective configuration for one command invocation."""

    model_path: str = ""
    layer: int | str = "auto"
    n_matches: int = 20
    correspondence_path: str | None = None
    manifest_path: str | None = None
    output_dir: str = "out"
    rng_seed: int = 0
    thread_count: int = field(default_factory=default_thread_count)
    ransac_threshold: float = 2.0
    ransac_max_iters: int = 2000
    pair_target: int = 1000
    k_init: int = 5
    k_cap: int = 20

    def validate(self) -> None:
        if self.n_matches < 1:
            raise ContractError(f"n_matches must be >= 1, got {self.n_matches}")
        if self.layer != "auto" and not isinstance(self.layer, int):
            raise ContractError(f"layer must be a tap index or 'auto', got {self.layer!r}")
        if self.thread_count < 1:
            raise ContractError(f"thread count must be >= 1, got {self.thread_count}")

    def echo(self, resolved_layer: int | None = None) -> dict:
        """Config as recorded in reports. Execution-only knobs (threads,
        output directory) are excluded so outputs stay byte-identical
        across thread counts."""
        return {
            "model": self.model_path,
            "manifest": self.manifest_path,
            "correspondences": self.correspondence_path,
            "layer_requested": self.layer,
            "layer": resolved_layer if resolved_layer is not None else self.layer,
            "n_matches": self.n_matches,
            "rng_seed": self.rng_seed,
            "ransac": {
                "threshold_px": self.ransac_threshold,
                "max_iters": self.ransac_max_iters,
            },
            "pair_selection": {
                "k_init": self.k_init,
                "k_cap": self.k_cap,
                "target": self.pair_target,
            },
            "metric_clamp": INVERTED_RESIDUAL_CLAMP,
            "residual_units": RESIDUAL_UNITS,
        }


@dataclass
class LoadedImage:
    image_id: str
    display: np.ndarray  # (h, w, 3) uint8 at model input resolution
    normalized: np.ndarray  # (c, h, w) float32 after mean/std
    original_size: tuple[int, int]  # (height, width) before resize


def load_image_for_model(model: ModelGraph, path) -> LoadedImage:
    rgb = read_png(path)
    orig = rgb.shape[:2]
    _, in_h, in_w = model.input_spec
    scaled = resize_bilinear(rgb.astype(np.float32) / np.float32(255.0), in_h, in_w)
    display = np.rint(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)
    chw = np.ascontiguousarray(scaled.transpose(2, 0, 1))
    normalized = (chw - model.norm_mean[:, None, None]) / model.norm_std[:, None, None]
    return LoadedImage(image_id=image_id(path), display=display,
                       normalized=normalized, original_size=orig)


def _rescale_points(points, orig_size, model_size):
    """Original-image pixel coordinates to model-input coordinates,
    matching the corner-aligned resize."""
    oh, ow = orig_size
    mh, mw = model_size
    sx = (mw - 1) / (ow - 1) if ow > 1 else 1.0
    sy = (mh - 1) / (oh - 1) if oh > 1 else 1.0
    return [(x * sx, y * sy) for x, y in points]


@dataclass
class SlimTrace:
    """A forward trace trimmed for evaluation: only outputs at and above
    the shallowest tap are retained (pixel backprop is not needed)."""

    input: None
    activations: dict[int, np.ndarray]
    embedding: np.ndarray
    layer_outputs: list


def slim_trace(trace: ForwardTrace, min_keep: int) -> SlimTrace:
    outputs = [out if idx >= min_keep else None
               for idx, out in enumerate(trace.layer_outputs)]
    return SlimTrace(input=None, activations=dict(trace.activations),
                     embedding=trace.embedding, layer_outputs=outputs)


def resolve_layer(model: ModelGraph, config: RunConfig, manifest=None,
                  correspondences=None, traces=None) -> int:
    """A concrete tap index for this run. 'auto' selects by sweeping the
    train split, which therefore must exist."""
    if config.layer != "auto":
        layer = int(config.layer)
        if layer not in model.tap_points:
            raise ContractError(
                f"layer {layer} is not a declared tap point {list(model.tap_points)}"
            )
        return layer
    if manifest is None or not any(e.split == "train" for e in manifest):
        raise ContractError("layer auto-selection requires train pairs")
    samples = _layer_sweep_samples(model, config, manifest, correspondences, traces)
    return select_layer(model, samples)


# ---------------------------------------------------------------------------
# Single-pair explanation
# ---------------------------------------------------------------------------


@dataclass
class ExplainResult:
    png_bytes: bytes
    sidecar: dict
    cosine: float
    n_matches: int


def explain_pair(model: ModelGraph, image_a_path, image_b_path,
                 config: RunConfig, layer: int | None = None) -> ExplainResult:
    """Forward both images, filter matches by relevance, backpropagate
    the keepers to pixels, and render the composite figure."""
    config.validate()
    img_a = load_image_for_model(model, image_a_path)
    img_b = load_image_for_model(model, image_b_path)
    trace_a = forward(model, img_a.normalized)
    trace_b = forward(model, img_b.normalized)
    cos = cosine_similarity(trace_a.embedding, trace_b.embedding)
    if layer is None:
        layer = resolve_layer(model, config)

    seed_a, seed_b = seed_relevance_from_cosine(trace_a, trace_b)
    rel_a = lrp_backward(model, trace_a, seed_a, layer)
    rel_b = lrp_backward(model, trace_b, seed_b, layer)

    kd_a = decompose(trace_a.activations[layer], layer_index=layer)
    kd_b = decompose(trace_b.activations[layer], layer_index=layer)
    matches = mutual_match(kd_a, kd_b)
    scored = score_matches(matches, rel_a, rel_b)
    kept = top_n(scored, config.n_matches)

    heatmaps_a, heatmaps_b = [], []
    for rank, m in enumerate(kept.matches):
        heatmaps_a.append(masked_pixel_backprop(model, trace_a, layer, m.kp_a, match_id=rank))
        heatmaps_b.append(masked_pixel_backprop(model, trace_b, layer, m.kp_b, match_id=rank))

    stride = cumulative_stride_of(model.layers, layer)
    to_pixel = grid_to_pixel_map(stride)
    canvas = compose_explanation(img_a.display, img_b.display, kept,
                                 heatmaps_a, heatmaps_b, to_pixel)

    sidecar = {
        "engine_version": __version__,
        "image_a": img_a.image_id,
        "image_b": img_b.image_id,
        "cosine_similarity": cos,
        "layer_index": layer,
        "grid_stride": stride,
        "n_matches_total": len(matches),
        "n_matches_kept": len(kept),
        "matches": [
            {
                "rank": rank,
                "kp_a": list(m.kp_a),
                "kp_b": list(m.kp_b),
                "pixel_a": list(to_pixel(m.kp_a)),
                "pixel_b": list(to_pixel(m.kp_b)),
                "descriptor_distance": m.descriptor_distance,
                "relevance": m.relevance,
            }
            for rank, m in enumerate(kept.matches)
        ],
        "config": config.echo(resolved_layer=layer),
    }
    return ExplainResult(png_bytes=canvas.to_png(), sidecar=sidecar, cosine=cos,
                         n_matches=len(kept))


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------


def _forward_split(model: ModelGraph, manifest, splits, thread_count: int):
    """Forward every image in the given splits once; traces are slimmed
    to what per-pair metric computation needs."""
    entries = [e for e in manifest if e.split in splits]
    min_keep = min(model.tap_points) if model.tap_points else 0

    def work(entry: ManifestEntry):
        img = load_image_for_model(model, entry.image_path)
        trace = forward(model, img.normalized)
        return img.image_id, slim_trace(trace, min_keep), img.original_size

    results = {}
    sizes = {}
    if thread_count > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=thread_count) as pool:
            for iid, trace, size in pool.map(work, entries):
                results[iid] = trace
                sizes[iid] = size
    else:
        for entry in entries:
            iid, trace, size = work(entry)
            results[iid] = trace
            sizes[iid] = size
    return results, sizes


@dataclass
class PairOutcome:
    record: PairRecord
    s1: float | None
    coverage: float | None
    n_matches: int
    n_at_infinity: int
    s1_missing_reason: str | None = None


def _pair_metrics(model, layer, trace_a, trace_b, corr_points, sizes, config,
                  decomp_cache) -> tuple:
    """All per-pair quantities at one tap layer."""
    seed_a, seed_b = seed_relevance_from_cosine(trace_a, trace_b)
    rel_a = lrp_backward(model, trace_a, seed_a, layer)
    rel_b = lrp_backward(model, trace_b, seed_b, layer)
    kd_a, kd_b = decomp_cache[0], decomp_cache[1]
    matches = mutual_match(kd_a, kd_b)

    stride = cumulative_stride_of(model.layers, layer)
    to_pixel = grid_to_pixel_map(stride)
    in_size = model.input_spec[1:]

    s1 = None
    reason = None
    if corr_points is None:
        reason = "no correspondences"
    else:
        try:
            src = _rescale_points([p for p, _ in corr_points], sizes[0], in_size)
            dst = _rescale_points([q for _, q in corr_points], sizes[1], in_size)
            hom = estimate_homography(list(zip(src, dst)), config.ransac_threshold,
                                      config.ransac_max_iters, config.rng_seed)
            s1 = inverted_residual_mean(matches, hom, to_pixel)
        except DegenerateError as exc:
            reason = str(exc)

    try:
        cov = match_coverage([m.kp_a for m in matches.matches],
                             [m.kp_b for m in matches.matches], rel_a, rel_b)
    except DegenerateError:
        cov = None
    return s1, cov, len(matches), reason


def evaluate_dataset(model: ModelGraph, config: RunConfig) -> dict:
    """Pair selection, per-pair metrics, and the dataset aggregate, as
    one JSON-ready report."""
    config.validate()
    if not config.manifest_path:
        raise ContractError("evaluation requires a manifest")
    manifest = load_manifest(config.manifest_path)
    corr_table = (load_correspondences(config.correspondence_path)
                  if config.correspondence_path else {})

    need_train = config.layer == "auto"
    splits = {"query", "gallery"} | ({"train"} if need_train else set())
    traces, sizes = _forward_split(model, manifest, splits, config.thread_count)
    embeddings = {iid: t.embedding for iid, t in traces.items()}

    layer = resolve_layer(model, config, manifest, corr_table, (traces, sizes))
    records = select_pairs(
        manifest, embeddings, k_init=config.k_init, k_cap=config.k_cap,
        target=config.pair_target, rng_seed=config.rng_seed,
    )
    for rec in records:
        rec.layer_index = layer

    decomp = {iid: decompose(traces[iid].activations[layer], layer_index=layer)
              for iid in traces}

    def work(idx_rec):
        idx, rec = idx_rec
        pid = make_pair_id(rec.query_id, rec.gallery_id)
        s1, cov, n_matches, reason = _pair_metrics(
            model, layer, traces[rec.query_id], traces[rec.gallery_id],
            corr_table.get(pid), (sizes[rec.query_id], sizes[rec.gallery_id]),
            config, (decomp[rec.query_id], decomp[rec.gallery_id]),
        )
        return idx, PairOutcome(record=rec, s1=s1, coverage=cov,
                                n_matches=n_matches, n_at_infinity=0,
                                s1_missing_reason=reason)

    indexed = list(enumerate(records))
    outcomes: list[PairOutcome | None] = [None] * len(records)
    if config.thread_count > 1 and len(indexed) > 1:
        with ThreadPoolExecutor(max_workers=config.thread_count) as pool:
            for idx, outcome in pool.map(work, indexed):
                outcomes[idx] = outcome
    else:
        for item in indexed:
            idx, outcome = work(item)
            outcomes[idx] = outcome

    aggregate = _aggregate(outcomes, layer)
    pair_rows = [
        {
            "pair_id": make_pair_id(o.record.query_id, o.record.gallery_id),
            "query_id": o.record.query_id,
            "gallery_id": o.record.gallery_id,
            "cosine_similarity": o.record.cosine_similarity,
            "is_correct": o.record.is_correct,
            "inverted_residual_mean": o.s1,
            "match_coverage": o.coverage,
            "num_matches": o.n_matches,
            "s1_missing_reason": o.s1_missing_reason,
        }
        for o in sorted(outcomes, key=lambda o: (o.record.query_id, o.record.gallery_id))
    ]
    return {
        "engine_version": __version__,
        "config": config.echo(resolved_layer=layer),
        "aggregate": {
            "rho_res": aggregate.rho_res,
            "delta_res": aggregate.delta_res,
            "rho_mc": aggregate.rho_mc,
            "delta_mc": aggregate.delta_mc,
            "n_correct": aggregate.n_correct,
            "n_incorrect": aggregate.n_incorrect,
            "bins_used": aggregate.bins_used,
            "layer_index": aggregate.layer_index,
        },
        "missing": {
            "inverted_residual_mean": sum(1 for o in outcomes if o.s1 is None),
            "match_coverage": sum(1 for o in outcomes if o.coverage is None),
        },
        "pairs": pair_rows,
    }


def _aggregate(outcomes: list[PairOutcome], layer: int) -> DatasetAggregate:
    def rho(score_of):
        xs, ys = [], []
        for o in outcomes:
            s = score_of(o)
            if s is None:
                continue
            xs.append(o.record.cosine_similarity)
            ys.append(s)
        try:
            return spearman_rho(xs, ys) if len(xs) >= 2 else None
        except DegenerateError:
            return None

    def delta(score_of):
        correct, incorrect = [], []
        for o in outcomes:
            s = score_of(o)
            if s is None:
                continue
            (correct if o.record.is_correct else incorrect).append(
                (o.record.cosine_similarity, s))
        if not correct or not incorrect:
            return None, 0
        try:
            value, bins, _ = binned_bhattacharyya_detailed(correct, incorrect)
            return value, bins
        except DegenerateError:
            return None, 0

    delta_res, bins_res = delta(lambda o: o.s1)
    delta_mc, _ = delta(lambda o: o.coverage)
    return DatasetAggregate(
        rho_res=rho(lambda o: o.s1),
        delta_res=delta_res,
        rho_mc=rho(lambda o: o.coverage),
        delta_mc=delta_mc,
        n_correct=sum(1 for o in outcomes if o.record.is_correct),
        n_incorrect=sum(1 for o in outcomes if not o.record.is_correct),
        bins_used=bins_res,
        layer_index=layer,
    )


# ---------------------------------------------------------------------------
# Layer sweep
# ---------------------------------------------------------------------------


def _layer_sweep_samples(model, config: RunConfig, manifest, corr_table, traces_and_sizes=None):
    """Per-pair cosine and S1 at every tap, over a train/train sample."""
    if corr_table is None:
        corr_table = {}
    if traces_and_sizes is None:
        traces, sizes = _forward_split(model, manifest, {"train"}, config.thread_count)
    else:
        traces, sizes = traces_and_sizes
    train_ids = {image_id(e.image_path) for e in manifest if e.split == "train"}
    if not train_ids:
        raise ContractError("layer auto-selection requires train pairs")
    per_class = max(1, 500 // 2)
    records = select_pairs(
        manifest, {iid: traces[iid].embedding for iid in traces if iid in train_ids},
        k_init=config.k_init, k_cap=config.k_cap, target=per_class,
        rng_seed=config.rng_seed, query_split="train", gallery_split="train",
    )
    decomp = {
        tap: {iid: decompose(traces[iid].activations[tap], layer_index=tap)
              for iid in train_ids}
        for tap in model.tap_points
    }
    in_size = model.input_spec[1:]

    def work(rec: PairRecord):
        pid = make_pair_id(rec.query_id, rec.gallery_id)
        points = corr_table.get(pid)
        hom = None
        if points is not None:
            try:
                src = _rescale_points([p for p, _ in points], sizes[rec.query_id], in_size)
                dst = _rescale_points([q for _, q in points], sizes[rec.gallery_id], in_size)
                hom = estimate_homography(list(zip(src, dst)), config.ransac_threshold,
                                          config.ransac_max_iters, config.rng_seed)
            except DegenerateError:
                hom = None
        scores = {}
        for tap in model.tap_points:
            if hom is None:
                scores[tap] = None
                continue
            matches = mutual_match(decomp[tap][rec.query_id], decomp[tap][rec.gallery_id])
            stride = cumulative_stride_of(model.layers, tap)
            try:
                scores[tap] = inverted_residual_mean(matches, hom, grid_to_pixel_map(stride))
            except DegenerateError:
                scores[tap] = None
        return LayerSweepSample(cosine_similarity=rec.cosine_similarity,
                                scores_by_layer=scores)

    if config.thread_count > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=config.thread_count) as pool:
            samples = list(pool.map(work, records))
    else:
        samples = [work(r) for r in records]
    return samples


def sweep_layers(model: ModelGraph, config: RunConfig) -> dict:
    """Rank correlation of the residual metric per tap; argmax marked."""
    config.validate()
    if not config.manifest_path:
        raise ContractError("layer sweep requires a manifest")
    if len(model.tap_points) < 2:
        raise ContractError("layer sweep needs at least 2 tap points")
    manifest = load_manifest(config.manifest_path)
    if not any(e.split == "train" for e in manifest):
        raise ContractError("layer auto-selection requires train pairs")
    corr_table = (load_correspondences(config.correspondence_path)
                  if config.correspondence_path else {})
    samples = _layer_sweep_samples(model, config, manifest, corr_table)
    rhos = sweep_layer_rhos(model, samples)
    best = select_layer(model, samples)
    rows = []
    for tap in sorted(model.tap_points):
        n = sum(1 for s in samples if s.scores_by_layer.get(tap) is not None)
        rows.append({
            "layer": tap,
            "rho_res": rhos.get(tap),
            "n_pairs": n,
            "selected": tap == best,
        })
    return {
        "engine_version": __version__,
        "config": config.echo(resolved_layer=best),
        "rows": rows,
    }


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def dump_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def open_model(path) -> ModelGraph:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model container not found: {p}")
    return load_model(p)
