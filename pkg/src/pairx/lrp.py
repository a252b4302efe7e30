"""Layer-wise relevance propagation with the EpsilonPlus rule composite.

Rules, applied per layer kind when walking the chain backwards:

* linear: Epsilon rule. Denominators are the forward pre-activations
  (bias included) with ``EPSILON`` added sign-preservingly, so the bias
  absorbs its share of relevance and near-zero denominators stay tame.
* conv2d: ZPlus rule. Only positive kernel weights contribute, no bias;
  output cells whose positive pre-activation is exactly zero distribute
  nothing.
* maxpool2d: winner take all; ties go to the first cell in row-major
  window order.
* avgpool2d / global-avg-pool: uniform split across the window.
* relu: relevance passes through unchanged.
* flatten: reshape.

Two entry points: a full backward pass from a cosine-similarity seed at
the embedding down to a tapped layer, and a partial backward pass from
a spatially masked tapped activation down to the input pixels.

Propagation runs in float64 and results are rounded to float32 on
return. Everything here is a pure function of immutable inputs, so
concurrent calls (one per match, typically) are safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateError
from .runtime import ForwardTrace, ModelGraph
from .tensor import LayerSpec

EPSILON = 1e-6


@dataclass(frozen=True)
class RelevanceMap:
    """Relevance at a tapped layer, same (c, h, w) shape as the activation."""

    layer_index: int
    values: np.ndarray

    def cell_sums(self) -> np.ndarray:
        """Channel-summed relevance per grid cell, shape (h, w)."""
        return self.values.astype(np.float64).sum(axis=0)


@dataclass(frozen=True)
class PixelRelevance:
    """Input-shaped relevance for one backpropagated match."""

    match_id: int
    values: np.ndarray

    def heatmap(self) -> np.ndarray:
        """Channel-summed 2-D heatmap at input resolution."""
        return self.values.astype(np.float64).sum(axis=0)


def seed_relevance_from_cosine(trace_a: ForwardTrace, trace_b: ForwardTrace):
    """Per-dimension relevance seeds whose sum equals the cosine similarity.

    Each embedding dimension i receives the product of the two unit
    normalized embeddings at i; the partner embedding acts as fixed
    context, so both images share the same seed vector.
    """
    ea = trace_a.embedding.astype(np.float64)
    eb = trace_b.embedding.astype(np.float64)
    if ea.shape != eb.shape:
        raise ContractError(f"embedding length mismatch: {ea.shape} vs {eb.shape}")
    na = np.sqrt(np.dot(ea, ea))
    nb = np.sqrt(np.dot(eb, eb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateError("relevance seed undefined for a zero-norm embedding")
    seed = ((ea / na) * (eb / nb)).astype(np.float32)
    return seed, seed.copy()


def _conv_f64(x64: np.ndarray, w64: np.ndarray, stride: int, padding: int) -> np.ndarray:
    cin, h, wid = x64.shape
    oc, _, kh, kw = w64.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.zeros((cin, h + 2 * padding, wid + 2 * padding), dtype=np.float64)
        xp[:, padding : padding + h, padding : padding + wid] = x64
    else:
        xp = x64
    acc = np.zeros((oc, oh, ow), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            for c in range(cin):
                acc += w64[:, c, ky, kx][:, None, None] * xp[
                    c, ky : ky + (oh - 1) * stride + 1 : stride,
                    kx : kx + (ow - 1) * stride + 1 : stride]
    return acc


def _conv_zplus_backward(model, layer: LayerSpec, a_in: np.ndarray, rel: np.ndarray) -> np.ndarray:
    w = model.weights[layer.weight].astype(np.float64)
    wp = np.maximum(w, 0.0)
    a64 = a_in.astype(np.float64)
    s, p = layer.stride, layer.padding
    z = _conv_f64(a64, wp, s, p)
    factor = np.divide(rel, z, out=np.zeros_like(rel), where=z != 0.0)

    cin, h, wid = a_in.shape
    _, _, kh, kw = w.shape
    oh, ow = z.shape[1:]
    grad = np.zeros((cin, h + 2 * p, wid + 2 * p), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            for c in range(cin):
                grad[c, ky : ky + (oh - 1) * s + 1 : s,
                     kx : kx + (ow - 1) * s + 1 : s] += np.tensordot(
                    wp[:, c, ky, kx], factor, axes=(0, 0))
    if p:
        grad = grad[:, p : p + h, p : p + wid]
    return a64 * grad


def _linear_epsilon_backward(model, layer: LayerSpec, a_in: np.ndarray, rel: np.ndarray) -> np.ndarray:
    w = model.weights[layer.weight].astype(np.float64)
    a64 = a_in.astype(np.float64)
    z = w @ a64
    if layer.bias:
        z = z + model.weights[layer.bias].astype(np.float64)
    z = z + EPSILON * np.where(z >= 0.0, 1.0, -1.0)
    factor = rel / z
    return a64 * (w.T @ factor)


def _maxpool_backward(layer: LayerSpec, a_in: np.ndarray, rel: np.ndarray) -> np.ndarray:
    k, s = layer.kernel, layer.stride
    c, h, w = a_in.shape
    oh, ow = rel.shape[1:]
    a64 = a_in.astype(np.float64)
    best = None
    best_idx = None
    for idx in range(k * k):
        ky, kx = divmod(idx, k)
        win = a64[:, ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s]
        if best is None:
            best = win.copy()
            best_idx = np.zeros((c, oh, ow), dtype=np.int64)
        else:
            better = win > best  # strict: ties stay with the earlier row-major cell
            best = np.where(better, win, best)
            best_idx = np.where(better, idx, best_idx)
    grad = np.zeros((c, h, w), dtype=np.float64)
    for idx in range(k * k):
        ky, kx = divmod(idx, k)
        grad[:, ky : ky + (oh - 1) * s + 1 : s,
             kx : kx + (ow - 1) * s + 1 : s] += np.where(best_idx == idx, rel, 0.0)
    return grad


def _avgpool_backward(layer: LayerSpec, a_in: np.ndarray, rel: np.ndarray) -> np.ndarray:
    k, s = layer.kernel, layer.stride
    c, h, w = a_in.shape
    oh, ow = rel.shape[1:]
    share = rel / (k * k)
    grad = np.zeros((c, h, w), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            grad[:, ky : ky + (oh - 1) * s + 1 : s,
                 kx : kx + (ow - 1) * s + 1 : s] += share
    return grad


def _layer_backward(model: ModelGraph, idx: int, a_in: np.ndarray, rel: np.ndarray) -> np.ndarray:
    layer = model.layers[idx]
    kind = layer.kind
    if kind == "relu":
        return rel
    if kind == "flatten":
        return rel.reshape(a_in.shape)
    if kind == "conv2d":
        return _conv_zplus_backward(model, layer, a_in, rel)
    if kind == "linear":
        return _linear_epsilon_backward(model, layer, a_in, rel)
    if kind == "maxpool2d":
        return _maxpool_backward(layer, a_in, rel)
    if kind == "avgpool2d":
        return _avgpool_backward(layer, a_in, rel)
    if kind == "global-avg-pool":
        c, h, w = a_in.shape
        return np.broadcast_to((rel / (h * w))[:, None, None], (c, h, w)).copy()
    raise ContractError(f"layer {idx} ({kind}) is not supported by relevance backprop")


def _run_backward(model: ModelGraph, trace: ForwardTrace, rel: np.ndarray,
                  from_layer: int, stop_layer: int) -> np.ndarray:
    for idx in range(from_layer, stop_layer, -1):
        a_in = trace.layer_outputs[idx - 1] if idx > 0 else trace.input
        rel = _layer_backward(model, idx, a_in, rel)
    return rel


def lrp_backward(model: ModelGraph, trace: ForwardTrace, seed: np.ndarray,
                 stop_layer: int) -> RelevanceMap:
    """Propagate an embedding-shaped seed back to a tapped layer.

    ``stop_layer`` is normally a tap point; -1 propagates all the way to
    the model input (used by the conservation checks).
    """
    seed64 = np.asarray(seed, dtype=np.float64)
    if seed64.shape != trace.embedding.shape:
        raise ContractError(
            f"seed shape {seed64.shape} does not match embedding shape {trace.embedding.shape}"
        )
    if stop_layer != -1 and stop_layer not in model.tap_points:
        raise ContractError(f"stop layer {stop_layer} is not a declared tap point")
    rel = _run_backward(model, trace, seed64, model.embedding_index, stop_layer)
    return RelevanceMap(layer_index=stop_layer, values=rel.astype(np.float32))


def masked_pixel_backprop(model: ModelGraph, trace: ForwardTrace, layer: int,
                          keypoint: tuple[int, int], match_id: int = -1) -> PixelRelevance:
    """Backpropagate one grid cell's activation vector to input pixels.

    The seed is the tapped activation with every spatial position except
    ``keypoint`` = (i, j) = (column, row) zeroed; all channels at the
    keypoint are retained.
    """
    if layer not in trace.activations:
        raise ContractError(f"layer {layer} was not tapped in this trace")
    act = trace.activations[layer]
    i, j = keypoint
    _, h, w = act.shape
    if not (0 <= i < w and 0 <= j < h):
        raise ContractError(f"keypoint {keypoint} outside the {w}x{h} activation grid")
    seed = np.zeros(act.shape, dtype=np.float64)
    seed[:, j, i] = act[:, j, i]
    rel = _run_backward(model, trace, seed, layer, -1)
    return PixelRelevance(match_id=match_id, values=rel.astype(np.float32))
