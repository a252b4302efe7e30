"""Model loading, forward execution with activation taps, and embedding
similarity.

Models are sequential chains of the layer kinds in :mod:`pairx.tensor`,
stored channels-first. Tap points record post-activation outputs of
intermediate layers (the choice is written into the container header as
``tap_mode``). A forward pass returns a trace holding the tapped
activations, the embedding, and the normalized input, which later feeds
the relevance backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import pngio
from .container import read_container, write_container
from .errors import ContainerError, ContractError, DegenerateError
from .tensor import (
    LayerSpec,
    as_tensor,
    conv2d_forward,
    flatten_forward,
    global_avg_pool_forward,
    linear_forward,
    pool_forward,
    relu_forward,
)

LAYOUT = "channels_first"
TAP_MODE = "post_activation"


@dataclass(frozen=True)
class ModelGraph:
    """An ordered layer chain with tap points and a designated embedding."""

    layers: tuple[LayerSpec, ...]
    tap_points: tuple[int, ...]
    embedding_index: int
    input_spec: tuple[int, int, int]  # (channels, height, width)
    norm_mean: np.ndarray
    norm_std: np.ndarray
    weights: dict[str, np.ndarray]
    layer_shapes: tuple[tuple[int, ...], ...] = field(default=())

    def tensor(self, name: str) -> np.ndarray:
        return self.weights[name]


@dataclass
class ForwardTrace:
    """Everything recorded during one forward pass."""

    input: np.ndarray
    activations: dict[int, np.ndarray]
    embedding: np.ndarray
    layer_outputs: list[np.ndarray]  # every layer's output; relevance backprop needs them


def build_model(
    layers,
    weights: dict[str, np.ndarray],
    input_spec,
    norm_mean,
    norm_std,
    tap_points,
    embedding_index: int,
) -> ModelGraph:
    """Assemble and validate an in-memory model."""
    model = ModelGraph(
        layers=tuple(layers),
        tap_points=tuple(sorted(tap_points)),
        embedding_index=int(embedding_index),
        input_spec=tuple(int(v) for v in input_spec),
        norm_mean=np.asarray(norm_mean, dtype=np.float32),
        norm_std=np.asarray(norm_std, dtype=np.float32),
        weights={k: as_tensor(v) for k, v in weights.items()},
    )
    shapes = _validate_model(model)
    object.__setattr__(model, "layer_shapes", shapes)
    return model


def _validate_model(model: ModelGraph) -> tuple[tuple[int, ...], ...]:
    if len(model.input_spec) != 3 or any(v < 1 for v in model.input_spec):
        raise ContainerError(f"input_spec must be (channels, height, width) positive, got {model.input_spec}")
    c = model.input_spec[0]
    if model.norm_mean.shape != (c,) or model.norm_std.shape != (c,):
        raise ContainerError(
            f"normalization mean/std must have one entry per channel ({c}), "
            f"got {model.norm_mean.shape} and {model.norm_std.shape}"
        )
    if np.any(model.norm_std == 0):
        raise ContainerError("normalization std contains zeros")
    if not model.layers:
        raise ContainerError("model has no layers")
    if not (0 <= model.embedding_index < len(model.layers)):
        raise ContainerError(f"embedding_index {model.embedding_index} out of range")

    shapes = []
    shape: tuple[int, ...] = model.input_spec
    for idx, layer in enumerate(model.layers):
        layer.validate()
        for role, name in (("weight", layer.weight), ("bias", layer.bias)):
            if not name:
                continue
            if name not in model.weights:
                raise ContainerError(f"layer {idx} references missing tensor {name!r}")
        if layer.kind == "conv2d":
            w = model.weights[layer.weight]
            want = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            if w.shape != want:
                raise ContainerError(
                    f"shape mismatch at layer {idx}: declared conv weight {want}, stored {w.shape}"
                )
            if layer.bias and model.weights[layer.bias].shape != (layer.out_channels,):
                raise ContainerError(
                    f"shape mismatch at layer {idx}: conv bias should be ({layer.out_channels},), "
                    f"stored {model.weights[layer.bias].shape}"
                )
        elif layer.kind == "linear":
            w = model.weights[layer.weight]
            want = (layer.out_features, layer.in_features)
            if w.shape != want:
                raise ContainerError(
                    f"shape mismatch at layer {idx}: declared linear weight {want}, stored {w.shape}"
                )
            if layer.bias and model.weights[layer.bias].shape != (layer.out_features,):
                raise ContainerError(
                    f"shape mismatch at layer {idx}: linear bias should be ({layer.out_features},), "
                    f"stored {model.weights[layer.bias].shape}"
                )
        try:
            shape = layer.output_shape(shape)
        except ContractError as exc:
            raise ContainerError(f"layer {idx} ({layer.kind}) rejects its input: {exc}") from exc
        shapes.append(shape)

    emb_shape = shapes[model.embedding_index]
    if len(emb_shape) != 1:
        raise ContainerError(f"embedding layer output must be rank 1, got shape {emb_shape}")
    for tap in model.tap_points:
        if not (0 <= tap < model.embedding_index):
            raise ContainerError(f"tap {tap} must precede the embedding layer {model.embedding_index}")
        tshape = shapes[tap]
        if len(tshape) != 3:
            raise ContainerError(f"tap {tap} output must be rank 3, got shape {tshape}")
        stride = cumulative_stride_of(model.layers, tap)
        _, in_h, in_w = model.input_spec
        if tshape[1] * stride != in_h or tshape[2] * stride != in_w:
            raise ContainerError(
                f"tap {tap} grid {tshape[1:]} times cumulative stride {stride} "
                f"does not reproduce the input extents {(in_h, in_w)}"
            )
    return tuple(shapes)


def cumulative_stride_of(layers, layer_index: int) -> int:
    """Product of spatial strides of layers 0..layer_index inclusive."""
    stride = 1
    for layer in layers[: layer_index + 1]:
        stride *= layer.spatial_stride
    return stride


def receptive_field(model: ModelGraph, layer_index: int, i: int, j: int) -> tuple[int, int, int, int]:
    """Input-pixel bounding box (x0, y0, x1, y1), inclusive, feeding grid
    cell (i, j) = (column, row) of the layer's output."""
    lo_x = hi_x = int(i)
    lo_y = hi_y = int(j)
    for idx in range(layer_index, -1, -1):
        layer = model.layers[idx]
        if layer.kind == "relu":
            continue
        if layer.kind not in ("conv2d", "maxpool2d", "avgpool2d"):
            raise ContractError(f"receptive field undefined through layer {idx} ({layer.kind})")
        k, s, p = layer.kernel, layer.stride, layer.padding
        lo_x = lo_x * s - p
        hi_x = hi_x * s - p + k - 1
        lo_y = lo_y * s - p
        hi_y = hi_y * s - p + k - 1
    _, in_h, in_w = model.input_spec
    return (max(lo_x, 0), max(lo_y, 0), min(hi_x, in_w - 1), min(hi_y, in_h - 1))


def save_model(model: ModelGraph, path) -> None:
    header = {
        "layout": LAYOUT,
        "tap_mode": TAP_MODE,
        "input_spec": list(model.input_spec),
        "normalization": {
            "mean": [float(v) for v in model.norm_mean],
            "std": [float(v) for v in model.norm_std],
        },
        "layers": [layer.to_json() for layer in model.layers],
        "tap_points": list(model.tap_points),
        "embedding_index": model.embedding_index,
    }
    write_container(path, header, model.weights)


def load_model(container_path) -> ModelGraph:
    """Load and fully validate a model from a PXW1 container."""
    header, tensors = read_container(container_path)
    layout = header.get("layout")
    if layout != LAYOUT:
        raise ContainerError(f"container layout {layout!r} is not supported (expected {LAYOUT!r})")
    try:
        layers = [LayerSpec.from_json(obj) for obj in header["layers"]]
        input_spec = header["input_spec"]
        norm = header["normalization"]
        tap_points = header["tap_points"]
        embedding_index = header["embedding_index"]
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"container header is missing required fields: {exc}") from exc
    except ContractError as exc:
        raise ContainerError(str(exc)) from exc
    return build_model(
        layers,
        tensors,
        input_spec,
        norm["mean"],
        norm["std"],
        tap_points,
        embedding_index,
    )


def _layer_forward(model: ModelGraph, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "conv2d":
        bias = model.weights[layer.bias] if layer.bias else None
        return conv2d_forward(x, model.weights[layer.weight], bias, layer.stride, layer.padding)
    if kind == "relu":
        return relu_forward(x)
    if kind == "maxpool2d":
        return pool_forward(x, "max", layer.kernel, layer.stride)
    if kind == "avgpool2d":
        return pool_forward(x, "avg", layer.kernel, layer.stride)
    if kind == "linear":
        bias = model.weights[layer.bias] if layer.bias else None
        return linear_forward(x, model.weights[layer.weight], bias)
    if kind == "flatten":
        return flatten_forward(x)
    if kind == "global-avg-pool":
        return global_avg_pool_forward(x)
    raise ContractError(f"unknown layer kind {kind!r}")


def forward(model: ModelGraph, image: np.ndarray) -> ForwardTrace:
    """Run the chain on a normalized (c, h, w) input, recording taps."""
    x = as_tensor(image, rank=3)
    if x.shape != model.input_spec:
        raise ContractError(f"input shape {x.shape} does not match model input_spec {model.input_spec}")
    outputs: list[np.ndarray] = []
    taps: dict[int, np.ndarray] = {}
    cur = x
    for idx, layer in enumerate(model.layers):
        cur = _layer_forward(model, layer, cur)
        outputs.append(cur)
        if idx in model.tap_points:
            taps[idx] = cur
        if idx == model.embedding_index:
            break
    return ForwardTrace(input=x, activations=taps, embedding=outputs[model.embedding_index],
                        layer_outputs=outputs)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product over the norms. Zero-norm embeddings are rejected."""
    va = as_tensor(a, rank=1).astype(np.float64)
    vb = as_tensor(b, rank=1).astype(np.float64)
    if va.shape != vb.shape:
        raise ContractError(f"embedding length mismatch: {va.shape} vs {vb.shape}")
    na = math.sqrt(float(np.dot(va, va)))
    nb = math.sqrt(float(np.dot(vb, vb)))
    if na == 0.0 or nb == 0.0:
        raise DegenerateError("cosine similarity undefined for a zero-norm embedding")
    return float(np.dot(va, vb) / (na * nb))


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (h, w, c) float array."""
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float32)

    def axis_coords(n_in, n_out):
        if n_out == 1:
            return np.array([(n_in - 1) / 2.0])
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    ys = axis_coords(in_h, out_h)
    xs = axis_coords(in_w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def ingest_image(model: ModelGraph, path) -> np.ndarray:
    """PNG file -> [0,1] floats -> corner-aligned resize -> normalized (c, h, w)."""
    rgb = pngio.read_png(path)
    return ingest_array(model, rgb)


def ingest_array(model: ModelGraph, rgb: np.ndarray) -> np.ndarray:
    c, in_h, in_w = model.input_spec
    if rgb.ndim != 3 or rgb.shape[2] != c:
        raise ContractError(f"image has shape {rgb.shape}, model expects {c} channels")
    x = rgb.astype(np.float32) / np.float32(255.0)
    x = resize_bilinear(x, in_h, in_w)
    chw = np.ascontiguousarray(x.transpose(2, 0, 1))
    return (chw - model.norm_mean[:, None, None]) / model.norm_std[:, None, None]
