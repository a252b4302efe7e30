"""Dense tensor storage and deterministic forward layer operations.

Tensors are plain ``numpy.ndarray`` values: float32, C-contiguous
(row-major), rank 1 to 4. Activations are laid out channels-first
(c, h, w); conv kernels as (out_channels, in_channels, kh, kw).

Every operation accumulates in float64 and rounds to float32 once at
the end. The accumulation order is part of the contract so that a
naive scalar loop reproduces each output bit for bit:

* conv2d: window positions in row-major order (ky outer, kx inner),
  input channels innermost, bias added after the products.
* linear: input features in index order, bias added last.
* avg pooling: window positions in row-major order, one division at
  the end.

Only zero padding is supported; no dilation or groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

LAYER_KINDS = (
    "conv2d",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "linear",
    "flatten",
    "global-avg-pool",
)


def as_tensor(data, rank: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a float32 C-order array, optionally checking rank."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 4:
        raise ContractError(f"tensor rank {arr.ndim} exceeds the supported maximum of 4")
    if rank is not None and arr.ndim != rank:
        raise ContractError(f"expected a rank-{rank} tensor, got rank {arr.ndim} with shape {arr.shape}")
    return arr


def conv2d_forward(
    input: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlate a (c, h, w) input with an (oc, c, kh, kw) kernel.

    Output spatial extents follow floor((n + 2p - k) / s) + 1. Zero
    padding only.
    """
    x = as_tensor(input, rank=3)
    w = as_tensor(weights, rank=4)
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d requires stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    cin, h, wid = x.shape
    oc, kin, kh, kw = w.shape
    if kin != cin:
        raise ContractError(
            f"conv2d channel mismatch: input shape {x.shape} has {cin} channels "
            f"but kernel shape {w.shape} expects {kin}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractError(
            f"conv2d kernel {(kh, kw)} with padding {padding} does not fit input {x.shape[1:]}"
        )
    if bias is None:
        b64 = np.zeros(oc, dtype=np.float64)
    else:
        b = as_tensor(bias, rank=1)
        if b.shape[0] != oc:
            raise ContractError(f"conv2d bias shape {b.shape} does not match {oc} output channels")
        b64 = b.astype(np.float64)

    if padding:
        xp = np.zeros((cin, h + 2 * padding, wid + 2 * padding), dtype=np.float64)
        xp[:, padding : padding + h, padding : padding + wid] = x
    else:
        xp = x.astype(np.float64)
    w64 = w.astype(np.float64)

    acc = np.zeros((oc, oh, ow), dtype=np.float64)
    # Scalar loop over (ky, kx, c) fixes the per-element accumulation order;
    # the large dims (oc, oh, ow) are vectorized but see the same add sequence.
    for ky in range(kh):
        for kx in range(kw):
            for c in range(cin):
                patch = xp[c, ky : ky + (oh - 1) * stride + 1 : stride,
                           kx : kx + (ow - 1) * stride + 1 : stride]
                acc += w64[:, c, ky, kx][:, None, None] * patch[None, :, :]
    acc += b64[:, None, None]
    return acc.astype(np.float32)


def relu_forward(input: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    x = as_tensor(input)
    return np.maximum(x, np.float32(0.0))


def pool_forward(input: np.ndarray, kind: str, kernel: int, stride: int) -> np.ndarray:
    """Per-window max or mean over a (c, h, w) input. No padding."""
    x = as_tensor(input, rank=3)
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pooling kind {kind!r}, expected 'max' or 'avg'")
    if kernel < 1 or stride < 1:
        raise ContractError(f"pooling requires kernel >= 1 and stride >= 1, got kernel={kernel} stride={stride}")
    c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ContractError(f"pooling window {kernel} is larger than input extents {(h, w)}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1

    if kind == "max":
        out = None
        for ky in range(kernel):
            for kx in range(kernel):
                win = x[:, ky : ky + (oh - 1) * stride + 1 : stride,
                        kx : kx + (ow - 1) * stride + 1 : stride]
                out = win.copy() if out is None else np.maximum(out, win)
        return out

    acc = np.zeros((c, oh, ow), dtype=np.float64)
    for ky in range(kernel):
        for kx in range(kernel):
            acc += x[:, ky : ky + (oh - 1) * stride + 1 : stride,
                     kx : kx + (ow - 1) * stride + 1 : stride]
    acc /= kernel * kernel
    return acc.astype(np.float32)


def linear_forward(input: np.ndarray, weights: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """W.x + b for a rank-1 input of length in-features."""
    x = as_tensor(input, rank=1)
    w = as_tensor(weights, rank=2)
    out_f, in_f = w.shape
    if x.shape[0] != in_f:
        raise ContractError(
            f"linear dimension mismatch: input shape {x.shape} vs weight shape {w.shape}"
        )
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    acc = np.zeros(out_f, dtype=np.float64)
    for j in range(in_f):
        acc += w64[:, j] * x64[j]
    if bias is not None:
        b = as_tensor(bias, rank=1)
        if b.shape[0] != out_f:
            raise ContractError(f"linear bias shape {b.shape} does not match {out_f} output features")
        acc += b.astype(np.float64)
    return acc.astype(np.float32)


def flatten_forward(input: np.ndarray) -> np.ndarray:
    """Row-major flatten to rank 1."""
    return as_tensor(input).reshape(-1)


def global_avg_pool_forward(input: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a (c, h, w) input, producing rank 1."""
    x = as_tensor(input, rank=3)
    c, h, w = x.shape
    acc = np.zeros(c, dtype=np.float64)
    for y in range(h):
        acc += x[:, y, :].astype(np.float64).sum(axis=1)
    acc /= h * w
    return acc.astype(np.float32)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model; parameters depend on ``kind``.

    ``weight`` and ``bias`` name tensors in the weight container.
    """

    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    weight: str = ""
    bias: str = ""

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "maxpool2d", "avgpool2d"):
            if self.kernel < 1:
                raise ContractError(f"{self.kind} requires kernel >= 1, got {self.kernel}")
            if self.stride < 1:
                raise ContractError(f"{self.kind} requires stride >= 1, got {self.stride}")
            if self.padding < 0:
                raise ContractError(f"{self.kind} requires padding >= 0, got {self.padding}")
        if self.kind == "conv2d" and (self.in_channels < 1 or self.out_channels < 1):
            raise ContractError("conv2d requires positive channel counts")
        if self.kind == "linear" and (self.in_features < 1 or self.out_features < 1):
            raise ContractError("linear requires positive feature counts")
        if self.kind in ("maxpool2d", "avgpool2d") and self.padding != 0:
            raise ContractError(f"{self.kind} does not support padding")

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Static shape inference for loader-time validation."""
        k = self.kind
        if k == "conv2d":
            if len(input_shape) != 3:
                raise ContractError(f"conv2d expects a rank-3 input, got shape {input_shape}")
            c, h, w = input_shape
            if c != self.in_channels:
                raise ContractError(
                    f"conv2d declared {self.in_channels} input channels but receives {c}"
                )
            oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
            ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
            if oh < 1 or ow < 1:
                raise ContractError(f"conv2d kernel {self.kernel} does not fit input {input_shape}")
            return (self.out_channels, oh, ow)
        if k in ("maxpool2d", "avgpool2d"):
            if len(input_shape) != 3:
                raise ContractError(f"{k} expects a rank-3 input, got shape {input_shape}")
            c, h, w = input_shape
            if self.kernel > h or self.kernel > w:
                raise ContractError(f"{k} window {self.kernel} is larger than input {input_shape}")
            return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)
        if k == "relu":
            return input_shape
        if k == "flatten":
            n = 1
            for d in input_shape:
                n *= d
            return (n,)
        if k == "global-avg-pool":
            if len(input_shape) != 3:
                raise ContractError(f"global-avg-pool expects a rank-3 input, got shape {input_shape}")
            return (input_shape[0],)
        if k == "linear":
            if len(input_shape) != 1:
                raise ContractError(f"linear expects a rank-1 input, got shape {input_shape}")
            if input_shape[0] != self.in_features:
                raise ContractError(
                    f"linear declared {self.in_features} input features but receives {input_shape[0]}"
                )
            return (self.out_features,)
        raise ContractError(f"unknown layer kind {k!r}")

    @property
    def spatial_stride(self) -> int:
        """Downsampling factor this layer contributes to the spatial grid."""
        if self.kind in ("conv2d", "maxpool2d", "avgpool2d"):
            return self.stride
        return 1

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "conv2d":
            out.update(
                kernel=self.kernel, stride=self.stride, padding=self.padding,
                in_channels=self.in_channels, out_channels=self.out_channels,
                weight=self.weight, bias=self.bias,
            )
        elif self.kind in ("maxpool2d", "avgpool2d"):
            out.update(kernel=self.kernel, stride=self.stride)
        elif self.kind == "linear":
            out.update(
                in_features=self.in_features, out_features=self.out_features,
                weight=self.weight, bias=self.bias,
            )
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ContractError(f"malformed layer spec: {obj!r}")
        allowed = {
            "kind", "kernel", "stride", "padding", "in_channels", "out_channels",
            "in_features", "out_features", "weight", "bias",
        }
        unknown = set(obj) - allowed
        if unknown:
            raise ContractError(f"layer spec has unknown fields {sorted(unknown)}")
        spec = cls(**obj)
        spec.validate()
        return spec
