import struct

import numpy as np
import pytest

from pairx.container import read_container, write_container
from pairx.errors import ContainerError, ContractError, DegenerateError
from pairx.pngio import write_png
from pairx.runtime import (
    build_model,
    cosine_similarity,
    cumulative_stride_of,
    forward,
    ingest_image,
    load_model,
    receptive_field,
    resize_bilinear,
    save_model,
)
from pairx.tensor import LayerSpec

from conftest import identity_conv_model, random_conv_model


class TestContainer:
    def test_round_trip_three_layer_toy(self, tmp_path):
        model = identity_conv_model(size=4)
        path = tmp_path / "toy.pxw"
        save_model(model, path)
        loaded = load_model(path)
        assert len(loaded.layers) == 3
        assert loaded.layers == model.layers
        assert loaded.tap_points == model.tap_points
        assert loaded.embedding_index == model.embedding_index
        for name in model.weights:
            np.testing.assert_array_equal(loaded.weights[name], model.weights[name])

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pxw"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ContainerError, match="unrecognized container"):
            load_model(path)

    def test_wrong_version_rejected(self, tmp_path):
        model = identity_conv_model()
        path = tmp_path / "v9.pxw"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="version 9"):
            load_model(path)

    def test_truncation_rejected(self, tmp_path):
        model = identity_conv_model()
        path = tmp_path / "cut.pxw"
        save_model(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 8])
        with pytest.raises(ContainerError, match="truncated"):
            load_model(path)

    def test_declared_shape_disagrees_with_stored_tensor(self, tmp_path):
        # Header declares a 1x1 conv but the stored kernel is 3x3.
        header = {
            "layout": "channels_first",
            "tap_mode": "post_activation",
            "input_spec": [1, 4, 4],
            "normalization": {"mean": [0.0], "std": [1.0]},
            "layers": [
                {"kind": "conv2d", "kernel": 1, "stride": 1, "padding": 0,
                 "in_channels": 1, "out_channels": 1, "weight": "w0", "bias": "b0"},
                {"kind": "relu"},
                {"kind": "flatten"},
            ],
            "tap_points": [1],
            "embedding_index": 2,
        }
        tensors = {
            "w0": np.ones((1, 1, 3, 3), dtype=np.float32),
            "b0": np.zeros(1, dtype=np.float32),
        }
        path = tmp_path / "mismatch.pxw"
        write_container(path, header, tensors)
        with pytest.raises(ContainerError, match="shape mismatch at layer 0"):
            load_model(path)

    def test_payload_alignment(self, tmp_path):
        model = random_conv_model(np.random.default_rng(0))
        path = tmp_path / "aligned.pxw"
        save_model(model, path)
        header, _ = read_container(path)
        for entry in header["tensors"]:
            assert entry["offset"] % 64 == 0

    def test_missing_weight_reference(self):
        layers = [
            LayerSpec(kind="conv2d", kernel=1, stride=1, padding=0, in_channels=1,
                      out_channels=1, weight="ghost", bias=""),
            LayerSpec(kind="flatten"),
        ]
        with pytest.raises(ContainerError, match="missing tensor 'ghost'"):
            build_model(layers, {}, (1, 2, 2), [0.0], [1.0], (), 1)

    def test_tap_after_embedding_rejected(self):
        layers = [
            LayerSpec(kind="relu"),
            LayerSpec(kind="flatten"),
            LayerSpec(kind="relu"),
        ]
        with pytest.raises(ContainerError, match="precede the embedding"):
            build_model(layers, {}, (1, 2, 2), [0.0], [1.0], (2,), 1)


class TestForward:
    def test_identity_conv_tap_equals_input(self):
        model = identity_conv_model(size=4, taps=(1,))
        rng = np.random.default_rng(0)
        img = np.abs(rng.standard_normal((1, 4, 4))).astype(np.float32)
        trace = forward(model, img)
        np.testing.assert_array_equal(trace.activations[1], img)
        np.testing.assert_array_equal(trace.input, img)

    def test_determinism_byte_identical(self, rng):
        model = random_conv_model(rng)
        img = rng.standard_normal((2, 16, 16)).astype(np.float32)
        t1 = forward(model, img)
        t2 = forward(model, img.copy())
        assert t1.embedding.tobytes() == t2.embedding.tobytes()
        for k in t1.activations:
            assert t1.activations[k].tobytes() == t2.activations[k].tobytes()

    def test_hand_built_two_layer_model(self):
        # conv k2 s2 with kernel [[1,0],[0,1]], bias 1, then relu, then flatten.
        layers = [
            LayerSpec(kind="conv2d", kernel=2, stride=2, padding=0, in_channels=1,
                      out_channels=1, weight="w", bias="b"),
            LayerSpec(kind="relu"),
            LayerSpec(kind="flatten"),
        ]
        weights = {
            "w": np.array([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=np.float32),
            "b": np.array([1.0], dtype=np.float32),
        }
        model = build_model(layers, weights, (1, 4, 4), [0.0], [1.0], (1,), 2)
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        trace = forward(model, img)
        # windows pick x[r, c] + x[r+1, c+1] + 1
        expected = np.array([[[6.0, 10.0], [22.0, 26.0]]], dtype=np.float32)
        np.testing.assert_array_equal(trace.activations[1], expected)
        np.testing.assert_array_equal(trace.embedding, expected.reshape(-1))

    def test_input_shape_mismatch_rejected(self):
        model = identity_conv_model(size=4)
        with pytest.raises(ContractError, match="input_spec"):
            forward(model, np.zeros((1, 5, 5), dtype=np.float32))

    def test_tap_extents_match_cumulative_stride(self, rng):
        model = random_conv_model(rng, in_size=16)
        img = rng.standard_normal((2, 16, 16)).astype(np.float32)
        trace = forward(model, img)
        for tap, act in trace.activations.items():
            stride = cumulative_stride_of(model.layers, tap)
            assert act.shape[1] == 16 // stride
            assert act.shape[2] == 16 // stride


class TestCosine:
    def test_self_similarity(self):
        v = np.array([0.3, -1.2, 4.0], dtype=np.float32)
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-7)

    def test_antiparallel(self):
        v = np.array([0.5, 2.0], dtype=np.float32)
        assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-7)

    def test_hand_value(self):
        a = np.array([1.0, 0.0], dtype=np.float32)
        b = np.array([1.0, 1.0], dtype=np.float32)
        assert cosine_similarity(a, b) == pytest.approx(0.70710678, abs=1e-6)

    def test_symmetry_and_scale_invariance(self, rng):
        for _ in range(50):
            a = rng.standard_normal(12)
            b = rng.standard_normal(12)
            alpha, beta = rng.uniform(0.1, 10, size=2)
            c1 = cosine_similarity(a, b)
            assert cosine_similarity(b, a) == pytest.approx(c1, abs=1e-6)
            assert cosine_similarity(alpha * a, beta * b) == pytest.approx(c1, abs=1e-6)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateError):
            cosine_similarity(np.zeros(3), np.ones(3))


class TestReceptiveField:
    def test_single_conv(self):
        model = random_conv_model(np.random.default_rng(0))
        # layer 0: conv k3 s1 p1 -> rf of (i, j) is a 3x3 box centred there
        assert receptive_field(model, 0, 5, 7) == (4, 6, 6, 8)

    def test_clipped_at_border(self):
        model = random_conv_model(np.random.default_rng(0))
        assert receptive_field(model, 0, 0, 0) == (0, 0, 1, 1)

    def test_through_pooling(self):
        model = random_conv_model(np.random.default_rng(0))
        # tap 4 sits after conv(s1 p1 k3) -> pool(k2 s2) -> conv(k3 s2 p1)
        x0, y0, x1, y1 = receptive_field(model, 4, 1, 1)
        assert (x0, y0) == (1, 1)
        assert (x1, y1) == (8, 8)


class TestIngestion:
    def test_resize_identity_when_sizes_match(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        out = resize_bilinear(img, 8, 8)
        np.testing.assert_array_equal(out, img)

    def test_resize_corner_alignment(self):
        # one-channel ramp: corners must be preserved exactly
        img = np.linspace(0, 1, 16, dtype=np.float64).reshape(4, 4, 1)
        out = resize_bilinear(img, 7, 7)
        assert out[0, 0, 0] == pytest.approx(img[0, 0, 0])
        assert out[-1, -1, 0] == pytest.approx(img[-1, -1, 0], abs=1e-7)
        assert out[0, -1, 0] == pytest.approx(img[0, -1, 0], abs=1e-7)

    def test_ingest_applies_normalization(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(4, 4, 1), dtype=np.uint8)
        rgb = np.repeat(img, 3, axis=2)
        path = tmp_path / "img.png"
        write_png(path, rgb)
        layers = [
            LayerSpec(kind="conv2d", kernel=1, stride=1, padding=0, in_channels=3,
                      out_channels=1, weight="w", bias=""),
            LayerSpec(kind="flatten"),
        ]
        weights = {"w": np.ones((1, 3, 1, 1), dtype=np.float32)}
        model = build_model(layers, weights, (3, 4, 4), [0.5, 0.5, 0.5], [0.25, 0.25, 0.25], (), 1)
        x = ingest_image(model, path)
        expected = (img[:, :, 0].astype(np.float32) / 255.0 - 0.5) / 0.25
        np.testing.assert_allclose(x[0], expected, atol=1e-6)
        np.testing.assert_allclose(x[1], expected, atol=1e-6)
