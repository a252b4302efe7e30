import numpy as np
import pytest

from pairx.errors import ContractError, DegenerateError
from pairx.lrp import (
    _layer_backward,
    lrp_backward,
    masked_pixel_backprop,
    seed_relevance_from_cosine,
)
from pairx.runtime import build_model, cosine_similarity, forward, receptive_field
from pairx.tensor import LayerSpec

from conftest import identity_conv_model


def _trace_pair(emb_a, emb_b):
    class T:
        pass

    ta, tb = T(), T()
    ta.embedding = np.asarray(emb_a, dtype=np.float32)
    tb.embedding = np.asarray(emb_b, dtype=np.float32)
    return ta, tb


class TestSeed:
    def test_identical_unit_vector(self):
        e = np.zeros(6, dtype=np.float32)
        e[0] = 1.0
        ta, tb = _trace_pair(e, e)
        sa, sb = seed_relevance_from_cosine(ta, tb)
        np.testing.assert_array_equal(sa, e)
        np.testing.assert_array_equal(sb, e)
        assert float(sa.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_vectors_sum_zero(self):
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([0.0, 1.0, 0.0])
        sa, _ = seed_relevance_from_cosine(*_trace_pair(a, b))
        assert float(sa.sum()) == pytest.approx(0.0, abs=1e-6)

    def test_sum_equals_cosine(self, rng):
        for _ in range(30):
            a = rng.standard_normal(8)
            b = rng.standard_normal(8)
            sa, sb = seed_relevance_from_cosine(*_trace_pair(a, b))
            cos = cosine_similarity(a.astype(np.float32), b.astype(np.float32))
            assert float(sa.sum()) == pytest.approx(cos, abs=1e-5)
            np.testing.assert_array_equal(sa, sb)

    def test_zero_norm_rejected(self):
        ta, tb = _trace_pair(np.zeros(4), np.ones(4))
        with pytest.raises(DegenerateError):
            seed_relevance_from_cosine(ta, tb)


class TestLrpBackward:
    def test_single_linear_layer_conserves(self):
        layers = [
            LayerSpec(kind="flatten"),
            LayerSpec(kind="linear", in_features=1, out_features=1, weight="w", bias="b"),
        ]
        weights = {"w": np.array([[2.0]], dtype=np.float32), "b": np.array([0.0], dtype=np.float32)}
        model = build_model(layers, weights, (1, 1, 1), [0.0], [1.0], (), 1)
        trace = forward(model, np.array([[[3.0]]], dtype=np.float32))
        assert trace.embedding[0] == 6.0
        out = lrp_backward(model, trace, np.array([6.0]), stop_layer=-1)
        assert float(out.values.sum()) == pytest.approx(6.0, abs=1e-4)

    def test_maxpool_winner_take_all(self):
        layers = [LayerSpec(kind="maxpool2d", kernel=2, stride=2), LayerSpec(kind="flatten")]
        model = build_model(layers, {}, (1, 2, 2), [0.0], [1.0], (), 1)
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        trace = forward(model, img)
        out = lrp_backward(model, trace, np.array([5.0]), stop_layer=-1)
        np.testing.assert_array_equal(out.values, [[[0.0, 0.0], [0.0, 5.0]]])

    def test_maxpool_tie_breaks_to_first_row_major(self):
        layers = [LayerSpec(kind="maxpool2d", kernel=2, stride=2), LayerSpec(kind="flatten")]
        model = build_model(layers, {}, (1, 2, 2), [0.0], [1.0], (), 1)
        img = np.full((1, 2, 2), 7.0, dtype=np.float32)
        trace = forward(model, img)
        out = lrp_backward(model, trace, np.array([1.0]), stop_layer=-1)
        np.testing.assert_array_equal(out.values, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_avgpool_uniform_split(self):
        layers = [LayerSpec(kind="avgpool2d", kernel=2, stride=2), LayerSpec(kind="flatten")]
        model = build_model(layers, {}, (1, 2, 2), [0.0], [1.0], (), 1)
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
        trace = forward(model, img)
        out = lrp_backward(model, trace, np.array([8.0]), stop_layer=-1)
        np.testing.assert_array_equal(out.values, [[[2.0, 2.0], [2.0, 2.0]]])

    def test_two_conv_model_per_layer_sums_conserved(self, rng):
        # ZPlus is conservative on nonnegative activations: check layer by layer.
        layers = [
            LayerSpec(kind="conv2d", kernel=3, stride=1, padding=1, in_channels=1,
                      out_channels=3, weight="w0", bias=""),
            LayerSpec(kind="relu"),
            LayerSpec(kind="conv2d", kernel=3, stride=1, padding=1, in_channels=3,
                      out_channels=2, weight="w1", bias=""),
            LayerSpec(kind="relu"),
            LayerSpec(kind="flatten"),
        ]
        weights = {
            "w0": rng.standard_normal((3, 1, 3, 3)).astype(np.float32),
            "w1": rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
        }
        model = build_model(layers, weights, (1, 8, 8), [0.0], [1.0], (1, 3), 4)
        img = np.abs(rng.standard_normal((1, 8, 8))).astype(np.float32)
        trace = forward(model, img)
        rel = trace.layer_outputs[4].astype(np.float64)  # seed with the output itself
        for idx in range(4, -1, -1):
            a_in = trace.layer_outputs[idx - 1] if idx > 0 else trace.input
            nxt = _layer_backward(model, idx, a_in, rel)
            assert nxt.sum() == pytest.approx(rel.sum(), rel=0.01)
            rel = nxt

    def test_linear_only_epsilon_leakage_small(self, rng):
        layers = [
            LayerSpec(kind="flatten"),
            LayerSpec(kind="linear", in_features=16, out_features=12, weight="w0", bias=""),
            LayerSpec(kind="linear", in_features=12, out_features=8, weight="w1", bias=""),
        ]
        weights = {
            "w0": rng.standard_normal((12, 16)).astype(np.float32),
            "w1": rng.standard_normal((8, 12)).astype(np.float32),
        }
        model = build_model(layers, weights, (1, 4, 4), [0.0], [1.0], (), 2)
        img = rng.standard_normal((1, 4, 4)).astype(np.float32)
        trace = forward(model, img)
        seed = rng.standard_normal(8)
        out = lrp_backward(model, trace, seed, stop_layer=-1)
        total = float(out.values.sum())
        assert total == pytest.approx(float(seed.sum()), rel=1e-3)

    def test_undeclared_stop_layer_rejected(self):
        model = identity_conv_model(size=4, taps=(1,))
        trace = forward(model, np.ones((1, 4, 4), dtype=np.float32))
        with pytest.raises(ContractError, match="tap"):
            lrp_backward(model, trace, trace.embedding, stop_layer=0)

    def test_stop_at_tap_has_activation_shape(self):
        model = identity_conv_model(size=4, taps=(1,))
        img = np.abs(np.random.default_rng(3).standard_normal((1, 4, 4))).astype(np.float32)
        trace = forward(model, img)
        seed = np.ones_like(trace.embedding)
        out = lrp_backward(model, trace, seed, stop_layer=1)
        assert out.values.shape == trace.activations[1].shape


def _random_toy_model(rng, depth):
    """2-4 conv/pool layers with relus, tap at the deepest rank-3 layer."""
    size = 16
    layers = []
    weights = {}
    c = 1
    spatial = size
    for d in range(depth):
        if d % 2 == 0:
            oc = int(rng.integers(2, 5))
            k = int(rng.choice([1, 3]))
            pad = k // 2
            layers.append(LayerSpec(kind="conv2d", kernel=k, stride=1, padding=pad,
                                    in_channels=c, out_channels=oc,
                                    weight=f"w{d}", bias=""))
            weights[f"w{d}"] = rng.standard_normal((oc, c, k, k)).astype(np.float32)
            layers.append(LayerSpec(kind="relu"))
            c = oc
        else:
            kind = "maxpool2d" if rng.random() < 0.5 else "avgpool2d"
            layers.append(LayerSpec(kind=kind, kernel=2, stride=2))
            spatial //= 2
    tap = len(layers) - 1
    layers.append(LayerSpec(kind="flatten"))
    model = build_model(layers, weights, (1, size, size), [0.0], [1.0], (tap,),
                        len(layers) - 1)
    return model, tap


class TestMaskedPixelBackprop:
    def test_support_within_receptive_field(self, rng):
        for _ in range(8):
            depth = int(rng.integers(2, 5))
            model, tap = _random_toy_model(rng, depth)
            img = np.abs(rng.standard_normal(model.input_spec)).astype(np.float32)
            trace = forward(model, img)
            _, gh, gw = trace.activations[tap].shape
            for _ in range(5):
                i = int(rng.integers(0, gw))
                j = int(rng.integers(0, gh))
                pr = masked_pixel_backprop(model, trace, tap, (i, j))
                x0, y0, x1, y1 = receptive_field(model, tap, i, j)
                hm = np.abs(pr.heatmap())
                outside = hm.copy()
                outside[y0 : y1 + 1, x0 : x1 + 1] = 0.0
                assert outside.max() == 0.0

    def test_zero_activation_gives_zero_heatmap(self):
        model = identity_conv_model(size=4, taps=(1,))
        img = np.ones((1, 4, 4), dtype=np.float32)
        img[0, 2, 1] = 0.0
        trace = forward(model, img)
        pr = masked_pixel_backprop(model, trace, 1, (1, 2))
        assert np.all(pr.values == 0.0)

    def test_one_by_one_conv_disjoint_keypoints(self, rng):
        model = identity_conv_model(size=4, taps=(1,))
        img = np.abs(rng.standard_normal((1, 4, 4))).astype(np.float32) + 0.1
        trace = forward(model, img)
        p1 = masked_pixel_backprop(model, trace, 1, (0, 0))
        p2 = masked_pixel_backprop(model, trace, 1, (3, 2))
        h1, h2 = p1.heatmap(), p2.heatmap()
        assert h1[0, 0] != 0.0 and np.count_nonzero(h1) == 1
        assert h2[2, 3] != 0.0 and np.count_nonzero(h2) == 1

    def test_out_of_bounds_keypoint_rejected(self):
        model = identity_conv_model(size=4, taps=(1,))
        trace = forward(model, np.ones((1, 4, 4), dtype=np.float32))
        with pytest.raises(ContractError, match="outside"):
            masked_pixel_backprop(model, trace, 1, (4, 0))

    def test_nonnegative_under_nonnegative_activations(self, rng):
        model, tap = _random_toy_model(rng, 3)
        img = np.abs(rng.standard_normal(model.input_spec)).astype(np.float32)
        trace = forward(model, img)
        pr = masked_pixel_backprop(model, trace, tap, (1, 1))
        assert pr.values.min() >= 0.0
