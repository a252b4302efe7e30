import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pairx.runtime import build_model
from pairx.tensor import LayerSpec


def identity_conv_model(size=4, taps=(1,)):
    """conv(1x1 identity) -> relu -> flatten; tap defaults to the relu."""
    layers = [
        LayerSpec(kind="conv2d", kernel=1, stride=1, padding=0, in_channels=1,
                  out_channels=1, weight="w0", bias="b0"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="flatten"),
    ]
    weights = {
        "w0": np.ones((1, 1, 1, 1), dtype=np.float32),
        "b0": np.zeros(1, dtype=np.float32),
    }
    return build_model(layers, weights, (1, size, size), [0.0], [1.0], taps, 2)


def random_conv_model(rng, in_size=16, channels=2, taps=None):
    """conv -> relu -> maxpool -> conv -> relu -> gap chain with random weights."""
    layers = [
        LayerSpec(kind="conv2d", kernel=3, stride=1, padding=1, in_channels=channels,
                  out_channels=4, weight="w0", bias="b0"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2d", kernel=2, stride=2),
        LayerSpec(kind="conv2d", kernel=3, stride=2, padding=1, in_channels=4,
                  out_channels=6, weight="w1", bias="b1"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="global-avg-pool"),
    ]
    weights = {
        "w0": rng.standard_normal((4, channels, 3, 3)).astype(np.float32) * 0.5,
        "b0": rng.standard_normal(4).astype(np.float32) * 0.1,
        "w1": rng.standard_normal((6, 4, 3, 3)).astype(np.float32) * 0.5,
        "b1": rng.standard_normal(6).astype(np.float32) * 0.1,
    }
    mean = [0.0] * channels
    std = [1.0] * channels
    return build_model(layers, weights, (channels, in_size, in_size), mean, std,
                       taps if taps is not None else (1, 4), 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
