"""Bottleneck residual networks."""
from __future__ import annotations

import numpy as np

from .layers import BatchNorm, Conv2D, GlobalAvgPool, Layer, Linear, ReLU, Sequential

EXPANSION = 4

# name -> (blocks per stage, bottleneck widths per stage, stem channels)
ARCHITECTURES = {
    "desk": ((1, 1, 1), (16, 32, 64), 16),
    "desk-deep": ((2, 2, 2), (16, 32, 64), 16),
    "resnet50": ((3, 4, 6, 3), (64, 128, 256, 512), 64),
    "resnet101": ((3, 4, 23, 3), (64, 128, 256, 512), 64),
}


class BottleneckBlock(Layer):
    """1x1 reduce, 3x3, 1x1 expand, each followed by batch norm, plus a shortcut.

    ``out = relu(shortcut(x) + bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(x)))))))))``.
    Downsampling happens in the strided 1x1 reduce conv; the shortcut is a
    strided 1x1 conv + batch norm whenever the shape changes.
    """

    def __init__(self, cin: int, width: int, stride: int = 1, rng=None, dtype=np.float32, projection=None):
        super().__init__()
        cout = width * EXPANSION
        self.path = Sequential(
            conv1=Conv2D(cin, width, 1, stride=stride, rng=rng, dtype=dtype),
            bn1=BatchNorm(width, dtype),
            relu1=ReLU(),
            conv2=Conv2D(width, width, 3, pad=1, rng=rng, dtype=dtype),
            bn2=BatchNorm(width, dtype),
            relu2=ReLU(),
            conv3=Conv2D(width, cout, 1, rng=rng, dtype=dtype),
            bn3=BatchNorm(cout, dtype),
        )
        self.shortcut = None
        if projection is None:
            projection = stride != 1 or cin != cout
        if projection:
            self.shortcut = Sequential(
                conv=Conv2D(cin, cout, 1, stride=stride, rng=rng, dtype=dtype),
                bn=BatchNorm(cout, dtype),
            )
        self.out_relu = ReLU()

    def children(self):
        kids = {"path": self.path}
        if self.shortcut is not None:
            kids["shortcut"] = self.shortcut
        kids["out_relu"] = self.out_relu
        return kids

    def forward(self, x, train=False):
        skip = x if self.shortcut is None else self.shortcut.forward(x, train)
        return self.out_relu.forward(skip + self.path.forward(x, train), train)

    def backward(self, grad):
        g = self.out_relu.backward(grad)
        gx = self.path.backward(g)
        return gx + (g if self.shortcut is None else self.shortcut.backward(g))


class Network(Sequential):
    def __init__(self, descriptor: str, num_classes: int, **layers):
        super().__init__(**layers)
        self.descriptor = descriptor
        self.num_classes = num_classes

    def state(self) -> dict[str, np.ndarray]:
        return {name: layer_arrays(layer, buf)[key] for name, layer, key, buf in self.named_arrays()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = {name for name, *_ in self.named_arrays()}
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for name, layer, key, buf in self.named_arrays():
            target = layer_arrays(layer, buf)
            if state[name].shape != target[key].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {target[key].shape}")
            target[key] = np.array(state[name], dtype=target[key].dtype)

    def parameters(self):
        """``(name, layer, key)`` for every learnable array."""
        return [(n, l, k) for n, l, k, _ in self.named_arrays(buffers=False)]

    def num_parameters(self) -> int:
        return sum(l.params[k].size for _, l, k in self.parameters())


def layer_arrays(layer: Layer, buffer: bool) -> dict[str, np.ndarray]:
    return layer.buffers if buffer else layer.params


def build_model(descriptor: str = "desk", num_classes: int = 10, seed: int = 0, dtype=np.float32) -> Network:
    """Stem 3x3 conv + BN + ReLU, bottleneck stages, global average pool, linear head.

    Every stage halves the spatial size at its first block. Weights are
    He-normal, drawn in construction order from ``seed``.
    """
    if descriptor not in ARCHITECTURES:
        raise ValueError(f"unknown model descriptor {descriptor!r}; choose from {sorted(ARCHITECTURES)}")
    blocks, widths, stem = ARCHITECTURES[descriptor]
    rng = np.random.default_rng(seed)
    layers: dict[str, Layer] = {
        "stem": Sequential(
            conv=Conv2D(3, stem, 3, pad=1, rng=rng, dtype=dtype), bn=BatchNorm(stem, dtype), relu=ReLU()
        )
    }
    cin = stem
    for s, (count, width) in enumerate(zip(blocks, widths)):
        stage = {}
        for b in range(count):
            stride = 2 if b == 0 else 1
            stage[f"block{b}"] = BottleneckBlock(cin, width, stride, rng=rng, dtype=dtype)
            cin = width * EXPANSION
        layers[f"stage{s + 1}"] = Sequential(**stage)
    layers["pool"] = GlobalAvgPool()
    layers["fc"] = Linear(cin, num_classes, rng=rng, dtype=dtype)
    # the input image never needs a gradient
    layers["stem"].layers["conv"].need_input_grad = False
    return Network(descriptor, num_classes, **layers)
