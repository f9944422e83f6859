"""Layers and networks of the desk-scale training engine.

Each layer implements its own forward pass and reverse-mode backward pass
over ``numpy`` arrays. A ``Network`` is an ordered list of layers; weight
layers (everything except flatten) are numbered 1..L in order.
"""
from builtins import int, len, list, str, tuple
from typing import Any, Dict, List, Optional, Sequence, Tuple
import copy
import logging
import numpy as np

from app.models.tensor_model import TensorKind
from app.schemas.config_schemas import ModelSpec
from app.utils import conv_ops
from app.utils.exceptions import ShapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
CostTerm = Tuple[int, int]  # (multiply-accumulates, elements read)


class Layer:
    kind = "layer"
    low_rank = False

    def __init__(self, layer_id: str, activation: str = "none"):
        self.layer_id = layer_id
        self.activation = activation

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def output_shape(self, input_shape: Shape) -> Shape:
        raise NotImplementedError

    def cost_terms(self, input_shape: Shape, batch: int) -> List[CostTerm]:
        return []

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError

    def _activate(self, z: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if self.activation == "relu":
            mask = z > 0
            return z * mask, mask
        return z, None

    @staticmethod
    def _deactivate(grad: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
        return grad if mask is None else grad * mask

    def copy(self) -> "Layer":
        return copy.deepcopy(self)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.layer_id}>"


class FlattenLayer(Layer):
    kind = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, cache):
        return grad.reshape(cache), {}


class DenseLayer(Layer):
    kind = "dense"

    def __init__(self, layer_id: str, weight: np.ndarray, bias: np.ndarray, activation: str = "relu"):
        super().__init__(layer_id, activation)
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)

    @property
    def in_features(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_features(self) -> int:
        return int(self.weight.shape[1])

    @property
    def tensor_kind(self) -> TensorKind:
        return TensorKind.DENSE

    def weight_matrix(self) -> np.ndarray:
        return self.weight

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"{self.layer_id} expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def cost_terms(self, input_shape, batch):
        m, n = self.weight.shape
        return [(batch * m * n, m * n + batch * m)]

    def forward(self, x):
        z = x @ self.weight + self.bias
        y, mask = self._activate(z)
        return y, (x, mask)

    def backward(self, grad, cache):
        x, mask = cache
        g = self._deactivate(grad, mask)
        grads = {"weight": x.T @ g, "bias": g.sum(axis=0)}
        return g @ self.weight.T, grads


class LowRankDenseLayer(Layer):
    kind = "dense"
    low_rank = True

    def __init__(self, layer_id: str, u: np.ndarray, v_t: np.ndarray, bias: np.ndarray, activation: str = "relu"):
        super().__init__(layer_id, activation)
        self.u = np.ascontiguousarray(u, dtype=np.float64)
        self.v_t = np.ascontiguousarray(v_t, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)

    @property
    def rank(self) -> int:
        return int(self.u.shape[1])

    def parameters(self):
        return {"u": self.u, "v_t": self.v_t, "bias": self.bias}

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.u.shape[0],):
            raise ShapeError(f"{self.layer_id} expects ({self.u.shape[0]},), got {tuple(input_shape)}")
        return (int(self.v_t.shape[1]),)

    def cost_terms(self, input_shape, batch):
        m, r = self.u.shape
        n = self.v_t.shape[1]
        return [(batch * m * r, m * r + batch * m), (batch * r * n, r * n + batch * r)]

    def forward(self, x):
        h = x @ self.u
        z = h @ self.v_t + self.bias
        y, mask = self._activate(z)
        return y, (x, h, mask)

    def backward(self, grad, cache):
        x, h, mask = cache
        g = self._deactivate(grad, mask)
        dh = g @ self.v_t.T
        grads = {"u": x.T @ dh, "v_t": h.T @ g, "bias": g.sum(axis=0)}
        return dh @ self.u.T, grads


class ConvLayer(Layer):
    kind = "conv"

    def __init__(self, layer_id: str, kernel: np.ndarray, bias: np.ndarray, padding: int = 0, activation: str = "relu"):
        super().__init__(layer_id, activation)
        self.weight = np.ascontiguousarray(kernel, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        self.padding = int(padding)

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.weight.shape[1])

    @property
    def kernel_size(self) -> int:
        return int(self.weight.shape[2])

    @property
    def tensor_kind(self) -> TensorKind:
        return TensorKind.CONV

    def weight_matrix(self) -> np.ndarray:
        return conv_ops.unroll_kernel(self.weight)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"{self.layer_id} expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
        out_h, out_w = conv_ops.output_hw(input_shape[1], input_shape[2], self.kernel_size, self.padding)
        return (self.out_channels, out_h, out_w)

    def cost_terms(self, input_shape, batch):
        m, height, width = input_shape
        _, out_h, out_w = self.output_shape(input_shape)
        n, k = self.out_channels, self.kernel_size
        return [(batch * out_h * out_w * m * n * k * k, m * n * k * k + batch * m * height * width)]

    def forward(self, x):
        batch = x.shape[0]
        out_h, out_w = conv_ops.output_hw(x.shape[2], x.shape[3], self.kernel_size, self.padding)
        cols = conv_ops.im2col(x, self.kernel_size, self.padding)
        z = cols @ self.weight_matrix() + self.bias
        y, mask = self._activate(z)
        return conv_ops.cols_to_nchw(y, batch, out_h, out_w), (x.shape, cols, mask)

    def backward(self, grad, cache):
        x_shape, cols, mask = cache
        g = self._deactivate(conv_ops.nchw_to_cols(grad), mask)
        d_matrix = cols.T @ g
        grads = {
            "weight": conv_ops.roll_kernel(d_matrix, self.in_channels, self.kernel_size),
            "bias": g.sum(axis=0),
        }
        d_cols = g @ self.weight_matrix().T
        return conv_ops.col2im(d_cols, x_shape, self.kernel_size, self.padding), grads


class LowRankConvLayer(Layer):
    """Thin k x k convolution with r filters followed by a 1x1 convolution.

    Both stages are stored unrolled: ``u`` is (m*k*k, r), ``v_t`` is (r, n).
    The bias lives on the 1x1 stage.
    """
    kind = "conv"
    low_rank = True

    def __init__(self, layer_id: str, u: np.ndarray, v_t: np.ndarray, bias: np.ndarray,
                 in_channels: int, kernel_size: int, padding: int = 0, activation: str = "relu"):
        super().__init__(layer_id, activation)
        self.u = np.ascontiguousarray(u, dtype=np.float64)
        self.v_t = np.ascontiguousarray(v_t, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        self.in_channels = int(in_channels)
        self.kernel_size = int(kernel_size)
        self.padding = int(padding)
        if self.u.shape[0] != self.in_channels * self.kernel_size ** 2:
            raise ShapeError(f"{layer_id}: U has {self.u.shape[0]} rows for {in_channels} channels of size {kernel_size}")

    @property
    def rank(self) -> int:
        return int(self.u.shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.v_t.shape[1])

    def parameters(self):
        return {"u": self.u, "v_t": self.v_t, "bias": self.bias}

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(f"{self.layer_id} expects ({self.in_channels}, H, W), got {tuple(input_shape)}")
        out_h, out_w = conv_ops.output_hw(input_shape[1], input_shape[2], self.kernel_size, self.padding)
        return (self.out_channels, out_h, out_w)

    def cost_terms(self, input_shape, batch):
        m, height, width = input_shape
        _, out_h, out_w = self.output_shape(input_shape)
        r, n, k = self.rank, self.out_channels, self.kernel_size
        pixels = batch * out_h * out_w
        return [(pixels * m * k * k * r, m * k * k * r + batch * m * height * width),
                (pixels * r * n, r * n + pixels * r)]

    def forward(self, x):
        batch = x.shape[0]
        out_h, out_w = conv_ops.output_hw(x.shape[2], x.shape[3], self.kernel_size, self.padding)
        cols = conv_ops.im2col(x, self.kernel_size, self.padding)
        h = cols @ self.u
        z = h @ self.v_t + self.bias
        y, mask = self._activate(z)
        return conv_ops.cols_to_nchw(y, batch, out_h, out_w), (x.shape, cols, h, mask)

    def backward(self, grad, cache):
        x_shape, cols, h, mask = cache
        g = self._deactivate(conv_ops.nchw_to_cols(grad), mask)
        dh = g @ self.v_t.T
        grads = {"u": cols.T @ dh, "v_t": h.T @ g, "bias": g.sum(axis=0)}
        return conv_ops.col2im(dh @ self.u.T, x_shape, self.kernel_size, self.padding), grads


class Network:
    """Ordered layers plus the per-sample input shape."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], num_classes: int):
        self.layers: List[Layer] = list(layers)
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)

    def weight_layers(self) -> List[Tuple[int, Layer]]:
        """(1-based index, layer) for every layer that owns weights."""
        indexed = []
        for layer in self.layers:
            if layer.kind != "flatten":
                indexed.append((len(indexed) + 1, layer))
        return indexed

    @property
    def depth(self) -> int:
        return len(self.weight_layers())

    def layer(self, layer_id: str) -> Layer:
        for candidate in self.layers:
            if candidate.layer_id == layer_id:
                return candidate
        raise KeyError(layer_id)

    def input_shapes(self) -> Dict[str, Shape]:
        """Per-sample input shape seen by every layer."""
        shapes = {}
        shape = self.input_shape
        for layer in self.layers:
            shapes[layer.layer_id] = shape
            shape = layer.output_shape(shape)
        return shapes

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for layer in self.layers:
            for name, value in layer.parameters().items():
                params[f"{layer.layer_id}.{name}"] = value
        return params

    def param_count(self) -> int:
        return int(sum(layer.param_count for layer in self.layers))

    def _prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x.reshape((x.shape[0],) + self.input_shape)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Any]]:
        out = self._prepare(x)
        caches = []
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def backward(self, grad: np.ndarray, caches: List[Any]) -> Dict[str, np.ndarray]:
        grads = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, layer_grads = layer.backward(grad, cache)
            for name, value in layer_grads.items():
                grads[f"{layer.layer_id}.{name}"] = value
        return grads

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(x)
        return logits

    def replace(self, replacements: Dict[str, Layer]) -> "Network":
        """New network sharing untouched layers and swapping the given ones."""
        layers = [replacements.get(layer.layer_id, layer) for layer in self.layers]
        return Network(layers, self.input_shape, self.num_classes)

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers], self.input_shape, self.num_classes)

    def __repr__(self) -> str:
        return f"<Network {len(self.layers)} layers, {self.param_count()} params>"


def he_normal(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_network(spec: ModelSpec, rng: np.random.Generator) -> Network:
    """Instantiate ``spec`` with He-normal weights and zero biases."""
    layers: List[Layer] = []
    shape: Shape = tuple(spec.input_shape)
    index = 0
    for layer_spec in spec.layers:
        if layer_spec.kind == "flatten":
            layer = FlattenLayer(layer_spec.name or f"flatten{len(layers)}")
        else:
            index += 1
            layer_id = layer_spec.name or f"layer{index}"
            if layer_spec.kind == "dense":
                if len(shape) != 1:
                    raise ShapeError(f"{layer_id}: dense layer after a {shape} activation needs a flatten layer")
                m, n = shape[0], layer_spec.out_features
                layer = DenseLayer(layer_id, he_normal(rng, (m, n), m), np.zeros(n), layer_spec.activation)
            else:
                if len(shape) != 3:
                    raise ShapeError(f"{layer_id}: conv layer needs a (C, H, W) input, got {shape}")
                m, n, k = shape[0], layer_spec.out_channels, layer_spec.kernel_size
                padding = k // 2 if layer_spec.padding is None else layer_spec.padding
                layer = ConvLayer(layer_id, he_normal(rng, (n, m, k, k), m * k * k), np.zeros(n),
                                  padding, layer_spec.activation)
        shape = layer.output_shape(shape)
        layers.append(layer)
    ids = [layer.layer_id for layer in layers]
    if len(set(ids)) != len(ids):
        raise ShapeError(f"Layer ids must be unique, got {ids}")
    logger.debug(f"Built network with layers {ids}")
    return Network(layers, spec.input_shape, spec.num_classes)
