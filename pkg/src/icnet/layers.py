"""Stateful layers wrapping the tensor ops.

Each layer caches what its backward pass needs during ``forward``; a layer
instance therefore runs at most once per forward/backward cycle. Parameter
gradients accumulate into ``Param.grad``.
"""

import math

import numpy as np

from icnet import tensor as T
from icnet.tensor import Param


class Layer:
    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}

    def add_param(self, name, value, decay=True):
        p = Param(value, decay=decay)
        self._params[name] = p
        return p

    def add_buffer(self, name, value):
        self._buffers[name] = value
        return value

    def add_child(self, name, layer):
        self._children[name] = layer
        return layer

    def named_params(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_params(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_layers(self, prefix=""):
        for cname, child in self._children.items():
            full = prefix + cname
            yield full, child
            yield from child.named_layers(full + ".")

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def freeze_bn(self, frozen=True):
        """Make every batch norm below this layer use its running statistics."""
        for _, layer in self.named_layers():
            if hasattr(layer, "frozen"):
                layer.frozen = frozen
        return self

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """Same-padded convolution (padding = dilation * (k - 1) / 2)."""

    def __init__(self, c_in, c_out, k, rng, stride=1, dilation=1, bias=True, dtype=np.float32):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.weight = self.add_param("weight", he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype), decay=False) if bias else None
        self._cache = None

    @property
    def padding(self):
        return self.dilation * (self.weight.shape[2] - 1) // 2

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def k(self):
        return self.weight.shape[2]

    def set_bias(self, value):
        self.bias = self.add_param("bias", value, decay=False)

    def forward(self, x, train):
        b = None if self.bias is None else self.bias.data
        y, cols = T.conv2d_forward(x, self.weight.data, b, self.stride, self.dilation, self.padding)
        self._cache = (x, cols)
        return y

    def backward(self, dy):
        x, cols = self._cache
        dx, dw, db = T.conv2d_grad(x, self.weight.data, dy, self.stride, self.dilation, self.padding, cols)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class Deconv2d(Layer):
    """Stride-2 transposed convolution that exactly doubles spatial dims."""

    def __init__(self, c_in, c_out, k, rng, bias=False, dtype=np.float32):
        super().__init__()
        self.stride = 2
        fan_in = max(1, c_in * k * k // 4)
        self.weight = self.add_param("weight", he_normal(rng, (c_in, c_out, k, k), fan_in, dtype))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype), decay=False) if bias else None
        self._cache = None

    @property
    def k(self):
        return self.weight.shape[2]

    @property
    def c_in(self):
        return self.weight.shape[0]

    @property
    def c_out(self):
        return self.weight.shape[1]

    def set_bias(self, value):
        self.bias = self.add_param("bias", value, decay=False)

    def _geom(self):
        return self.stride, (self.k - 1) // 2, 1

    def forward(self, x, train):
        self._cache = x
        b = None if self.bias is None else self.bias.data
        return T.conv_transpose2d(x, self.weight.data, b, *self._geom())

    def backward(self, dy):
        dx, dw, db = T.conv_transpose2d_grad(self._cache, self.weight.data, dy, *self._geom())
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class BatchNorm2d(Layer):
    def __init__(self, c, dtype=np.float32, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.add_param("gamma", np.ones(c, dtype))
        self.beta = self.add_param("beta", np.zeros(c, dtype), decay=False)
        self.running_mean = self.add_buffer("running_mean", np.zeros(c, dtype))
        self.running_var = self.add_buffer("running_var", np.ones(c, dtype))
        self.frozen = False  # use running stats even when training
        self._cache = None

    def forward(self, x, train):
        y, self._cache = T.batch_norm(
            x,
            self.gamma.data,
            self.beta.data,
            self.running_mean,
            self.running_var,
            self.eps,
            self.momentum,
            train and not self.frozen,
        )
        return y

    def backward(self, dy):
        dx, dg, db = T.batch_norm_grad(dy, self.gamma.data, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx

    def select(self, keep):
        """Keep only the channels in ``keep`` (pruning)."""
        self.gamma.data = np.ascontiguousarray(self.gamma.data[keep])
        self.gamma.grad = np.zeros_like(self.gamma.data)
        self.beta.data = np.ascontiguousarray(self.beta.data[keep])
        self.beta.grad = np.zeros_like(self.beta.data)
        self.running_mean = self._buffers["running_mean"] = np.ascontiguousarray(self.running_mean[keep])
        self.running_var = self._buffers["running_var"] = np.ascontiguousarray(self.running_var[keep])


class Identity(Layer):
    def forward(self, x, train):
        return x

    def backward(self, dy):
        return dy


class ReLU(Layer):
    def forward(self, x, train):
        self._cache = x
        return T.relu(x)

    def backward(self, dy):
        return T.relu_grad(self._cache, dy)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    @property
    def layers(self):
        return list(self._children.values())

    def forward(self, x, train):
        for layer in self._children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(list(self._children.values())):
            dy = layer.backward(dy)
        return dy


class ConvBNReLU(Layer):
    def __init__(self, c_in, c_out, k, rng, stride=1, dilation=1, dtype=np.float32):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(c_in, c_out, k, rng, stride, dilation, bias=False, dtype=dtype))
        self.bn = self.add_child("bn", BatchNorm2d(c_out, dtype))
        self.act = ReLU()

    def forward(self, x, train):
        return self.act.forward(self.bn.forward(self.conv.forward(x, train), train), train)

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.act.backward(dy)))


class Resize(Layer):
    """Bilinear resize by a rational factor ``up / down``."""

    def __init__(self, up=1, down=1):
        super().__init__()
        self.up, self.down = up, down

    def forward(self, x, train):
        self._shape = x.shape
        h, w = x.shape[2:]
        return T.bilinear_resize(x, h * self.up // self.down, w * self.up // self.down)

    def backward(self, dy):
        return T.bilinear_resize_grad(self._shape, dy)


class PyramidPooling(Layer):
    """Adaptive average pooling over several grids, 1x1 reduction, upsample,
    concatenate with the input, then a 1x1 bottleneck back to ``c`` channels."""

    def __init__(self, c, bins, rng, dtype=np.float32):
        super().__init__()
        self.bins = tuple(bins)
        self.red_ch = max(1, c // 4)
        self.reduce = [
            self.add_child(f"reduce{b}", Conv2d(c, self.red_ch, 1, rng, bias=True, dtype=dtype)) for b in self.bins
        ]
        self.acts = [ReLU() for _ in self.bins]
        self.bottleneck = self.add_child(
            "bottleneck", ConvBNReLU(c + self.red_ch * len(self.bins), c, 1, rng, dtype=dtype)
        )

    def forward(self, x, train):
        h, w = x.shape[2:]
        self._shape = x.shape
        parts = [x]
        self._pooled_shapes = []
        for b, conv, act in zip(self.bins, self.reduce, self.acts):
            p = T.adaptive_avg_pool2d(x, b)
            r = act.forward(conv.forward(p, train), train)
            self._pooled_shapes.append(r.shape)
            parts.append(T.bilinear_resize(r, h, w))
        self._widths = [p.shape[1] for p in parts]
        return self.bottleneck.forward(T.concat(parts), train)

    def backward(self, dy):
        dcat = self.bottleneck.backward(dy)
        edges = np.cumsum([0] + self._widths)
        dx = dcat[:, : edges[1]].copy()
        for i, (b, conv, act) in enumerate(zip(self.bins, self.reduce, self.acts)):
            dpart = dcat[:, edges[i + 1] : edges[i + 2]]
            dr = T.bilinear_resize_grad(self._pooled_shapes[i], dpart)
            dp = conv.backward(act.backward(dr))
            dx += T.adaptive_avg_pool2d_grad(self._shape, dp)
        return dx
