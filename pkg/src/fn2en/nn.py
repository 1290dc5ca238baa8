"""Networks as ordered layer descriptors plus a named parameter store.

A :class:`Network` is plain data: a list of layer dicts (``kind``, ``name``
and kind-specific hyperparameters), a ``{"<layer>.weight": Tensor}``
parameter store and the per-sample input shape.  The same container backs
the student expression net, the frozen teacher, and anything loaded from a
checkpoint, which is why the layer list doubles as the checkpoint's
architecture descriptor.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, UnknownTapError
from .tensor import (
    Tensor,
    conv2d,
    conv_output_size,
    deconv2d,
    dropout,
    flatten,
    linear,
    maxpool2d,
    no_grad,
    pool_output_size,
    relu,
)

FC_INIT_STD = 0.01


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def layer_param_shapes(layer):
    kind = layer["kind"]
    if kind == "conv":
        k = layer["k"]
        return {"weight": (layer["out"], layer["in"], k, k), "bias": (layer["out"],)}
    if kind == "deconv":
        k = layer["k"]
        return {"weight": (layer["in"], layer["out"], k, k), "bias": (layer["out"],)}
    if kind == "linear":
        return {"weight": (layer["out"], layer["in"]), "bias": (layer["out"],)}
    return {}


def _out_shape(layer, shape):
    kind = layer["kind"]
    if kind in ("relu", "dropout"):
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if shape != (layer["in"],):
            raise ShapeError(f"{layer['name']}: expects {layer['in']} features, got {shape}")
        return (layer["out"],)
    if len(shape) != 3:
        raise ShapeError(f"{layer['name']}: expects a CxHxW map, got {shape}")
    c, h, w = shape
    if kind == "maxpool":
        return (c, pool_output_size(h, layer["k"], layer["stride"]), pool_output_size(w, layer["k"], layer["stride"]))
    if c != layer["in"]:
        raise ShapeError(f"{layer['name']}: expects {layer['in']} channels, got {c}")
    k, s = layer["k"], layer["stride"]
    if kind == "conv":
        p = layer["padding"]
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"{layer['name']}: {k}x{k} kernel does not fit a {h}x{w} map")
        return (layer["out"], conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))
    if kind == "deconv":
        return (layer["out"], (h - 1) * s + k, (w - 1) * s + k)
    raise ConfigError(f"unknown layer kind {kind!r}")


def infer_shapes(layers, input_shape):
    """Per-sample output shape of every layer, in order."""
    shapes, shape = {}, tuple(input_shape)
    for layer in layers:
        shape = _out_shape(layer, shape)
        shapes[layer["name"]] = shape
    return shapes


def count_parameters(layers):
    return sum(int(np.prod(s)) for layer in layers for s in layer_param_shapes(layer).values())


class Network:
    """Ordered layers, parameter store and named activation taps."""

    def __init__(self, layers, params, input_shape, meta=None):
        self.layers = [dict(layer) for layer in layers]
        self.params = dict(params)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.meta = dict(meta or {})
        names = [layer["name"] for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        for layer in self.layers:
            for pname, pshape in layer_param_shapes(layer).items():
                key = f"{layer['name']}.{pname}"
                if key not in self.params:
                    raise ConfigError(f"missing parameter {key}")
                if tuple(self.params[key].shape) != pshape:
                    raise ShapeError(f"parameter {key} has shape {self.params[key].shape}, expected {pshape}")

    @property
    def layer_names(self):
        return [layer["name"] for layer in self.layers]

    @property
    def dtype(self):
        for t in self.params.values():
            return t.dtype
        return np.dtype(np.float32)

    @property
    def has_head(self):
        return bool(self.meta.get("head", False))

    @property
    def feature_layer(self):
        return self.meta.get("feature_layer", self.layers[-1]["name"])

    def shapes(self, input_shape=None):
        return infer_shapes(self.layers, input_shape or self.input_shape)

    def tap_shape(self, tap, input_shape=None):
        shapes = self.shapes(input_shape)
        if tap not in shapes:
            raise UnknownTapError(f"unknown tap {tap!r}; available: {list(shapes)}")
        return shapes[tap]

    def num_parameters(self):
        return sum(t.size for t in self.params.values())

    def trainable(self):
        return [(name, t) for name, t in self.params.items() if t.requires_grad]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def _layer(self, layer, x, train, rng):
        kind, name, p = layer["kind"], layer["name"], self.params
        if kind == "conv":
            return conv2d(x, p[name + ".weight"], p[name + ".bias"], layer["stride"], layer["padding"])
        if kind == "relu":
            return relu(x)
        if kind == "maxpool":
            return maxpool2d(x, layer["k"], layer["stride"])
        if kind == "deconv":
            return deconv2d(x, p[name + ".weight"], p[name + ".bias"], layer["stride"])
        if kind == "flatten":
            return flatten(x)
        if kind == "dropout":
            return dropout(x, layer["rate"], rng, train)
        if kind == "linear":
            return linear(x, p[name + ".weight"], p[name + ".bias"])
        raise ConfigError(f"unknown layer kind {kind!r}")

    def _input(self, x):
        if isinstance(x, Tensor):
            if x.requires_grad or x.dtype == self.dtype:
                return x
            return Tensor(x.data.astype(self.dtype))
        return Tensor(np.asarray(x, dtype=self.dtype))

    def forward(self, x, train=False, rng=None, until=None):
        """Run the layers on an N x C x H x W batch, optionally stopping after ``until``."""
        if until is not None and until not in self.layer_names:
            raise UnknownTapError(f"unknown layer {until!r}")
        x = self._input(x)
        for layer in self.layers:
            x = self._layer(layer, x, train, rng)
            if layer["name"] == until:
                break
        return x

    __call__ = forward

    def activations(self, x, taps, train=False, rng=None):
        """Activations at each named tap; computation stops at the deepest one."""
        taps = list(taps)
        missing = [t for t in taps if t not in self.layer_names]
        if missing:
            raise UnknownTapError(f"unknown tap(s) {missing}; available: {self.layer_names}")
        wanted, out = set(taps), {}
        x = self._input(x)
        for layer in self.layers:
            x = self._layer(layer, x, train, rng)
            if layer["name"] in wanted:
                out[layer["name"]] = x
                if len(out) == len(wanted):
                    break
        return out

    def features(self, x, train=False, rng=None):
        return self.forward(x, train=train, rng=rng, until=self.feature_layer)

    def copy(self):
        params = {}
        for k, t in self.params.items():
            params[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
        return Network(self.layers, params, self.input_shape, copy.deepcopy(self.meta))

    def astype(self, dtype):
        net = self.copy()
        for k, t in net.params.items():
            net.params[k] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
        return net

    def descriptor(self):
        return {"input_shape": list(self.input_shape), "layers": self.layers, "meta": self.meta}

    @classmethod
    def from_descriptor(cls, desc, arrays, trainable=True):
        layers = desc["layers"]
        params = {}
        for layer in layers:
            for pname in layer_param_shapes(layer):
                key = f"{layer['name']}.{pname}"
                if key not in arrays:
                    raise ConfigError(f"checkpoint lacks parameter {key}")
                params[key] = Tensor(np.array(arrays[key]), requires_grad=trainable, name=key)
        return cls(layers, params, desc["input_shape"], desc.get("meta"))

    def architecture_hash(self):
        """Digest of the convolutional trunk, used to refuse mismatched resumes."""
        trunk = []
        for layer in self.layers:
            trunk.append(layer)
            if layer["name"] == self.feature_layer:
                break
        blob = json.dumps({"input_shape": self.input_shape, "trunk": trunk}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def checksum(self):
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key].data).tobytes())
        return h.hexdigest()


# -- builders ---------------------------------------------------------------
def _conv(name, c_in, c_out, k=3, padding=1):
    return {"kind": "conv", "name": name, "in": c_in, "out": c_out, "k": k, "stride": 1, "padding": padding}


def _init_params(layers, rng, dtype, params=None, fc_std=FC_INIT_STD):
    """Fan-in scaled Gaussian for conv/deconv kernels, N(0, fc_std^2) for FC weights, zero biases.

    ``fc_std="fan_in"`` applies the fan-in rule to FC weights too.
    """
    params = dict(params or {})
    for layer in layers:
        for pname, shape in layer_param_shapes(layer).items():
            key = f"{layer['name']}.{pname}"
            if key in params:
                continue
            if pname == "bias":
                data = np.zeros(shape, dtype=dtype)
            elif layer["kind"] == "linear":
                std = math.sqrt(2.0 / layer["in"]) if fc_std == "fan_in" else fc_std
                data = rng.normal(0.0, std, size=shape).astype(dtype)
            else:
                fan_in = layer["in"] * layer["k"] ** 2
                data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)
            params[key] = Tensor(data, requires_grad=True, name=key)
    return params


@dataclass
class ExpNetSpec:
    """Student architecture; ``scale`` shrinks every channel/FC width."""

    conv_channels: tuple = (64, 128, 256, 512, 512)
    adapter_channels: int | None = None
    fc_dim: int = 256
    num_classes: int = 8
    input_size: int = 224
    in_channels: int = 3
    dropout: float = 0.5
    scale: float = 1.0
    pool: tuple = field(default=(3, 2))

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.pool = tuple(self.pool)
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ConfigError(f"conv_channels must be a non-empty list of positive ints: {self.conv_channels}")
        for key in ("fc_dim", "num_classes", "input_size", "in_channels"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.adapter_channels is not None and self.adapter_channels < 1:
            raise ConfigError("adapter_channels must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    def _scaled(self, c):
        return max(1, int(round(c * self.scale)))

    @property
    def channels(self):
        return tuple(self._scaled(c) for c in self.conv_channels)

    @property
    def head_width(self):
        return self._scaled(self.fc_dim)

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["pool"] = list(self.pool)
        return d


def upsampler_geometry(student_size, teacher_size):
    """Stride and kernel of a deconvolution mapping ``student_size`` to ``teacher_size``."""
    if teacher_size < student_size:
        raise ConfigError(
            f"student features ({student_size}) are larger than the teacher tap ({teacher_size}); "
            "a deconvolution can only upsample"
        )
    if student_size == 1:
        return 1, teacher_size
    stride = max(1, (teacher_size - 1) // (student_size - 1))
    return stride, teacher_size - (student_size - 1) * stride


def build_expnet(spec, rng=None, teacher_shape=None, dtype=np.float32):
    """Convolutional trunk of the student: N x (conv3x3-relu-pool) then a 1x1 adapter.

    ``teacher_shape`` is the (C, H, W) of the teacher tap to regress onto;
    its channel count sizes the adapter when ``spec.adapter_channels`` is
    unset, and a spatial mismatch inserts a deconvolution upsampler.
    """
    rng = _rng(rng)
    layers, c_in = [], spec.in_channels
    k_pool, s_pool = spec.pool
    for i, c_out in enumerate(spec.channels, start=1):
        layers += [
            _conv(f"conv{i}", c_in, c_out),
            {"kind": "relu", "name": f"relu{i}"},
            {"kind": "maxpool", "name": f"pool{i}", "k": k_pool, "stride": s_pool},
        ]
        c_in = c_out
    adapter = spec.adapter_channels or (teacher_shape[0] if teacher_shape is not None else c_in)
    layers.append(_conv("adapter", c_in, adapter, k=1, padding=0))
    feature_layer = "adapter"

    input_shape = (spec.in_channels, spec.input_size, spec.input_size)
    _, h, w = infer_shapes(layers, input_shape)["adapter"]
    if teacher_shape is not None:
        tc, th, tw = teacher_shape
        if tc != adapter:
            raise ShapeError(f"adapter produces {adapter} channels but the teacher tap has {tc}")
        if (h, w) != (th, tw):
            sh, kh = upsampler_geometry(h, th)
            sw, kw = upsampler_geometry(w, tw)
            if (sh, kh) != (sw, kw):
                raise ConfigError("non-square upsampling is not supported")
            layers.append({"kind": "deconv", "name": "upsample", "in": adapter, "out": adapter, "k": kh, "stride": sh})
            feature_layer = "upsample"

    meta = {"role": "student", "feature_layer": feature_layer, "head": False, "spec": spec.to_dict()}
    return Network(layers, _init_params(layers, rng, dtype), input_shape, meta)


def head_layers(in_features, spec):
    return [
        {"kind": "flatten", "name": "flatten"},
        {"kind": "dropout", "name": "dropout", "rate": spec.dropout},
        {"kind": "linear", "name": "fc", "in": in_features, "out": spec.head_width},
        {"kind": "relu", "name": "relu_fc"},
        {"kind": "linear", "name": "classifier", "in": spec.head_width, "out": spec.num_classes},
    ]


def attach_head(net, spec, rng=None):
    """Copy of ``net`` with a freshly initialised FC head; trunk parameters are copied bit-exactly."""
    if net.has_head:
        raise ContractError("a classification head is already attached")
    rng = _rng(rng)
    feat = net.shapes()[net.feature_layer]
    layers = net.layers + head_layers(int(np.prod(feat)), spec)
    trunk = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in net.params.items()}
    params = _init_params(layers, rng, net.dtype, trunk)
    meta = copy.deepcopy(net.meta)
    meta.update(head=True, num_classes=spec.num_classes)
    return Network(layers, params, net.input_shape, meta)


def build_teacher(
    block_channels,
    fc_dims,
    num_outputs,
    input_shape,
    rng=None,
    pool=(3, 2),
    dropout_rate=0.5,
    dtype=np.float32,
    fc_std=FC_INIT_STD,
):
    """VGG-style network: blocks of 3x3 convs each closed by ``pool{b}``, then FC layers.

    With five blocks and two hidden FC layers the names match VGG-16
    (``pool4``, ``pool5``, ``fc6``, ``fc7``, output ``fc8``).  ``num_outputs``
    of ``None`` stops after the last pooling layer.
    """
    rng = _rng(rng)
    layers, c_in = [], input_shape[0]
    for b, convs in enumerate(block_channels, start=1):
        for i, c_out in enumerate(convs, start=1):
            layers += [_conv(f"conv{b}_{i}", c_in, c_out), {"kind": "relu", "name": f"relu{b}_{i}"}]
            c_in = c_out
        layers.append({"kind": "maxpool", "name": f"pool{b}", "k": pool[0], "stride": pool[1]})
    n = len(block_channels)
    if num_outputs is not None:
        width = int(np.prod(infer_shapes(layers, input_shape)[f"pool{n}"]))
        layers.append({"kind": "flatten", "name": "flatten"})
        for j, d in enumerate(fc_dims, start=n + 1):
            layers += [
                {"kind": "linear", "name": f"fc{j}", "in": width, "out": d},
                {"kind": "relu", "name": f"relu{j}"},
                {"kind": "dropout", "name": f"drop{j}", "rate": dropout_rate},
            ]
            width = d
        layers.append({"kind": "linear", "name": f"fc{n + len(fc_dims) + 1}", "in": width, "out": num_outputs})
    meta = {"role": "teacher", "head": num_outputs is not None}
    return Network(layers, _init_params(layers, rng, dtype, fc_std=fc_std), input_shape, meta)


VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def build_vgg16_teacher(rng=None, with_fc=False, input_size=224, dtype=np.float32):
    """VGG-16 layout (2x2/2 pooling); the FC stack is 124M parameters so it is opt-in."""
    fc, out = ((4096, 4096), 1000) if with_fc else ((), None)
    return build_teacher(VGG16_BLOCKS, fc, out, (3, input_size, input_size), rng, pool=(2, 2), dtype=dtype)


def vgg16_layers():
    """Full VGG-16 layer list, for static parameter counting without allocation."""
    layers, c_in = [], 3
    for b, convs in enumerate(VGG16_BLOCKS, start=1):
        for i, c in enumerate(convs, start=1):
            layers += [_conv(f"conv{b}_{i}", c_in, c), {"kind": "relu", "name": f"relu{b}_{i}"}]
            c_in = c
        layers.append({"kind": "maxpool", "name": f"pool{b}", "k": 2, "stride": 2})
    layers += [
        {"kind": "flatten", "name": "flatten"},
        {"kind": "linear", "name": "fc6", "in": 512 * 7 * 7, "out": 4096},
        {"kind": "linear", "name": "fc7", "in": 4096, "out": 4096},
        {"kind": "linear", "name": "fc8", "in": 4096, "out": 1000},
    ]
    return layers


def replace_output_layer(net, num_outputs, rng=None, fc_std=FC_INIT_STD):
    """Copy of ``net`` whose final linear layer is re-initialised with ``num_outputs`` units."""
    rng = _rng(rng)
    last = net.layers[-1]
    if last["kind"] != "linear":
        raise ContractError("network does not end in a linear layer")
    layers = net.layers[:-1] + [dict(last, out=num_outputs)]
    keep = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in net.params.items()
            if not k.startswith(last["name"] + ".")}
    return Network(layers, _init_params(layers, rng, net.dtype, keep, fc_std), net.input_shape, copy.deepcopy(net.meta))


class TeacherNet:
    """Frozen feature function: parameters are read-only and never require a gradient."""

    def __init__(self, network):
        net = network.copy()
        for t in net.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.setflags(write=False)
        net.meta["role"] = "teacher"
        self.network = net
        self._checksum = net.checksum()

    @property
    def taps(self):
        return self.network.layer_names

    def tap_shape(self, tap, input_shape=None):
        return self.network.tap_shape(tap, input_shape)

    def features(self, images, tap):
        single = np.ndim(images.data if isinstance(images, Tensor) else images) == 3
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        if single:
            x = x[None]
        with no_grad():
            out = self.network.activations(x, [tap])[tap]
        return Tensor(out.data[0]) if single else out

    def checksum(self):
        return self.network.checksum()

    def verify_frozen(self):
        return self.checksum() == self._checksum


def teacher_features(teacher, image, tap):
    """Gradient-free teacher activation at ``tap`` for one image or a batch."""
    return teacher.features(image, tap)
