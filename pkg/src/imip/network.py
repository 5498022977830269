"""Fully convolutional multi-channel detector.

Every layer is a 3x3 stride-1 convolution followed by a leaky ReLU, except the
last one which ends in a sigmoid. Full images run with zero padding so the
response stack has the input resolution; training patches of the receptive
field size run unpadded and collapse to a single output pixel.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .numerics import (
    ConvLayerParams,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_grad,
    sigmoid,
)

PARAMS_MAGIC = b"IMIP"
PARAMS_VERSION = 1
_DTYPES = {4: np.float32, 8: np.float64}
# input normalization tags stored in the parameter file
NORM_UNIT_RANGE = 0


@dataclass(frozen=True)
class NetworkConfig:
    n_channels: int = 128
    depth: int = 14
    intermediate_channels: tuple = None
    leaky_slope: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.intermediate_channels is None:
            # the 256-channel variant doubles every intermediate width
            plan = (128, 256) if self.n_channels == 256 else (64, 128)
            object.__setattr__(self, "intermediate_channels", plan)
        else:
            object.__setattr__(self, "intermediate_channels", tuple(int(c) for c in self.intermediate_channels))

    def layer_channels(self):
        """(c_in, c_out) per layer."""
        first, second = self.intermediate_channels
        outs = []
        for i in range(self.depth - 1):
            outs.append(first if i < self.depth // 2 else second)
        outs.append(self.n_channels)
        ins = [1] + outs[:-1]
        return list(zip(ins, outs))


def receptive_field(config: NetworkConfig) -> int:
    return 1 + 2 * config.depth


@dataclass
class NetworkParams:
    config: NetworkConfig
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.layers) != self.config.depth:
            raise ShapeError(f"{len(self.layers)} layers for depth {self.config.depth}")
        for i, ((cin, cout), layer) in enumerate(zip(self.config.layer_channels(), self.layers)):
            if (layer.c_in, layer.c_out) != (cin, cout):
                raise ShapeError(f"layer {i} is {layer.c_in}->{layer.c_out}, config says {cin}->{cout}")

    @property
    def receptive_field(self):
        return receptive_field(self.config)

    @property
    def dtype(self):
        return self.layers[0].kernels.dtype

    def arrays(self):
        """Flat parameter list: kernels and bias of every layer, in order."""
        out = []
        for layer in self.layers:
            out += [layer.kernels, layer.bias]
        return out

    def array_names(self):
        names = []
        for i in range(len(self.layers)):
            names += [f"layer{i}.kernels", f"layer{i}.bias"]
        return names

    def with_arrays(self, arrays):
        layers = [ConvLayerParams(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(self.layers))]
        return NetworkParams(self.config, layers)

    def astype(self, dtype):
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


def init_weights(config: NetworkConfig) -> NetworkParams:
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    layers = []
    for cin, cout in config.layer_channels():
        std = np.sqrt(2.0 / (9 * cin))
        k = rng.normal(0.0, std, size=(3, 3, cin, cout)).astype(dtype)
        layers.append(ConvLayerParams(k, np.zeros(cout, dtype=dtype)))
    return NetworkParams(config, layers)


def _run(x, params, padding, keep=False):
    slope = params.config.leaky_slope
    cache = []
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        z = conv2d_forward(x, layer, padding)
        if keep:
            cache.append((x, z))
        x = sigmoid(z) if i == last else leaky_relu(z, slope)
    return x, cache


def forward_full(image, params: NetworkParams):
    """Response stack (H, W, n) of a grayscale image with intensities in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"expected a grayscale H x W image, got shape {image.shape}")
    r = params.receptive_field
    if min(image.shape) < r:
        raise ShapeError(f"image {image.shape} is smaller than the receptive field {r}")
    x = image.astype(params.dtype)[None, :, :, None]
    out, _ = _run(x, params, "zero_same")
    return out[0]


def forward_patches(patches, params: NetworkParams, keep_cache=False):
    """Responses of m r x r patches, shape (m, 1, 1, n).

    With ``keep_cache`` the activations needed by :func:`backward_patches`
    are returned as a second value.
    """
    patches = np.asarray(patches)
    r = params.receptive_field
    if patches.ndim != 4 or patches.shape[1:] != (r, r, 1):
        raise ShapeError(f"patches must be (m, {r}, {r}, 1), got {patches.shape}")
    n = params.config.n_channels
    if patches.shape[0] == 0:
        out = np.zeros((0, 1, 1, n), dtype=params.dtype)
        return (out, []) if keep_cache else out
    out, cache = _run(patches.astype(params.dtype), params, "valid", keep=keep_cache)
    return (out, cache) if keep_cache else out


def backward_patches(cache, params: NetworkParams, grad_out):
    """Parameter gradients (flat list matching ``params.arrays()``) given dLoss/dResponses."""
    slope = params.config.leaky_slope
    grads = [None] * (2 * len(params.layers))
    if not cache:
        return [np.zeros_like(a) for a in params.arrays()]
    g = grad_out
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        x, z = cache[i]
        if i == last:
            s = sigmoid(z)
            g = g * s * (1.0 - s)
        else:
            g = g * leaky_relu_grad(z, slope)
        gx, gk, gb = conv2d_backward(x, params.layers[i], g, "valid")
        grads[2 * i] = gk
        grads[2 * i + 1] = gb
        g = gx
    return grads


_CONFIG_STRUCT = struct.Struct("<IIIIdQBB")


def save_params(params: NetworkParams, path):
    c = params.config
    dt = np.dtype(params.dtype)
    header = _CONFIG_STRUCT.pack(
        c.n_channels, c.depth, c.intermediate_channels[0], c.intermediate_channels[1],
        c.leaky_slope, c.seed & 0xFFFFFFFFFFFFFFFF, dt.itemsize, NORM_UNIT_RANGE,
    )
    le = dt.newbyteorder("<")
    payload = b"".join(a.astype(le).tobytes(order="C") for a in params.arrays())
    binio.write_container(path, PARAMS_MAGIC, PARAMS_VERSION, header, payload)


def load_params(path) -> NetworkParams:
    header, payload = binio.read_container(path, PARAMS_MAGIC, PARAMS_VERSION)
    if len(header) != _CONFIG_STRUCT.size:
        raise binio.ContainerError(f"{path}: config block has {len(header)} bytes")
    n, depth, first, second, slope, seed, width, norm = _CONFIG_STRUCT.unpack(header)
    if width not in _DTYPES:
        raise binio.ContainerError(f"{path}: unsupported scalar width {width}")
    if norm != NORM_UNIT_RANGE:
        raise binio.ContainerError(f"{path}: unknown input normalization tag {norm}")
    dtype = np.dtype(_DTYPES[width])
    config = NetworkConfig(n, depth, (first, second), slope, seed, dtype.name)
    arrays, pos = [], 0
    le = dtype.newbyteorder("<")
    for cin, cout in config.layer_channels():
        for shape in ((3, 3, cin, cout), (cout,)):
            count = int(np.prod(shape))
            nbytes = count * width
            if pos + nbytes > len(payload):
                raise binio.TruncatedFileError(f"{path}: payload too short for layer tensors")
            a = np.frombuffer(payload, dtype=le, count=count, offset=pos).reshape(shape)
            arrays.append(a.astype(dtype))
            pos += nbytes
    if pos != len(payload):
        raise binio.ContainerError(f"{path}: {len(payload) - pos} unexpected payload bytes")
    layers = [ConvLayerParams(arrays[2 * i], arrays[2 * i + 1]) for i in range(depth)]
    return NetworkParams(config, layers)
