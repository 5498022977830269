"""Small numpy kernels the detector is built on.

Tensors are NHWC (batch, height, width, channels). Everything here is a pure
function of its arguments; dtype follows the inputs, so float64 inputs give a
float64 path for gradient checks and float32 inputs give the training path.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PADDINGS = ("valid", "zero_same")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ConvLayerParams:
    kernels: np.ndarray  # (3, 3, c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[:2] != (3, 3):
            raise ShapeError(f"kernels must be (3, 3, c_in, c_out), got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.kernels.shape[3]}")

    @property
    def c_in(self):
        return self.kernels.shape[2]

    @property
    def c_out(self):
        return self.kernels.shape[3]


def _check_input(x, params, padding):
    if padding not in PADDINGS:
        raise ValueError(f"unknown padding {padding!r}")
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC tensor, got shape {x.shape}")
    if x.shape[3] != params.c_in:
        raise ShapeError(f"input has {x.shape[3]} channels, layer expects {params.c_in}")
    if padding == "valid" and (x.shape[1] < 3 or x.shape[2] < 3):
        raise ShapeError(f"valid convolution needs H, W >= 3, got {x.shape[1:3]}")


def _windows(x):
    # (B, H-2, W-2, C, 3, 3) view, no copy
    return sliding_window_view(x, (3, 3), axis=(1, 2))


def conv_output_shape(shape, c_out, padding):
    b, h, w, _ = shape
    if padding == "valid":
        return (b, h - 2, w - 2, c_out)
    return (b, h, w, c_out)


def conv2d_forward(x, params: ConvLayerParams, padding="valid"):
    """Stride-1 3x3 cross-correlation plus bias."""
    _check_input(x, params, padding)
    if padding == "zero_same":
        x = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = _windows(x)
    # contract over (C, ky, kx); kernels are stored (ky, kx, C, O)
    k = params.kernels.transpose(2, 0, 1, 3)
    out = np.tensordot(win, k, axes=([3, 4, 5], [0, 1, 2]))
    out += params.bias
    return out


def conv2d_backward(x, params: ConvLayerParams, upstream, padding="valid"):
    """Gradients of ``sum(upstream * conv2d_forward(x))``.

    Returns ``(grad_input, grad_kernels, grad_bias)``.
    """
    _check_input(x, params, padding)
    expected = conv_output_shape(x.shape, params.c_out, padding)
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient has shape {upstream.shape}, expected {expected}")

    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))) if padding == "zero_same" else x
    win = _windows(xp)  # (B, Ho, Wo, C, 3, 3)
    gk = np.tensordot(win, upstream, axes=([0, 1, 2], [0, 1, 2]))  # (C, 3, 3, O)
    grad_kernels = gk.transpose(1, 2, 0, 3)
    grad_bias = upstream.sum(axis=(0, 1, 2))

    # full correlation of the upstream gradient with the flipped kernels
    up = np.pad(upstream, ((0, 0), (2, 2), (2, 2), (0, 0)))
    uwin = _windows(up)  # (B, Hp, Wp, O, 3, 3)
    kf = params.kernels[::-1, ::-1].transpose(3, 0, 1, 2)  # (O, 3, 3, C)
    gxp = np.tensordot(uwin, kf, axes=([3, 4, 5], [0, 1, 2]))
    grad_input = gxp[:, 1:-1, 1:-1, :] if padding == "zero_same" else gxp
    return grad_input, grad_kernels, grad_bias


def leaky_relu(x, slope=0.1):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope=0.1):
    # derivative at exactly zero is taken as the slope
    return np.where(x > 0, 1.0, slope).astype(x.dtype, copy=False)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(params, grads, state: AdamState, names=None):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are equal-length lists of arrays. Inputs are not
    modified; new parameter arrays and a new state are returned.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter blocks but {len(grads)} gradients")
    m_prev = state.first_moment or [np.zeros_like(p) for p in params]
    v_prev = state.second_moment or [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"parameter block {i}: shape {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"block {i}"
            raise NonFiniteError(f"non-finite gradient in parameter {label}")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_params.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    new_state = AdamState(
        lr=state.lr,
        beta1=b1,
        beta2=b2,
        epsilon=state.epsilon,
        step_count=t,
        first_moment=new_m,
        second_moment=new_v,
    )
    return new_params, new_state


def finite_difference_check(func, point, grad, h=1e-5):
    """Worst componentwise relative error between ``grad`` and central differences of ``func``.

    ``func(x)`` returns a scalar; ``grad`` is the analytic gradient at
    ``point``. A component's relative error uses ``max(|analytic|, |numeric|,
    1e-8)`` as denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if grad.size != x.size:
        raise ShapeError(f"gradient has {grad.size} entries, point has {x.size}")
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(func(x.copy()))
        flat[i] = old - h
        fm = float(func(x.copy()))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function value is not finite near component {i}")
        num = (fp - fm) / (2.0 * h)
        err = abs(grad[i] - num) / max(abs(grad[i]), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
