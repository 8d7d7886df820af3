# src/msdpn/autodiff.py
"""
Minimal reverse-mode automatic differentiation on NumPy.

Tensors store their value in the active precision (float32 unless changed with
`precision`). Reductions inside the operators accumulate in float64 and the
result is cast back, so forward values and gradients are reproducible
bit for bit for identical inputs. Gradients are float64 arrays.

Each operator builds its output node and, while gradients are enabled, attaches
a closure that pushes the output gradient to its inputs.
"""

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import GraphError, ShapeError

ArrayLike = Union[np.ndarray, float, Sequence[float]]


class _Context(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32
        self.recorder: Optional[List[bytes]] = None


_ctx = _Context()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference, evaluation, finite differences)."""
    previous, _ctx.grad_enabled = _ctx.grad_enabled, False
    try:
        yield
    finally:
        _ctx.grad_enabled = previous


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Storage dtype for tensors created inside the block (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported precision {dtype}; use float32 or float64.")
    previous, _ctx.dtype = _ctx.dtype, dtype
    try:
        yield
    finally:
        _ctx.dtype = previous


def current_dtype():
    return _ctx.dtype


def _record_branch(pattern: np.ndarray) -> None:
    # non-smooth ops report which branch each element took
    if _ctx.recorder is not None:
        _ctx.recorder.append(np.ascontiguousarray(pattern).tobytes())


class Tensor:
    """A node of the computation graph: value, parents, gradient slot."""

    def __init__(self, data: ArrayLike, parents: Tuple["Tensor", ...] = (), op: str = "",
                 name: str = "", requires_grad: bool = False):
        self.data = np.array(data, dtype=_ctx.dtype)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"


class Parameter(Tensor):
    """Learnable leaf tensor; its gradient accumulates until zero_grad()."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(data, name=name, requires_grad=True)


def constant(data: ArrayLike, name: str = "") -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, name=name)


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def _make(value: np.ndarray, parents: Tuple[Tensor, ...], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = _ctx.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(value, parents if needs else (), op, requires_grad=needs)
    if needs:
        out._backward = backward_fn
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tensor.shape:
        grad = grad.reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Reverse-mode sweep from a scalar loss. Parameters accumulate gradients;
    the same graph can only be differentiated once.

    Raises:
        GraphError: For a non-scalar root or a repeated backward.
    """
    if loss.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}.")
    if loss._consumed:
        raise GraphError("backward() was already called on this graph; rebuild it first.")
    if not loss.requires_grad:
        raise GraphError("Loss does not depend on any tensor that requires a gradient.")
    loss._consumed = True
    nodes = _topological_order(loss)
    for node in nodes:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones(loss.shape, dtype=np.float64)
    for node in reversed(nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --- elementwise and structural ops ---

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ.")
    value = a.data.astype(np.float64) + b.data.astype(np.float64)

    def _backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(value, (a, b), "add", _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def _backward(g):
        _accumulate(a, g * factor)

    return _make(a.data.astype(np.float64) * factor, (a,), "scale", _backward)


def sum_all(a: Tensor) -> Tensor:
    def _backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, dtype=np.float64), (a,), "sum", _backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    _record_branch(active)

    def _backward(g):
        _accumulate(x, g * active)

    return _make(np.where(active, x.data, 0), (x,), "relu", _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}.")
    split = a.shape[1]

    def _backward(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat", _backward)


def unpool_zero_x2(x: Tensor) -> Tensor:
    """Each value goes to the top-left of its 2×2 output block; the rest is zero."""
    n, c, h, w = _check_nchw(x, "unpool_zero_x2")
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.data.dtype)
    out[:, :, ::2, ::2] = x.data

    def _backward(g):
        _accumulate(x, g[:, :, ::2, ::2])

    return _make(out, (x,), "unpool", _backward)


def _bilinear_matrix(size: int) -> np.ndarray:
    """(2·size × size) half-pixel interpolation weights for ×2 upsampling."""
    weights = np.zeros((2 * size, size), dtype=np.float64)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        weights[o, i0] += 1.0 - frac
        weights[o, i1] += frac
    return weights


def upsample_bilinear_x2(x: Tensor) -> Tensor:
    n, c, h, w = _check_nchw(x, "upsample_bilinear_x2")
    rows, cols = _bilinear_matrix(h), _bilinear_matrix(w)
    tmp = np.tensordot(x.data.astype(np.float64), cols, axes=([3], [1]))      # N,C,H,2W
    value = np.tensordot(rows, tmp, axes=([1], [2])).transpose(1, 2, 0, 3)    # N,C,2H,2W

    def _backward(g):
        g_cols = np.tensordot(g, cols, axes=([3], [0]))                       # N,C,2H,W
        _accumulate(x, np.tensordot(g_cols, rows, axes=([2], [0])).transpose(0, 1, 3, 2))

    return _make(value, (x,), "upsample", _backward)


# --- convolution / pooling / normalisation ---

def _check_nchw(x: Tensor, op: str) -> Tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected N×C×H×W input, got {x.shape}.")
    return x.shape


def _output_size(size: int, k: int, stride: int, pad: int, floor_mode: bool, op: str) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{op}: kernel {k} larger than padded input {size + 2 * pad}.")
    if span % stride and not floor_mode:
        raise ShapeError(f"{op}: output size ({size}+2·{pad}-{k})/{stride}+1 is not integral.")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0,
           floor_mode: bool = False) -> Tensor:
    """
    2-D cross-correlation. x: N×C×H×W, weight: O×C×k×k, bias: O.

    With floor_mode the trailing rows/cols that do not fill a whole window are
    dropped instead of raising.
    """
    n, c, h, w = _check_nchw(x, "conv2d")
    if weight.data.ndim != 4 or weight.shape[1] != c or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight {weight.shape} does not fit input {x.shape}.")
    o, k = weight.shape[0], weight.shape[2]
    if k not in (1, 3, 5, 7):
        raise ShapeError(f"conv2d: kernel size {k} not in (1, 3, 5, 7).")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels.")
    ho = _output_size(h, k, stride, pad, floor_mode, "conv2d")
    wo = _output_size(w, k, stride, pad, floor_mode, "conv2d")

    padded = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    w64 = weight.data.astype(np.float64)
    value = np.tensordot(windows, w64, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        value = value + bias.data.astype(np.float64)[None, :, None, None]

    def _backward(g):
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            cols = np.tensordot(g, w64, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)  # N,C,Ho,Wo,k,k
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + stride * (ho - 1) + 1:stride,
                                j:j + stride * (wo - 1) + 1:stride] += cols[..., i, j]
            _accumulate(x, grad_padded[:, :, pad:pad + h, pad:pad + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(value, parents, "conv2d", _backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2, pad: int = 0, floor_mode: bool = False) -> Tensor:
    n, c, h, w = _check_nchw(x, "maxpool2d")
    ho = _output_size(h, k, stride, pad, floor_mode, "maxpool2d")
    wo = _output_size(w, k, stride, pad, floor_mode, "maxpool2d")
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, k * k)
    arg = np.argmax(flat, axis=-1)
    _record_branch(arg)
    value = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        grad_padded = np.zeros(padded.shape, dtype=np.float64)
        for q in range(k * k):
            i, j = divmod(q, k)
            grad_padded[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += np.where(arg == q, g, 0.0)
        _accumulate(x, grad_padded[:, :, pad:pad + h, pad:pad + w])

    return _make(value, (x,), "maxpool2d", _backward)


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer (mutated in train mode)."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats, training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    Batch normalisation over (N, H, W) per channel.

    Train mode normalises with batch moments (biased variance) and updates the
    running statistics (unbiased variance); eval mode uses the running statistics.
    """
    n, c, h, w = _check_nchw(x, "batchnorm2d")
    if gamma.shape != (c,) or beta.shape != (c,) or running.mean.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine parameters do not match {c} channels.")
    x64 = x.data.astype(np.float64)
    if training:
        mean = x64.mean(axis=(0, 2, 3))
        var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        count = n * h * w
        unbiased = var * count / (count - 1) if count > 1 else var
        running.mean[...] = (1 - momentum) * running.mean + momentum * mean
        running.var[...] = (1 - momentum) * running.var + momentum * unbiased
    else:
        mean = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    g64 = gamma.data.astype(np.float64)
    value = x_hat * g64[None, :, None, None] + beta.data.astype(np.float64)[None, :, None, None]

    def _backward(g):
        _accumulate(gamma, (g * x_hat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        d_hat = g * g64[None, :, None, None]
        if training:
            m = n * h * w
            dx = (inv_std[None, :, None, None] / m) * (
                m * d_hat
                - d_hat.sum(axis=(0, 2, 3))[None, :, None, None]
                - x_hat * (d_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None])
        else:
            dx = d_hat * inv_std[None, :, None, None]
        _accumulate(x, dx)

    return _make(value, (x, gamma, beta), "batchnorm2d", _backward)


# --- loss ---

def l1_masked(pred: Tensor, target, mask) -> Tensor:
    """
    (1/Σmask)·Σ mask·|target − pred|.

    Raises:
        ShapeError: If the three shapes differ.
        ValueError: If the mask is all zero.
    """
    target = np.asarray(_as_array(target), dtype=np.float64)
    mask = np.asarray(_as_array(mask), dtype=np.float64)
    if not (pred.shape == target.shape == mask.shape):
        raise ShapeError(f"l1_masked: shapes {pred.shape}, {target.shape}, {mask.shape} differ.")
    total = mask.sum()
    if total <= 0:
        raise ValueError("l1_masked: the mask selects no pixel.")
    diff = target - pred.data.astype(np.float64)
    sign = np.sign(diff) * mask
    _record_branch(sign)
    value = np.sum(mask * np.abs(diff)) / total

    def _backward(g):
        _accumulate(pred, -sign / total * g)

    return _make(value, (pred,), "l1_masked", _backward)


# --- verification ---

def gradcheck(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-3,
              max_samples: int = 64, seed: int = 0) -> float:
    """
    Compares the analytic gradient of `param` with central differences.

    `loss_fn` rebuilds the graph and returns a scalar. Up to `max_samples`
    coordinates are drawn without replacement; a coordinate is skipped when the
    two perturbations drive a non-smooth op (relu, max-pool, L1) down different
    branches.

    Returns:
        float: max |g_ad − g_fd| / max(1e-6, |g_ad| + |g_fd|) over the checked
               coordinates (0.0 when every sample was skipped).
    """
    param.zero_grad()
    backward(loss_fn())
    analytic = np.zeros(param.shape) if param.grad is None else param.grad.reshape(param.shape)
    analytic = analytic.reshape(-1)

    flat = param.data.reshape(-1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for idx in rng.permutation(flat.size):
        if checked >= max_samples:
            break
        original = flat[idx]
        losses, patterns, points = [], [], []
        for direction in (1.0, -1.0):
            flat[idx] = original + direction * eps
            points.append(float(flat[idx]))
            previous, _ctx.recorder = _ctx.recorder, []
            try:
                with no_grad():
                    losses.append(float(np.float64(loss_fn().data.reshape(-1)[0])))
                patterns.append(_ctx.recorder)
            finally:
                _ctx.recorder = previous
        flat[idx] = original
        if patterns[0] != patterns[1]:
            continue
        numeric = (losses[0] - losses[1]) / (points[0] - points[1])
        exact = float(analytic[idx])
        worst = max(worst, abs(exact - numeric) / max(1e-6, abs(exact) + abs(numeric)))
        checked += 1
    return worst
