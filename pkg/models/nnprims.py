"""Differentiable tensor primitives over numpy arrays.

A Tensor records the operation that produced it; calling backward() on a scalar
result walks the graph in reverse topological order and accumulates gradients.
Parameters live in a ParamStore and enter the graph through ParamStore.leaf(), which
routes their gradients back into the store entry.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from utils.errors import (InvalidParameterError, MissingGradientError, NonDeterministicComputationError,
                          NonFiniteError, ShapeError)
from utils.rng import RngStream

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Enable or disable NaN/Inf detection after every operation"""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """Array value plus the bookkeeping needed for reverse-mode differentiation.

    Attributes:
        data (np.ndarray): Value. Treated as immutable by every op.
        grad (Optional[np.ndarray]): Gradient, filled for leaves by backward().
        requires_grad (bool): Whether gradients flow to this tensor.
    """

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn: Optional[Callable] = None,
                 requires_grad: bool = False, sink: Optional["ParamEntry"] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.sink = sink

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient"""
        if grad is None:
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                if node.sink is not None:
                    node.sink.accumulate(g)
                continue
            if node.backward_fn is None:
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def _topological_order(self) -> List["Tensor"]:
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def __repr__(self):
        return "Tensor(shape={}, dtype={}, requires_grad={})".format(self.shape, self.dtype, self.requires_grad)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values produced by {}".format(op))
    return Tensor(data, parents, backward_fn)


class ActivationPattern:
    """Records ReLU masks and max-pool winners so later passes can replay them.

    Replaying freezes the network on one linear piece, so finite differences
    evaluate exactly the function whose gradient backprop computed.
    """

    def __init__(self):
        self._decisions: List[np.ndarray] = []
        self._cursor = 0
        self.recorded = False

    def decide(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if not self.recorded:
            decision = compute()
            self._decisions.append(decision)
            return decision
        if self._cursor >= len(self._decisions):
            raise NonDeterministicComputationError("replayed pass made more activation decisions than recorded")
        decision = self._decisions[self._cursor]
        self._cursor += 1
        return decision

    def finish_pass(self) -> None:
        self.recorded = True
        self._cursor = 0


def freeze_activations(loss_fn: Callable[["ParamStore", ActivationPattern], Tensor]) -> Callable[["ParamStore"], Tensor]:
    """Wrap loss_fn(store, pattern) so every call replays the first call's activation pattern"""
    pattern = ActivationPattern()

    def frozen(store: "ParamStore") -> Tensor:
        loss = loss_fn(store, pattern)
        pattern.finish_pass()
        return loss
    return frozen


# Operations

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of (B, C, H, W) with (O, C, k, k) weights"""
    if stride < 1:
        raise InvalidParameterError("stride must be >= 1")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4D input and weights, got {} and {}".format(x.shape, weight.shape))
    batch, channels, height, width = x.shape
    out_channels, in_channels, k, k2 = weight.shape
    if in_channels != channels or k != k2:
        raise ShapeError("weights {} do not fit input {}".format(weight.shape, x.shape))
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("kernel {} larger than padded input {}".format(k, x.shape))
    padded = _pad(x.data, padding)
    windows = _windows(padded, k, stride, out_h, out_w)
    out = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        grad_x = grad_w = grad_b = None
        if weight.requires_grad:
            grad_w = np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    contribution = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[:, :, i:i + stride * (out_h - 1) + 1:stride,
                                j:j + stride * (out_w - 1) + 1:stride] += contribution.transpose(0, 3, 1, 2)
            grad_x = _unpad(grad_padded, padding)
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel cross-correlation with (C, 1, k, k) weights"""
    batch, channels, height, width = x.shape
    if weight.shape[0] != channels or weight.shape[1] != 1:
        raise ShapeError("depthwise weights {} do not fit input {}".format(weight.shape, x.shape))
    k = weight.shape[2]
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    padded = _pad(x.data, padding)
    windows = _windows(padded, k, stride, out_h, out_w)
    kernel = weight.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", windows, kernel, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        grad_x = grad_w = grad_b = None
        if weight.requires_grad:
            grad_w = np.einsum("bchw,bchwij->cij", g, windows, optimize=True)[:, None]
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    grad_padded[:, :, i:i + stride * (out_h - 1) + 1:stride,
                                j:j + stride * (out_w - 1) + 1:stride] += g * kernel[None, :, i, j, None, None]
            grad_x = _unpad(grad_padded, padding)
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "depthwise_conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics and updates the running buffers in
    place (unbiased variance, as the running estimate). Eval mode is a fixed affine map.
    """
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.data.size // x.shape[1]
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes) if gamma.requires_grad else None
        grad_beta = g.sum(axis=axes) if beta.requires_grad else None
        grad_x = None
        if x.requires_grad:
            g_hat = g * gamma.data[None, :, None, None]
            if training:
                n = x.data.size // x.shape[1]
                grad_x = (inv_std[None, :, None, None] / n) * (
                    n * g_hat
                    - g_hat.sum(axis=axes)[None, :, None, None]
                    - x_hat * (g_hat * x_hat).sum(axis=axes)[None, :, None, None])
            else:
                grad_x = g_hat * inv_std[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor, pattern: Optional[ActivationPattern] = None) -> Tensor:
    mask = pattern.decide(lambda: x.data > 0) if pattern is not None else x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (np.where(mask, g, 0),)
    return make_op(out, (x,), backward, "relu")


def max_pool2d(x: Tensor, pattern: Optional[ActivationPattern] = None) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even"""
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError("max_pool2d needs even spatial dims, got {}".format(x.shape))
    windows = _pool_windows(x.data)
    winners = (pattern.decide(lambda: windows.argmax(axis=-1)) if pattern is not None
               else windows.argmax(axis=-1))
    out = np.take_along_axis(windows, winners[..., None], axis=-1)[..., 0]

    def backward(g):
        grad_windows = np.zeros_like(windows)
        np.put_along_axis(grad_windows, winners[..., None], g[..., None], axis=-1)
        return (_unpool_windows(grad_windows, x.shape),)
    return make_op(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, output_size: Tuple[int, int]) -> Tensor:
    """Adaptive average pooling to `output_size`"""
    batch, channels, height, width = x.shape
    rows = adaptive_pool_matrix(height, output_size[0]).astype(x.dtype)
    cols = adaptive_pool_matrix(width, output_size[1]).astype(x.dtype)
    return _separable(x, rows, cols, "avg_pool2d")


def bilinear_resize(x: Tensor, output_size: Tuple[int, int]) -> Tensor:
    """Bilinear resampling to `output_size` (half-pixel centers, edge clamped)"""
    batch, channels, height, width = x.shape
    rows = bilinear_matrix(height, output_size[0]).astype(x.dtype)
    cols = bilinear_matrix(width, output_size[1]).astype(x.dtype)
    return _separable(x, rows, cols, "bilinear_resize")


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        b, c, h, w = x.shape
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return make_op(out, (x,), backward, "upsample_nearest2x")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip it outside training"""
    if not 0.0 <= rate < 1.0:
        raise InvalidParameterError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)
    return make_op(out, (x,), backward, "dropout")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)
    return make_op(out, (x,), backward, "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("cannot add {} and {}".format(a.shape, b.shape))

    def backward(g):
        return g, g
    return make_op(a.data + b.data, (a, b), backward, "add")


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != reference[0] or t.shape[2:] != reference[2:]:
            raise ShapeError("cannot concatenate {} with {}".format(t.shape, reference))
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(np.split(g, splits, axis=1))
    return make_op(out, tensors, backward, "channel_concat")


def project(x: Tensor, direction: np.ndarray) -> Tensor:
    """Scalar <x, direction>; turns any tensor into a checkable objective"""
    direction = np.asarray(direction, dtype=x.dtype)
    if direction.shape != x.shape:
        raise ShapeError("direction {} does not match {}".format(direction.shape, x.shape))
    out = np.array(np.sum(x.data * direction), dtype=x.dtype)

    def backward(g):
        return (g * direction,)
    return make_op(out, (x,), backward, "project")


# Linear resampling matrices shared with dataio

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of bilinear weights; identity when sizes match"""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        source = max((i + 0.5) * scale - 0.5, 0.0)
        lower = min(int(math.floor(source)), n_in - 1)
        upper = min(lower + 1, n_in - 1)
        frac = source - lower
        matrix[i, lower] += 1.0 - frac
        matrix[i, upper] += frac
    return matrix


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) averaging matrix over bins [floor(i*n/m), ceil((i+1)*n/m))"""
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start = (i * n_in) // n_out
        stop = -((-(i + 1) * n_in) // n_out)
        matrix[i, start:stop] = 1.0 / (stop - start)
    return matrix


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str) -> Tensor:
    out = np.einsum("ih,bchw,jw->bcij", rows, x.data, cols, optimize=True)

    def backward(g):
        return (np.einsum("ih,bcij,jw->bchw", rows, g, cols, optimize=True),)
    return make_op(out, (x,), backward, op)


def _pad(data: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _unpad(data: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return data
    return data[:, :, padding:-padding, padding:-padding]


def _windows(padded: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    return windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def _pool_windows(data: np.ndarray) -> np.ndarray:
    b, c, h, w = data.shape
    return data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def _unpool_windows(windows: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    b, c, h, w = shape
    return windows.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


# Parameter storage

@dataclass
class ParamEntry:
    """One named parameter tensor with its gradient and Adam moments"""
    value: np.ndarray
    init: str = "fan_in_uniform"
    fan_in: int = 1
    grad: Optional[np.ndarray] = None
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


@dataclass
class ParamStore:
    """Ordered named parameters plus non-trainable buffers (batch-norm statistics).

    Owned by one training run at a time; ops never mutate parameter values, only
    optimizers and loaders do.
    """
    dtype: type = np.float32
    entries: "OrderedDict[str, ParamEntry]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    buffer_fill: Dict[str, float] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, shape: Tuple[int, ...], init: str = "fan_in_uniform", fan_in: int = 1) -> None:
        if name in self.entries or name in self.buffers:
            raise ValueError("duplicate parameter name {}".format(name))
        if any(d < 1 for d in shape):
            raise ShapeError("parameter {} has empty shape {}".format(name, shape))
        self.entries[name] = ParamEntry(np.zeros(shape, dtype=self.dtype), init=init, fan_in=fan_in)

    def add_buffer(self, name: str, shape: Tuple[int, ...], fill: float) -> None:
        if name in self.entries or name in self.buffers:
            raise ValueError("duplicate buffer name {}".format(name))
        self.buffers[name] = np.full(shape, fill, dtype=self.dtype)
        self.buffer_fill[name] = fill

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> ParamEntry:
        return self.entries[name]

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> List[str]:
        return list(self.entries.keys())

    def leaf(self, name: str) -> Tensor:
        """Graph leaf whose gradient flows into the entry"""
        entry = self.entries[name]
        return Tensor(entry.value, requires_grad=True, sink=entry)

    def zero_grad(self) -> None:
        for entry in self.entries.values():
            entry.grad = np.zeros_like(entry.value)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of all parameter values followed by all buffers"""
        state = OrderedDict((name, entry.value.copy()) for name, entry in self.entries.items())
        state.update((name, buffer.copy()) for name, buffer in self.buffers.items())
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            target = self.entries[name].value if name in self.entries else self.buffers[name]
            if target.shape != value.shape:
                raise ShapeError("{}: shape {} does not match {}".format(name, value.shape, target.shape))
            target[...] = value

    def astype(self, dtype) -> "ParamStore":
        """Deep copy of the store in another precision"""
        clone = ParamStore(dtype=dtype, buffer_fill=dict(self.buffer_fill), step_count=self.step_count)
        for name, entry in self.entries.items():
            clone.entries[name] = ParamEntry(entry.value.astype(dtype), init=entry.init, fan_in=entry.fan_in)
        for name, buffer in self.buffers.items():
            clone.buffers[name] = buffer.astype(dtype)
        return clone


def init_random(store: ParamStore, rng: RngStream) -> None:
    """Fan-in scaled uniform weights, zero biases, unit/zero batch-norm affine.

    Entry number i draws from rng.split(i), so an entry's values depend only on the
    stream and its position. Buffers are reset and optimizer state cleared.
    """
    for index, entry in enumerate(store.entries.values()):
        if entry.init == "fan_in_uniform":
            bound = math.sqrt(6.0 / entry.fan_in)
            values = rng.split(index).generator().uniform(-bound, bound, size=entry.value.shape)
            entry.value[...] = values.astype(store.dtype)
        elif entry.init == "ones":
            entry.value[...] = 1
        else:
            entry.value[...] = 0
        entry.grad = None
        entry.adam_m[...] = 0
        entry.adam_v[...] = 0
    for name, buffer in store.buffers.items():
        buffer[...] = store.buffer_fill.get(name, 0.0)
    store.step_count = 0


def count_params(store: ParamStore) -> int:
    return int(sum(entry.value.size for entry in store.entries.values()))


# Gradient verification

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check.

    Attributes:
        errors (Dict[str, float]): Max floored relative error per parameter tensor; decides `passed`.
        tol (float): Pass threshold.
        raw_errors (Dict[str, float]): Max relative error per tensor without the denominator floor.
    """
    errors: Dict[str, float]
    tol: float
    checked_entries: int = 0
    raw_errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    @property
    def max_raw_error(self) -> float:
        return max(self.raw_errors.values()) if self.raw_errors else 0.0

    def worst(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5, tol: float = 1e-6,
               max_entries: Optional[int] = None, seed: int = 0, scale_floor: float = 1e-2) -> GradCheckReport:
    """Compare backprop gradients with central finite differences.

    Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
    The same ratio without the floor is reported in raw_errors, so a wrong gradient
    smaller than the floor still shows up there. Pass scale_floor=0 to judge on it.

    Args:
        f (Callable): Builds a single-element Tensor from the store. Must be deterministic.
        params (ParamStore): Store in float64.
        eps (float): Finite-difference step.
        tol (float): Largest admissible relative error.
        max_entries (Optional[int]): When set, check this many seeded random entries per tensor.
        seed (int): Seed for entry sampling.
        scale_floor (float): Denominator floor for the relative error.

    Returns:
        GradCheckReport: Per-tensor maximum relative errors.

    Raises:
        NonDeterministicComputationError: Two forward passes disagree.
        InvalidParameterError: Store is not in 64-bit precision.
    """
    if np.dtype(params.dtype) != np.float64:
        raise InvalidParameterError("gradient checks need a float64 store, got {}".format(np.dtype(params.dtype)))
    first = _scalar(f(params))
    second = _scalar(f(params))
    if first != second:
        raise NonDeterministicComputationError("forward passes disagree: {!r} vs {!r}".format(first, second))

    params.zero_grad()
    f(params).backward()
    analytic = {name: entry.grad.copy() for name, entry in params.entries.items()}

    sampler = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    raw_errors: Dict[str, float] = {}
    checked = 0
    for name, entry in params.entries.items():
        flat = entry.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(sampler.choice(flat.size, size=max_entries, replace=False))
        worst = raw = 0.0
        for index in indices:
            original = flat[index]
            flat[index] = original + eps
            plus = _scalar(f(params))
            flat[index] = original - eps
            minus = _scalar(f(params))
            flat[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[index])
            difference = abs(exact - numeric)
            scale = max(abs(exact), abs(numeric))
            if scale:
                raw = max(raw, difference / scale)
            if max(scale, scale_floor):
                worst = max(worst, difference / max(scale, scale_floor))
            checked += 1
        errors[name] = worst
        raw_errors[name] = raw
    return GradCheckReport(errors=errors, tol=tol, checked_entries=checked, raw_errors=raw_errors)


def _scalar(t: Tensor) -> float:
    if t.data.size != 1:
        raise ShapeError("objective must be a single value, got shape {}".format(t.shape))
    return float(t.data.reshape(-1)[0])


def require_gradients(store: ParamStore) -> None:
    missing = [name for name, entry in store.entries.items() if entry.grad is None]
    if missing:
        raise MissingGradientError("no gradient for {}".format(", ".join(missing[:5])))
