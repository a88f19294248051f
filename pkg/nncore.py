"""Minimal reverse-mode autodiff over numpy, with the layers and optimizer the networks need.

A ``Tensor`` produced by an op keeps references to its parents and a
closure mapping the output gradient to one gradient per parent. Calling
``backward(loss)`` walks the graph in reverse topological order and
accumulates gradients on tracked leaves (parameters and inputs created
with ``requires_grad=True``). The graph is consumed unless
``retain_graph=True``.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GradientError, GraphError, ShapeMismatchError
from models import CheckpointEntry, CheckpointManifest
from storage import get_storage

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[BackwardFn] = None,
    ):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(DEFAULT_DTYPE)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._consumed = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise GraphError("division is only defined by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Operation records reachable from a loss, in topological order (loss last)."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.order)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.order if node.is_leaf and node.requires_grad]

    def backward(self, retain_graph: bool = False):
        grads: Dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise GraphError("loss depends on a graph that backward already consumed")
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = parent_grad.astype(parent.dtype, copy=False)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad
        if not retain_graph:
            for node in self.order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._consumed = True


def backward(loss: Tensor, retain_graph: bool = False) -> Graph:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph has already been consumed; pass retain_graph=True to reuse it")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tracked tensor")
    graph = Graph(loss)
    graph.backward(retain_graph=retain_graph)
    return graph


# Elementwise and reductions

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def tensor_sum(a: Tensor) -> Tensor:
    return _result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != reference[0] or t.shape[2:] != reference[2:]:
            raise ShapeMismatchError(f"cannot concatenate {t.shape} with {reference} along channels")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=1),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=1)),
    )


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"linear expects (N, {w.shape[1]}) input, got {x.shape}")
    out = x.data @ w.data.T
    parents: Tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def grad_fn(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(out, parents, grad_fn)


# Convolutions

def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(x, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    windows = _windows(x, w.shape[2], stride, padding)
    return np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_input_grad(
    g: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...], stride: int, padding: int
) -> np.ndarray:
    n, c, h, wd = x_shape
    k = w.shape[2]
    out_h, out_w = g.shape[2:]
    padded = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.result_type(g, w))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contrib
    return padded[:, :, padding:padding + h, padding:padding + wd]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    windows = _windows(x, k, stride, padding)
    return np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) weights."""
    k = w.shape[2]
    padding = k // 2 if padding is None else padding
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv2d expects (N, {w.shape[1]}, H, W) input, got {x.shape}")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeMismatchError(f"input {x.shape} is smaller than the {k}x{k} kernel")
    out = _conv_forward(x.data, w.data, stride, padding)
    parents: Tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def grad_fn(g):
        grads = [
            _conv_input_grad(g, w.data, x.shape, stride, padding) if x.requires_grad else None,
            _conv_weight_grad(x.data, g, k, stride, padding) if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, grad_fn)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Adjoint of a stride-``stride`` valid conv2d; weights are (C_in, C_out, k, k)."""
    if x.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeMismatchError(f"conv_transpose2d expects (N, {w.shape[0]}, H, W) input, got {x.shape}")
    k = w.shape[2]
    n, _, h, wd = x.shape
    out_shape = (n, w.shape[1], (h - 1) * stride + k, (wd - 1) * stride + k)
    out = _conv_input_grad(x.data, w.data, out_shape, stride, 0)
    parents: Tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def grad_fn(g):
        grads = [
            _conv_forward(g, w.data, stride, 0) if x.requires_grad else None,
            _conv_weight_grad(g, x.data, k, stride, 0) if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, grad_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        mask = np.zeros_like(blocks)
        np.put_along_axis(mask, winner[..., None], 1.0, axis=-1)
        spread = (mask * g[..., None]).reshape(n, c, h // 2, w // 2, 2, 2)
        return (spread.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), grad_fn)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of (N, C, H, W). Training mode updates the running buffers in place."""
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        count = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        count = None
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def grad_fn(g):
        d_gamma = (g * x_hat).sum(axis=axes)
        d_beta = g.sum(axis=axes)
        d_hat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv_std.reshape(shape) / count) * (
                count * d_hat
                - d_hat.sum(axis=axes).reshape(shape)
                - x_hat * (d_hat * x_hat).sum(axis=axes).reshape(shape)
            )
        else:
            dx = d_hat * inv_std.reshape(shape)
        return dx, d_gamma, d_beta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn)


# Losses

def l1_mean(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"l1_mean operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)
    return _result(np.abs(diff).mean(), (a, b), lambda g: (g * sign / n, -g * sign / n))


def cosine_sim(a: Tensor, b, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of the two tensors flattened to vectors."""
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cosine_sim operands differ: {a.shape} vs {b.shape}")
    na = max(float(np.linalg.norm(a.data)), eps)
    nb = max(float(np.linalg.norm(b.data)), eps)
    cos = float(np.sum(a.data * b.data)) / (na * nb)

    def grad_fn(g):
        return (
            g * (b.data / (na * nb) - cos * a.data / na ** 2),
            g * (a.data / (na * nb) - cos * b.data / nb ** 2),
        )

    return _result(np.asarray(cos, dtype=a.dtype), (a, b), grad_fn)


def bce(p: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against a constant target."""
    t = np.broadcast_to(np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype), p.shape)
    q = np.clip(p.data, eps, 1 - eps)
    n = p.data.size
    loss = -np.mean(t * np.log(q) + (1 - t) * np.log(1 - q))
    interior = (p.data > eps) & (p.data < 1 - eps)
    return _result(
        np.asarray(loss, dtype=p.dtype),
        (p,),
        lambda g: (g * interior * (q - t) / (q * (1 - q)) / n,),
    )


OPS: Dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "maxpool2x2": maxpool2x2,
    "batchnorm": batchnorm,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "concat_channels": concat_channels,
    "linear": linear,
    "l1_mean": l1_mean,
    "cosine_sim": cosine_sim,
    "bce": bce,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a recorded op by name, e.g. ``forward_op("conv2d", x, w, b, stride=2)``."""
    try:
        op = OPS[kind]
    except KeyError:
        raise GraphError(f"unknown op '{kind}'; expected one of {sorted(OPS)}") from None
    return op(*inputs, **kwargs)


# Parameters and modules

class Parameter(Tensor):
    """Trainable leaf. Frozen parameters record no gradient and are skipped by the optimizer."""

    def __init__(self, data, frozen: bool = False):
        super().__init__(np.array(data))
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool):
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None


class Module:
    def __init__(self):
        self.training = True
        self._buffer_names: List[str] = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffer_names.append(name)
        setattr(self, name, value)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.shape:
                raise ShapeMismatchError(f"{name}: checkpoint shape {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in self.named_buffers():
            if name not in state:
                raise KeyError(f"missing buffer {name}")
            buf[...] = state[name]

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in self._buffer_names:
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, child in self.named_children():
            child._cast_buffers(dtype)


def _kaiming_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = True,
        *,
        rng: np.random.Generator,
    ):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=DEFAULT_DTYPE)) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 2,
        stride: int = 2,
        *,
        rng: np.random.Generator,
    ):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_kaiming_uniform(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=DEFAULT_DTYPE))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_mean", np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.register_buffer("running_var", np.ones(channels, dtype=DEFAULT_DTYPE))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(_kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# Optimization

@dataclass
class OptimizerState:
    """Adam moments per parameter position plus the step-halving schedule."""

    lr0: float
    halve_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        if self.halve_every <= 0:
            return self.lr0
        return self.lr0 * 0.5 ** (self.step // self.halve_every)


def optimizer_step(
    state: OptimizerState,
    params: Sequence[Parameter],
    grads: Optional[Sequence[Optional[np.ndarray]]] = None,
):
    """One Adam update in place. Frozen parameters are skipped."""
    if grads is None:
        grads = [p.grad for p in params]
    lr = state.lr
    t = state.step + 1
    for index, (p, g) in enumerate(zip(params, grads)):
        if getattr(p, "frozen", False):
            continue
        if g is None:
            raise GradientError(f"parameter {index} with shape {p.shape} has no gradient")
        if g.shape != p.shape:
            raise GradientError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(index)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[index] = np.zeros_like(p.data)
        v = state.v[index]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[index], state.v[index] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    state.step = t


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float, halve_every: int = 0):
        self.params = list(params)
        self.state = OptimizerState(lr0=lr, halve_every=halve_every)

    @property
    def lr(self) -> float:
        return self.state.lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        optimizer_step(self.state, self.params)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """Largest norm-relative error between analytic and central-difference gradients.

    ``fn`` must return a scalar Tensor; run it on float64 inputs.
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = float(fn(*inputs).data)
                flat[i] = original - h
                minus = float(fn(*inputs).data)
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


# Checkpoints

def _checkpoint_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    stem = Path(path)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".bin"), stem.with_name(stem.name + ".json")


def save_checkpoint(module: Module, path: Union[str, Path], metadata: Optional[Dict[str, object]] = None) -> Path:
    """Write ``<path>.bin`` (flat float32) and ``<path>.json`` (manifest)."""
    bin_path, json_path = _checkpoint_paths(path)
    entries, chunks = [], []
    for name, p in module.named_parameters():
        entries.append(CheckpointEntry(name=name, shape=list(p.shape), frozen=p.frozen))
        chunks.append(p.data.astype(np.float32).ravel())
    for name, buf in module.named_buffers():
        entries.append(CheckpointEntry(name=name, shape=list(buf.shape), buffer=True))
        chunks.append(buf.astype(np.float32).ravel())
    payload = np.concatenate(chunks).astype("<f4").tobytes() if chunks else b""
    storage = get_storage()
    storage.write_bytes(bin_path, payload)
    manifest = CheckpointManifest(entries=entries, metadata=metadata or {})
    storage.write_json(json_path, manifest.model_dump())
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {bin_path}")
    return bin_path


def load_checkpoint(module: Module, path: Union[str, Path]) -> Dict[str, object]:
    """Restore parameters, buffers and frozen flags; returns the stored metadata."""
    bin_path, json_path = _checkpoint_paths(path)
    storage = get_storage()
    manifest = CheckpointManifest.model_validate(storage.read_json(json_path))
    flat = np.frombuffer(storage.read_bytes(bin_path), dtype="<f4")
    expected = sum(int(np.prod(e.shape)) for e in manifest.entries)
    if flat.size != expected:
        raise ShapeMismatchError(f"checkpoint holds {flat.size} values, manifest describes {expected}")
    state, frozen, offset = {}, {}, 0
    for entry in manifest.entries:
        size = int(np.prod(entry.shape))
        state[entry.name] = flat[offset:offset + size].reshape(entry.shape)
        frozen[entry.name] = entry.frozen
        offset += size
    module.load_state_dict(state)
    for name, p in module.named_parameters():
        p.frozen = frozen.get(name, False)
    logger.info(f"Loaded checkpoint {bin_path}")
    return manifest.metadata


def read_checkpoint_metadata(path: Union[str, Path]) -> Dict[str, object]:
    _, json_path = _checkpoint_paths(path)
    return CheckpointManifest.model_validate(get_storage().read_json(json_path)).metadata
