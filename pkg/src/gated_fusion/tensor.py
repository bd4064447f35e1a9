"""Dense float32 tensors with tape-based reverse-mode gradients.

Operations executed while a :class:`ComputationGraph` is active are recorded
on it in execution order, which is a topological order of the computation.
:func:`backward` walks that record in reverse and accumulates gradients into
every leaf tensor that requires them (normally :class:`Parameter` objects).
Outside of a graph, or inside :func:`no_grad`, operations only compute
values.

Layout is row-major with ``(batch, channel, height, width)`` ordering for
image-like data.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DivergenceError

logger = logging.getLogger(__name__)

DTYPE = np.float32

_ACTIVE_GRAPH: contextvars.ContextVar["ComputationGraph | None"] = contextvars.ContextVar(
    "gated_fusion_active_graph", default=None
)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float32 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: object, requires_grad: bool = False) -> None:
        self.data = np.require(np.asarray(data, dtype=DTYPE), requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor whose gradient buffer always exists."""

    __slots__ = ("identifier",)

    def __init__(self, value: object, identifier: str, trainable: bool = True) -> None:
        super().__init__(value, requires_grad=trainable)
        self.identifier = identifier
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is None or self.grad.shape != self.data.shape:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def copy(self, trainable: bool | None = None) -> "Parameter":
        keep = self.requires_grad if trainable is None else trainable
        return Parameter(self.data.copy(), self.identifier, trainable=keep)

    def __repr__(self) -> str:
        return f"Parameter({self.identifier!r}, shape={self.shape}, trainable={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class ComputationGraph:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded when any of their inputs requires a gradient.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputationGraph":
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _ACTIVE_GRAPH.reset(self._token)
            self._token = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, e.g. for frozen expert forward passes."""
    token = _ACTIVE_GRAPH.set(None)
    try:
        yield
    finally:
        _ACTIVE_GRAPH.reset(token)


def active_graph() -> ComputationGraph | None:
    return _ACTIVE_GRAPH.get()


def as_tensor(value: object) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active graph.

    ``backward_fn`` receives the gradient of the output and returns one
    gradient (or ``None``) per input, in input order.
    """
    graph = _ACTIVE_GRAPH.get()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        graph.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, graph: ComputationGraph | None = None) -> None:
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate additively, both across fan-out inside the graph
    and into leaves that already hold a gradient.
    """
    graph = graph if graph is not None else _ACTIVE_GRAPH.get()
    if graph is None:
        raise ContractError("backward() needs the ComputationGraph the loss was recorded on")
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.is_finite():
        raise DivergenceError(f"loss is not finite: {loss.item()!r}")
    if not loss.requires_grad:
        logger.debug("backward() on a loss that does not depend on trainable tensors")
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        tensors.pop(id(node.output), None)
        if upstream is None:
            continue
        input_grads = node.backward(upstream)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grad = np.asarray(grad, dtype=DTYPE).reshape(tensor.shape)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
                tensors[key] = tensor

    for key, grad in grads.items():
        leaf = tensors[key]
        if leaf.grad is None:
            leaf.grad = grad.copy()
        else:
            leaf.grad += grad


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", a.data + b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", a.data * b.data, (a, b), _backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _backward(g: np.ndarray):
        return (g * mask,)

    return apply_op("relu", np.where(mask, x.data, DTYPE(0)), (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(DTYPE(0), -x.data)).astype(DTYPE)

    def _backward(g: np.ndarray):
        return (g * out * (DTYPE(1) - out),)

    return apply_op("sigmoid", out, (x,), _backward)


def _normalize_axis(axis: int | Sequence[int] | None, ndim: int, op: str) -> tuple[int, ...] | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{op}: axis {ax} out of range for {ndim}-d tensor")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


def reduce_sum(x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim, "sum")
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g: np.ndarray):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return apply_op("sum", out, (x,), _backward)


def reduce_mean(x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim, "mean")
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DimensionError(f"mean: empty reduction over shape {x.shape}")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def _backward(g: np.ndarray):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / DTYPE(count), x.shape),)

    return apply_op("mean", out, (x,), _backward)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    (ax,) = _normalize_axis(axis, logits.ndim, "softmax")
    shifted = logits.data - logits.data.max(axis=ax, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=ax, keepdims=True)

    def _backward(g: np.ndarray):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (logits,), _backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc

    def _backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return apply_op("reshape", out, (x,), _backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    if x.ndim < 1:
        raise DimensionError("flatten: needs at least a batch axis")
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray):
        return (g.transpose(inverse),)

    return apply_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), _backward)


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weights: Parameter, bias: Parameter) -> Tensor:
    """Affine map ``x @ W + b`` with ``W`` shaped ``(in, out)``.

    A 1-d input is treated as a single row.
    """
    single = x.ndim == 1
    rows = x.data.reshape(1, -1) if single else x.data.reshape(x.shape[0], -1)
    if weights.ndim != 2 or rows.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    out = rows @ weights.data + bias.data
    if single:
        out = out.reshape(-1)

    def _backward(g: np.ndarray):
        g2 = g.reshape(rows.shape[0], -1)
        return (
            (g2 @ weights.data.T).reshape(x.shape),
            rows.T @ g2,
            g2.sum(axis=0),
        )

    return apply_op("dense", out, (x, weights, bias), _backward)


def conv2d(x: Tensor, weights: Parameter, bias: Parameter, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over ``(N, C, H, W)`` input with ``(F, C, K, K)`` kernels."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-d (N, C, H, W), got {x.shape}")
    if weights.ndim != 4 or weights.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match weights {weights.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")

    n, c, h, w = x.shape
    f, _, kh, kw = weights.shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d: kernel {weights.shape} larger than padded input {x.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    s0, s1, s2, s3 = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, out_h, out_w, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    cols = windows.reshape(n * out_h * out_w, c * kh * kw)
    kernel = weights.data.reshape(f, -1)
    out = (cols @ kernel.T + bias.data).reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2)

    def _backward(g: np.ndarray):
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, f)
        d_weights = (g_rows.T @ cols).reshape(weights.shape)
        d_bias = g_rows.sum(axis=0)
        d_cols = (g_rows @ kernel).reshape(n, out_h, out_w, c, kh, kw)
        d_padded = np.zeros(padded.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += d_cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding:
            d_padded = d_padded[:, :, padding : padding + h, padding : padding + w]
        return d_padded, d_weights, d_bias

    return apply_op("conv2d", np.ascontiguousarray(out), (x, weights, bias), _backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first element."""
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be 4-d, got {x.shape}")
    n, c, h, w = x.shape
    if size < 1 or h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial size {(h, w)} not divisible by pool size {size}")
    out_h, out_w = h // size, w // size
    windows = (
        x.data.reshape(n, c, out_h, size, out_w, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, out_h, out_w, size * size)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        scattered = np.zeros((n, c, out_h, out_w, size * size), dtype=DTYPE)
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        grad = (
            scattered.reshape(n, c, out_h, out_w, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (grad,)

    return apply_op("max_pool2d", out, (x,), _backward)


# ---------------------------------------------------------------------------
# optimisation


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = DTYPE(max_norm / (total + 1e-12))
        for p in params:
            p.grad *= scale
    return total


class SGD:
    """SGD with momentum: ``v <- momentum * v + grad``; ``value <- value - lr * v``."""

    def __init__(
        self,
        params: Iterable[Parameter],
        learning_rate: float,
        momentum: float = 0.9,
        max_grad_norm: float | None = None,
    ) -> None:
        if learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {momentum}")
        self.params = [p for p in params if p.requires_grad]
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.max_grad_norm = max_grad_norm
        self.velocities: dict[str, np.ndarray] = {p.identifier: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None or not np.isfinite(p.grad).all():
                raise DivergenceError(f"non-finite gradient in parameter {p.identifier!r}")
        if self.max_grad_norm:
            clip_grad_norm(self.params, self.max_grad_norm)
        lr = DTYPE(self.learning_rate)
        mom = DTYPE(self.momentum)
        for p in self.params:
            v = self.velocities[p.identifier]
            v *= mom
            v += p.grad
            p.data -= lr * v


def sgd_step(optimizer: SGD) -> None:
    """One momentum update of every trainable parameter the optimizer holds."""
    optimizer.step()
