"""Reverse-mode automatic differentiation over dense feature maps.

Every differentiable op builds its output with `_result()`, handing over the
parents and a vector-Jacobian product. `Tensor.backward()` walks the recorded
graph in reverse topological order. No op mutates its inputs.
"""
from __future__ import annotations

from contextlib import contextmanager
import logging
from typing import (
    Callable,
    Dict,
    Final,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fadpy.errors import NumericalError, ShapeError


logger = logging.getLogger(__name__)


# Constants
DEFAULT_DTYPE: Final = np.float32
CONV_KERNEL_SIZES: Final[Tuple[int, ...]] = (1, 3)
CONV_DILATIONS: Final[Tuple[int, ...]] = (1, 2, 3)
CONV_STRIDES: Final[Tuple[int, ...]] = (1, 2)
GN_MAX_GROUPS: Final[int] = 8

ArrayLike = Union[np.ndarray, float, int, Sequence]
Grads = Tuple[Optional[np.ndarray], ...]
VJP = Callable[[np.ndarray], Grads]


# ========
# Autograd
# ========


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph."""
    global _grad_enabled
    _grad_enabled, old = False, _grad_enabled
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(
            self,
            data: ArrayLike,
            requires_grad: bool = False,
            *,
            dtype=None,
    ) -> None:
        if dtype is None:
            is_float_array = (
                isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating)
            )
            dtype = data.dtype if is_float_array else DEFAULT_DTYPE
        self.data: np.ndarray = np.array(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._vjp: Optional[VJP] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(
                f"item() needs a single element, tensor has shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def check_finite(self, name: str = "") -> None:
        if not np.isfinite(self.data).all():
            label = name or self.op
            raise NumericalError(f"non-finite values in '{label}'", node=label)

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, op={self.op!r},"
                f" requires_grad={self.requires_grad})")

    # operators
    def __add__(self, other: Union[Tensor, float]) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Union[Tensor, float]) -> Tensor:
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other: Union[Tensor, float]) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> Tensor:
        return scale(self, 1.0 / other)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into `grad` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed gradient needs a scalar, got {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = node_grad.copy()
                else:
                    node.grad = node.grad + node_grad
                continue
            assert node._vjp is not None
            for parent, parent_grad in zip(node._parents, node._vjp(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if not np.isfinite(parent_grad).all():
                    raise NumericalError(
                        f"non-finite gradient flowing out of '{node.op}'", node=node.op
                    )
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: VJP, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs_grad
    out._parents = tuple(parents) if needs_grad else ()
    out._vjp = vjp if needs_grad else None
    return out


def as_tensor(value: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def zeros(shape: Tuple[int, ...], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ===========
# Elementwise
# ===========


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    a_shape, b_shape = a.shape, b.shape

    def vjp(g: np.ndarray) -> Grads:
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _result(a.data + b.data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a_data, b_data = a.data, b.data

    def vjp(g: np.ndarray) -> Grads:
        return (_unbroadcast(g * b_data, a_data.shape),
                _unbroadcast(g * a_data, b_data.shape))

    return _result(a_data * b_data, (a, b), vjp, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.data.dtype.type(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def _relu_vjp(mask: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * mask


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(
        np.where(mask, a.data, a.data.dtype.type(0)),
        (a,),
        lambda g: (_relu_vjp(mask, g),),
        "relu",
    )


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    return _result(
        np.asarray(a.data.sum(dtype=np.float64), dtype=dtype),
        (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.size, 1))


# =========
# Structure
# =========


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat() needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray) -> Grads:
        return tuple(
            np.take(g, range(start, stop), axis=axis)
            for start, stop in zip(bounds[:-1], bounds[1:])
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat(): {err}") from err
    return _result(data, tensors, vjp, "concat")


def weighted_sum(
        weights: Tensor,
        inputs: Sequence[Optional[Tensor]],
        shape: Tuple[int, ...],
) -> Tensor:
    """sum_k weights[k] * inputs[k]; a `None` input is an all-zero map of `shape`."""
    if weights.data.ndim != 1 or weights.shape[0] != len(inputs):
        count = weights.shape[0] if weights.data.ndim == 1 else weights.shape
        raise ShapeError(
            f"weighted_sum(): {count}"
            f" weights for {len(inputs)} inputs"
        )
    present = [(k, t) for k, t in enumerate(inputs) if t is not None]
    for k, t in present:
        if t.shape != shape:
            raise ShapeError(
                f"weighted_sum(): input {k} has shape {t.shape}, expected {shape}"
            )

    w = weights.data
    out = np.zeros(shape, dtype=w.dtype)
    for k, t in present:
        out += w[k] * t.data

    def vjp(g: np.ndarray) -> Grads:
        grad_w = np.zeros_like(w)
        for k, t in present:
            grad_w[k] = np.sum(g * t.data, dtype=np.float64)
        return (grad_w,) + tuple(w[k] * g for k, _ in present)

    return _result(out, (weights,) + tuple(t for _, t in present), vjp, "weighted_sum")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_feature_map(x, "global_avg_pool")
    n, c, h, w = x.shape
    area = h * w

    def vjp(g: np.ndarray) -> Grads:
        return (np.broadcast_to(g / area, x.shape).astype(x.data.dtype),)

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), vjp, "global_avg_pool")


def subsample(x: Tensor, stride: int) -> Tensor:
    """Keep every `stride`-th row and column."""
    _check_feature_map(x, "subsample")
    shape = x.shape

    def vjp(g: np.ndarray) -> Grads:
        grad = np.zeros(shape, dtype=g.dtype)
        grad[:, :, ::stride, ::stride] = g
        return (grad,)

    return _result(
        np.ascontiguousarray(x.data[:, :, ::stride, ::stride]), (x,), vjp, "subsample"
    )


# =======
# Softmax
# =======


def softmax_array(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the maximum."""
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.isfinite(logits.data).all():
        raise NumericalError("softmax of non-finite logits", node="softmax")
    s = softmax_array(logits.data)

    def vjp(g: np.ndarray) -> Grads:
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (logits,), vjp, "softmax")


# ===========
# Convolution
# ===========


def _check_feature_map(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(
            f"{op}(): expected a (batch, channels, height, width) map, got {x.shape}"
        )


def same_padding(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


def conv_output_size(size: int, kernel: int, stride: int, dilation: int) -> int:
    pad = same_padding(kernel, dilation)
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def validate_conv(
        x_shape: Tuple[int, ...],
        w_shape: Tuple[int, ...],
        stride: int,
        dilation: int,
        groups: int,
) -> None:
    if len(x_shape) != 4:
        raise ShapeError(f"conv2d(): input must be 4-D, got {x_shape}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv2d(): weight must be 4-D, got {w_shape}")
    out_c, in_per_group, kh, kw = w_shape
    channels = x_shape[1]
    if groups < 1 or channels % groups:
        raise ShapeError(
            f"conv2d(): groups ({groups}) do not divide input channels ({channels})"
        )
    if out_c % groups:
        raise ShapeError(
            f"conv2d(): groups ({groups}) do not divide output channels ({out_c})"
        )
    if in_per_group != channels // groups:
        raise ShapeError(
            f"conv2d(): weight expects {in_per_group} channels per group,"
            f" input gives {channels // groups}"
        )
    if kh != kw or kh not in CONV_KERNEL_SIZES:
        raise ShapeError(
            f"conv2d(): kernel must be square with size in {CONV_KERNEL_SIZES}"
        )
    if dilation not in CONV_DILATIONS:
        raise ShapeError(f"conv2d(): dilation {dilation} not in {CONV_DILATIONS}")
    if stride not in CONV_STRIDES:
        raise ShapeError(f"conv2d(): stride {stride} not in {CONV_STRIDES}")


def _im2col(
        x: np.ndarray, kernel: int, stride: int, dilation: int, groups: int,
) -> Tuple[np.ndarray, int, int]:
    """(groups, N*Ho*Wo, C/groups*k*k) column matrix of an input map."""
    n, c, h, w = x.shape
    pad = same_padding(kernel, dilation)
    span = dilation * (kernel - 1) + 1
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (span, span), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.reshape(n, groups, c // groups, ho, wo, kernel, kernel)
    cols = cols.transpose(1, 0, 3, 4, 2, 5, 6).reshape(
        groups, n * ho * wo, (c // groups) * kernel * kernel
    )
    return np.ascontiguousarray(cols), ho, wo


def _col2im(
        cols: np.ndarray,
        x_shape: Tuple[int, ...],
        kernel: int,
        stride: int,
        dilation: int,
        ho: int,
        wo: int,
) -> np.ndarray:
    n, c, h, w = x_shape
    groups = cols.shape[0]
    pad = same_padding(kernel, dilation)
    cols = cols.reshape(groups, n, ho, wo, c // groups, kernel, kernel)
    cols = cols.transpose(1, 0, 4, 5, 6, 2, 3).reshape(n, c, kernel, kernel, ho, wo)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            rows = slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride)
            columns = slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride)
            padded[:, :, rows, columns] += cols[:, :, i, j]
    return padded[:, :, pad:pad + h, pad:pad + w] if pad else padded


def conv2d(
        x: Tensor,
        weight: Tensor,
        bias: Optional[Tensor] = None,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
) -> Tensor:
    """Grouped 2-D convolution with "same" padding dilation*(k-1)/2."""
    validate_conv(x.shape, weight.shape, stride, dilation, groups)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d(): bias shape {bias.shape}, expected ({weight.shape[0]},)"
        )

    n = x.shape[0]
    out_c, _, kernel, _ = weight.shape
    out_per_group = out_c // groups
    cols, ho, wo = _im2col(x.data, kernel, stride, dilation, groups)
    w_mat = weight.data.reshape(groups, out_per_group, -1).transpose(0, 2, 1)
    out = np.matmul(cols, w_mat)  # (groups, N*Ho*Wo, out_per_group)
    out = out.reshape(groups, n, ho, wo, out_per_group).transpose(1, 0, 4, 2, 3)
    out = np.ascontiguousarray(out.reshape(n, out_c, ho, wo))
    if bias is not None:
        out += bias.data[None, :, None, None]

    x_shape, w_shape = x.shape, weight.shape

    def vjp(g: np.ndarray) -> Grads:
        g_mat = g.reshape(n, groups, out_per_group, ho, wo).transpose(1, 0, 3, 4, 2)
        g_mat = np.ascontiguousarray(g_mat.reshape(groups, n * ho * wo, out_per_group))
        grad_w = np.matmul(cols.transpose(0, 2, 1), g_mat)
        grad_w = grad_w.transpose(0, 2, 1).reshape(w_shape)
        grad_x = None
        if x.requires_grad:
            grad_cols = np.matmul(g_mat, w_mat.transpose(0, 2, 1))
            grad_x = _col2im(grad_cols, x_shape, kernel, stride, dilation, ho, wo)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents: Tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, vjp, "conv2d")


# =======
# Pooling
# =======


def pool2d(x: Tensor, kind: str, stride: int = 1) -> Tensor:
    """3x3 max or average pooling with padding 1."""
    _check_feature_map(x, "pool2d")
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d(): unknown kind '{kind}'")
    if stride not in CONV_STRIDES:
        raise ShapeError(f"pool2d(): stride {stride} not in {CONV_STRIDES}")
    n, c, h, w = x.shape
    fill = -np.inf if kind == "max" else 0.0
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=fill)
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, 9)
    if kind == "max":
        choice = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, choice[..., None], axis=-1)[..., 0]
    else:
        out = flat.mean(axis=-1)
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    def vjp(g: np.ndarray) -> Grads:
        grad = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
        for offset in range(9):
            i, j = divmod(offset, 3)
            share = (choice == offset) * g if kind == "max" else g / 9.0
            grad[:, :, i:i + stride * (ho - 1) + 1:stride,
                 j:j + stride * (wo - 1) + 1:stride] += share
        return (grad[:, :, 1:-1, 1:-1],)

    return _result(out, (x,), vjp, f"{kind}_pool")


# ===================
# Group normalization
# ===================


def default_num_groups(channels: int) -> int:
    """Largest divisor of `channels` not above GN_MAX_GROUPS."""
    return max(g for g in range(1, min(GN_MAX_GROUPS, channels) + 1) if channels % g == 0)


def group_norm(
        x: Tensor,
        num_groups: int,
        gamma: Tensor,
        beta: Tensor,
        eps: float = 1e-5,
) -> Tensor:
    _check_feature_map(x, "group_norm")
    n, c, h, w = x.shape
    if eps <= 0:
        raise ValueError(f"group_norm(): eps must be positive ({eps})")
    if num_groups < 1 or num_groups > c:
        raise ShapeError(f"group_norm(): {num_groups} groups for {c} channels")
    if c % num_groups:
        raise ShapeError(f"group_norm(): {num_groups} groups do not divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm(): affine parameters must have shape ({c},)")

    dtype = x.data.dtype
    grouped = x.data.reshape(n, num_groups, -1)
    mean = grouped.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = grouped - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (centered * inv_std).astype(dtype).reshape(n, c, h, w)
    out = x_hat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    inv_std = inv_std.astype(dtype)

    def vjp(g: np.ndarray) -> Grads:
        grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        d_hat = (g * gamma.data[None, :, None, None]).reshape(n, num_groups, -1)
        x_hat_g = x_hat.reshape(n, num_groups, -1)
        grad_x = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat_g * (d_hat * x_hat_g).mean(axis=-1, keepdims=True)
        )
        return grad_x.reshape(n, c, h, w).astype(dtype), grad_gamma, grad_beta

    return _result(out.astype(dtype), (x, gamma, beta), vjp, "group_norm")


# ======
# Losses
# ======


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_focal_loss(
        logits: Tensor,
        targets: np.ndarray,
        gamma: float = 2.0,
        alpha: float = 0.25,
) -> Tensor:
    """Summed focal loss; `targets` is a 0/1 array shaped like `logits`."""
    if targets.shape != logits.shape:
        raise ShapeError(f"focal loss: targets {targets.shape} vs logits {logits.shape}")
    x = logits.data
    t = targets.astype(x.dtype)
    p = sigmoid_array(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    q = 1.0 - p
    loss_pos = -alpha * q ** gamma * log_p
    loss_neg = -(1.0 - alpha) * p ** gamma * log_q
    loss = t * loss_pos + (1.0 - t) * loss_neg

    def vjp(g: np.ndarray) -> Grads:
        d_pos = alpha * q ** gamma * (gamma * p * log_p - q)
        d_neg = (1.0 - alpha) * p ** gamma * (p - gamma * q * log_q)
        return ((g * (t * d_pos + (1.0 - t) * d_neg)).astype(x.dtype),)

    return _result(np.asarray(loss.sum(), dtype=x.dtype), (logits,), vjp, "focal_loss")


def iou_loss(
        raw_distances: Tensor,
        target_distances: np.ndarray,
        mask: np.ndarray,
        smooth: float = 1.0,
) -> Tensor:
    """Summed -log IoU between exp(raw) and target (l, t, r, b) distances on `mask`."""
    if raw_distances.data.ndim != 4 or raw_distances.shape[1] != 4:
        raise ShapeError(
            f"iou loss: expected (N, 4, H, W) distances, got {raw_distances.shape}"
        )
    if target_distances.shape != raw_distances.shape:
        raise ShapeError("iou loss: target distances do not match predictions")
    dtype = raw_distances.data.dtype
    m = np.broadcast_to(mask, raw_distances.shape[:1] + (1,) + raw_distances.shape[2:])
    m = m[:, 0].astype(dtype)
    pred = np.exp(raw_distances.data)
    l, t, r, b = (pred[:, k] for k in range(4))
    lg, tg, rg, bg = (target_distances[:, k].astype(dtype) for k in range(4))
    area_p = (l + r) * (t + b)
    area_g = (lg + rg) * (tg + bg)
    w_i = np.minimum(l, lg) + np.minimum(r, rg)
    h_i = np.minimum(t, tg) + np.minimum(b, bg)
    inter = w_i * h_i
    union = area_p + area_g - inter
    loss = -np.log((inter + smooth) / (union + smooth)) * m

    def vjp(g: np.ndarray) -> Grads:
        d_inter = (-1.0 / (inter + smooth) - 1.0 / (union + smooth)) * m * g
        d_area = 1.0 / (union + smooth) * m * g
        grad = np.stack([
            d_area * (t + b) + d_inter * h_i * (l <= lg),
            d_area * (l + r) + d_inter * w_i * (t <= tg),
            d_area * (t + b) + d_inter * h_i * (r <= rg),
            d_area * (l + r) + d_inter * w_i * (b <= bg),
        ], axis=1)
        return ((grad * pred).astype(dtype),)

    return _result(np.asarray(loss.sum(), dtype=dtype), (raw_distances,), vjp, "iou_loss")


def bernoulli_kl_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed BCE-with-logits minus target entropy on `mask`; zero iff sigmoid(x) == t."""
    if targets.shape != logits.shape:
        raise ShapeError(
            f"centerness loss: targets {targets.shape} vs logits {logits.shape}"
        )
    x = logits.data
    t = targets.astype(x.dtype)
    m = np.broadcast_to(mask, x.shape).astype(x.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -(np.where(t > 0, t * np.log(t), 0.0)
                    + np.where(t < 1, (1 - t) * np.log(1 - t), 0.0))
    loss = (_softplus(x) - x * t - entropy) * m
    # entries clamped to zero carry no gradient
    active = (loss >= 0).astype(x.dtype)

    def vjp(g: np.ndarray) -> Grads:
        return ((g * (sigmoid_array(x) - t) * m * active).astype(x.dtype),)

    return _result(
        np.asarray(np.maximum(loss, 0.0).sum(), dtype=x.dtype), (logits,), vjp,
        "centerness_loss",
    )


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch; logits (N, K) or (N, K, 1, 1)."""
    x = logits.data.reshape(logits.shape[0], -1)
    n, k = x.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"cross_entropy(): labels must be {n} indices below {k}")
    shifted = x - x.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    shape = logits.shape

    def vjp(g: np.ndarray) -> Grads:
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        return ((grad * (g / n)).reshape(shape).astype(x.dtype),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), vjp, "cross_entropy")


def mse_loss(prediction: Tensor, target: np.ndarray) -> Tensor:
    if target.shape != prediction.shape:
        raise ShapeError(
            f"mse_loss(): target {target.shape} vs prediction {prediction.shape}"
        )
    diff = prediction.data - target.astype(prediction.data.dtype)
    size = diff.size

    def vjp(g: np.ndarray) -> Grads:
        return ((2.0 / size) * g * diff,)

    return _result(
        np.asarray((diff * diff).mean(), dtype=prediction.data.dtype),
        (prediction,), vjp, "mse_loss",
    )
