"""
Tensor Core - Reverse-mode autodiff engine
Dense numpy-backed tensors, the layer primitives MACO needs, parameter
storage, initializers and a finite-difference gradient oracle
"""
import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

import config
from errors import ConfigError, EmptySetError, ShapeError, TargetError

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# ============================================================================
# PRECISION
# ============================================================================
# Engine-wide dtype for newly created tensors: float32 for training,
# float64 for gradient checking.
_precision = np.dtype(config.TRAIN_PRECISION)


def get_precision() -> np.dtype:
    return _precision


def set_precision(dtype: Union[str, np.dtype, type]) -> None:
    global _precision
    resolved = np.dtype(dtype)
    if resolved.name not in config.VALID_PRECISIONS:
        raise ConfigError(f"Unsupported precision '{resolved}'\nValid options: {config.VALID_PRECISIONS}")
    _precision = resolved


@contextmanager
def precision(dtype: Union[str, np.dtype, type]) -> Iterator[np.dtype]:
    """Temporarily switch the engine precision (e.g. `with precision("float64"):`)."""
    previous = _precision
    set_precision(dtype)
    try:
        yield _precision
    finally:
        set_precision(previous)


# ============================================================================
# TENSOR
# ============================================================================
_node_ids = itertools.count(1)


class Tensor:
    """
    Dense tensor with an optional gradient slot and graph position.

    A tensor takes part in the computation graph only when it has a node_id:
    parameters and watched inputs get one at construction, op outputs get one
    when any input has one. Tensors without a node_id never receive gradient.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ):
        array = np.array(data, dtype=dtype or _precision)
        if 0 in array.shape:
            raise ShapeError(name or "tensor", "zero extents are not allowed", got=array.shape)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id: Optional[int] = next(_node_ids) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Tuple["Tensor", ...],
        backward: BackwardFn,
        name: str,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out.name = name
        if any(p.node_id is not None for p in parents):
            out.node_id = next(_node_ids)
            out._parents = parents
            out._backward = backward
        else:
            out.node_id = None
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(self.name or "tensor", "item() needs a single-element tensor", got=self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        tag = f" node={self.node_id}" if self.node_id is not None else ""
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.data.dtype}{tag}>"


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that receives gradient."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Leaf tensor outside the graph."""
    return Tensor(data, requires_grad=False, name=name)


# ============================================================================
# BACKPROPAGATION
# ============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    """Graph nodes reachable from root, every node after all of its parents."""
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
        for parent in node._parents:
            if parent.node_id is not None and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if grad.shape != tensor.data.shape:
        raise ShapeError(tensor.name or "backward", "gradient shape mismatch", expected=tensor.data.shape, got=grad.shape)
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def backward(
    loss: Tensor,
    params: Optional["ParamStore"] = None,
    *,
    retain_graph: bool = False,
) -> Dict[str, np.ndarray]:
    """
    Reverse-mode accumulation from a scalar loss.

    Args:
        loss: Scalar tensor produced by a recorded graph
        params: ParamStore whose gradients are reset first and returned
        retain_graph: Keep interior nodes (and their grads) after the pass

    Returns:
        Map parameter path -> gradient (zeros for parameters not reached)

    Raises:
        ShapeError: If loss is not a scalar
    """
    if loss.data.size != 1:
        raise ShapeError("backward", "loss must be a scalar", expected="size 1", got=loss.shape)

    if params is not None:
        params.zero_grad()

    order = _topological_order(loss) if loss.node_id is not None else []
    # interior grads left over from a retained pass must not leak into this one
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or parent.node_id is None:
                continue
            _accumulate(parent, grad)

    if not retain_graph:
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.grad = None

    if params is None:
        return {}
    return params.gradients()


# ============================================================================
# PRIMITIVES
# ============================================================================

def elu(x: Tensor, alpha: float = 1.0, path: str = "elu") -> Tensor:
    """x if x > 0 else alpha * (exp(x) - 1)."""
    d = x.data
    out = np.where(d > 0, d, alpha * np.expm1(np.minimum(d, 0)))

    def _backward(g: np.ndarray):
        return (g * np.where(d > 0, 1.0, out + alpha),)

    return Tensor._from_op(out, (x,), _backward, path)


def dense(x: Tensor, weights: Tensor, bias: Tensor, path: str = "dense") -> Tensor:
    """
    Affine map W.x + b for x of extent `in` (or a batch B x in).

    Args:
        x: Tensor[in] or Tensor[B x in]
        weights: Tensor[out x in]
        bias: Tensor[out]
        path: Layer path used in error messages
    """
    if weights.ndim != 2:
        raise ShapeError(path, "weights must be 2-D", expected="out x in", got=weights.shape)
    out_features, in_features = weights.shape
    if x.ndim not in (1, 2):
        raise ShapeError(path, "input must be a vector or a batch of vectors", got=x.shape)
    if x.shape[-1] != in_features:
        raise ShapeError(path, "input extent does not match weights", expected=in_features, got=x.shape[-1])
    if bias.shape != (out_features,):
        raise ShapeError(path, "bias extent does not match weights", expected=(out_features,), got=bias.shape)

    xd, w = x.data, weights.data
    out = xd @ w.T + bias.data

    def _backward(g: np.ndarray):
        gx = g @ w
        if xd.ndim == 1:
            return gx, np.outer(g, xd), g
        return gx, g.T @ xd, g.sum(axis=0)

    return Tensor._from_op(out, (x, weights, bias), _backward, path)


def conv2d_same(x: Tensor, kernels: Tensor, bias: Tensor, path: str = "conv2d") -> Tensor:
    """
    3x3 cross-correlation with zero padding 1, preserving spatial extents.

    Args:
        x: Tensor[H x W x Cin] or Tensor[B x H x W x Cin]
        kernels: Tensor[3 x 3 x Cin x Cout]
        bias: Tensor[Cout]
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(path, "input must be H x W x C or B x H x W x C", got=x.shape)
    if kernels.ndim != 4 or kernels.shape[:2] != (3, 3):
        raise ShapeError(path, "kernels must be 3 x 3 x Cin x Cout", got=kernels.shape)
    batch, height, width, channels = xd.shape
    if kernels.shape[2] != channels:
        raise ShapeError(path, "input channels do not match kernels", expected=kernels.shape[2], got=channels)
    filters = kernels.shape[3]
    if bias.shape != (filters,):
        raise ShapeError(path, "bias extent does not match kernels", expected=(filters,), got=bias.shape)

    k = kernels.data
    padded = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((batch, height, width, filters), dtype=np.result_type(xd, k))
    out += bias.data
    for i in range(3):
        for j in range(3):
            out += padded[:, i:i + height, j:j + width, :] @ k[i, j]

    def _backward(g: np.ndarray):
        g4 = g[None] if squeeze else g
        grad_kernels = np.empty_like(k)
        grad_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                patch = padded[:, i:i + height, j:j + width, :]
                grad_kernels[i, j] = np.tensordot(patch, g4, axes=([0, 1, 2], [0, 1, 2]))
                grad_padded[:, i:i + height, j:j + width, :] += g4 @ k[i, j].T
        gx = grad_padded[:, 1:-1, 1:-1, :]
        return (gx[0] if squeeze else gx), grad_kernels, g4.sum(axis=(0, 1, 2))

    return Tensor._from_op(out[0] if squeeze else out, (x, kernels, bias), _backward, path)


def maxpool2(x: Tensor, path: str = "maxpool") -> Tensor:
    """
    2x2 max pooling with stride 2; an odd trailing row/column is dropped.

    Gradient goes to the first maximal element of each window (row-major).
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(path, "input must be H x W x C or B x H x W x C", got=x.shape)
    batch, height, width, channels = xd.shape
    if height < 2 or width < 2:
        raise ShapeError(path, "pooling window larger than input", expected="H, W >= 2", got=(height, width))
    h2, w2 = height // 2, width // 2

    windows = (
        xd[:, :h2 * 2, :w2 * 2, :]
        .reshape(batch, h2, 2, w2, 2, channels)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(batch, h2, w2, channels, 4)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        g4 = g[None] if squeeze else g
        routed = np.zeros((batch, h2, w2, channels, 4), dtype=g4.dtype)
        np.put_along_axis(routed, argmax[..., None], g4[..., None], axis=-1)
        gx = np.zeros_like(xd)
        gx[:, :h2 * 2, :w2 * 2, :] = (
            routed.reshape(batch, h2, w2, channels, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(batch, h2 * 2, w2 * 2, channels)
        )
        return (gx[0] if squeeze else gx,)

    return Tensor._from_op(out[0] if squeeze else out, (x,), _backward, path)


@dataclass
class BatchNormState:
    """Per-channel scale/shift parameters plus running statistics."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3

    def __post_init__(self):
        channels = self.gamma.shape
        for name, value in [("beta", self.beta.shape), ("running_mean", self.running_mean.shape),
                            ("running_var", self.running_var.shape)]:
            if value != channels:
                raise ShapeError("batchnorm", f"{name} extent differs from gamma", expected=channels, got=value)
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must be in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ConfigError(f"batchnorm epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ConfigError("batchnorm running_var must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, training: bool, path: str = "batchnorm") -> Tensor:
    """
    Batch normalization over every axis but the last (channels).

    Training mode normalizes with batch statistics and updates the running
    statistics with momentum; eval mode uses the running statistics.
    """
    channels = state.channels
    if x.ndim < 2:
        raise ShapeError(path, "input needs a batch axis", expected="B x ... x C", got=x.shape)
    if x.shape[-1] != channels:
        raise ShapeError(path, "channel extent does not match state", expected=channels, got=x.shape[-1])

    axes = tuple(range(x.ndim - 1))
    xd = x.data
    gamma = state.gamma.data
    count = xd.size // channels

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (xd - mean) * inv_std
    out = gamma * xhat + state.beta.data

    def _backward(g: np.ndarray):
        grad_gamma = (g * xhat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        dxhat = g * gamma
        if training:
            gx = (inv_std / count) * (
                count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            gx = dxhat * inv_std
        return gx, grad_gamma, grad_beta

    return Tensor._from_op(out, (x, state.gamma, state.beta), _backward, path)


def conv1d_valid(x: Tensor, kernels: Tensor, bias: Tensor, path: str = "conv1d") -> Tensor:
    """
    Unpadded cross-correlation of width 3 along the sequence axis.

    Args:
        x: Tensor[L x C] or Tensor[B x L x C], L >= 3
        kernels: Tensor[3 x C x F]
        bias: Tensor[F]
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(path, "input must be L x C or B x L x C", got=x.shape)
    batch, length, channels = xd.shape
    if length < 3:
        raise ShapeError(path, "sequence shorter than the kernel", expected="L >= 3", got=length)
    if kernels.ndim != 3 or kernels.shape[0] != 3 or kernels.shape[1] != channels:
        raise ShapeError(path, "kernels must be 3 x C x F", expected=(3, channels, "F"), got=kernels.shape)
    filters = kernels.shape[2]
    if bias.shape != (filters,):
        raise ShapeError(path, "bias extent does not match kernels", expected=(filters,), got=bias.shape)

    k = kernels.data
    out_length = length - 2
    out = np.zeros((batch, out_length, filters), dtype=np.result_type(xd, k))
    out += bias.data
    for i in range(3):
        out += xd[:, i:i + out_length, :] @ k[i]

    def _backward(g: np.ndarray):
        g3 = g[None] if squeeze else g
        grad_kernels = np.empty_like(k)
        gx = np.zeros_like(xd)
        for i in range(3):
            grad_kernels[i] = np.tensordot(xd[:, i:i + out_length, :], g3, axes=([0, 1], [0, 1]))
            gx[:, i:i + out_length, :] += g3 @ k[i].T
        return (gx[0] if squeeze else gx), grad_kernels, g3.sum(axis=(0, 1))

    return Tensor._from_op(out[0] if squeeze else out, (x, kernels, bias), _backward, path)


def concat(a: Tensor, b: Tensor, axis: int = -1, path: str = "concat") -> Tensor:
    """Join two tensors along `axis`; all other extents must agree."""
    if a.ndim != b.ndim:
        raise ShapeError(path, "rank mismatch", expected=a.ndim, got=b.ndim)
    axis = axis % a.ndim
    for dim in range(a.ndim):
        if dim != axis and a.shape[dim] != b.shape[dim]:
            raise ShapeError(path, f"extent mismatch on axis {dim}", expected=a.shape[dim], got=b.shape[dim])
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def _backward(g: np.ndarray):
        first, second = np.split(g, [split], axis=axis)
        return first, second

    return Tensor._from_op(out, (a, b), _backward, path)


def mean_over_set(xs: Sequence[Tensor], path: str = "mean_over_set") -> Tensor:
    """Elementwise arithmetic mean of equally shaped tensors."""
    if len(xs) == 0:
        raise EmptySetError(path, "cannot average an empty set")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(path, "set members differ in shape", expected=shape, got=t.shape)
    count = len(xs)
    out = np.sum([t.data for t in xs], axis=0) / count

    def _backward(g: np.ndarray):
        share = g / count
        return tuple(share for _ in range(count))

    return Tensor._from_op(out, tuple(xs), _backward, path)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(
    logits: Tensor,
    target: Union[int, Sequence[int], np.ndarray],
    path: str = "softmax_xent",
) -> Tuple[Tensor, Tensor]:
    """
    Numerically stable softmax and negative log-likelihood.

    Args:
        logits: Tensor[K] or Tensor[B x K]
        target: class index, or B class indices

    Returns:
        (probs, loss): probabilities (outside the graph) and the mean loss

    Raises:
        TargetError: If a target lies outside [0, K)
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(path, "logits must be K or B x K", got=logits.shape)
    batch, ways = z.shape
    targets = np.atleast_1d(np.asarray(target)).astype(np.int64)
    if targets.shape != (batch,):
        raise ShapeError(path, "one target per logit row", expected=(batch,), got=targets.shape)
    bad = targets[(targets < 0) | (targets >= ways)]
    if bad.size:
        raise TargetError(int(bad[0]), ways)

    log_probs = log_softmax(z)
    probs = np.exp(log_probs)
    rows = np.arange(batch)
    loss = -log_probs[rows, targets].mean()

    def _backward(g: np.ndarray):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        grad *= g / batch
        return (grad[0] if single else grad,)

    loss_tensor = Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), _backward, path)
    probs_tensor = Tensor(probs[0] if single else probs, dtype=z.dtype, name=f"{path}/probs")
    return probs_tensor, loss_tensor


# ============================================================================
# STRUCTURAL HELPERS
# ============================================================================

def add(a: Tensor, b: Tensor, path: str = "add") -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(path, "operands differ in shape", expected=a.shape, got=b.shape)

    def _backward(g: np.ndarray):
        return g, g

    return Tensor._from_op(a.data + b.data, (a, b), _backward, path)


def mul(a: Tensor, b: Tensor, path: str = "mul") -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(path, "operands differ in shape", expected=a.shape, got=b.shape)
    ad, bd = a.data, b.data

    def _backward(g: np.ndarray):
        return g * bd, g * ad

    return Tensor._from_op(ad * bd, (a, b), _backward, path)


def reduce_sum(x: Tensor, path: str = "sum") -> Tensor:
    shape = x.shape

    def _backward(g: np.ndarray):
        return (np.full(shape, g, dtype=x.data.dtype),)

    return Tensor._from_op(np.asarray(x.data.sum()), (x,), _backward, path)


def reshape(x: Tensor, shape: Tuple[int, ...], path: str = "reshape") -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(path, "incompatible reshape", expected=shape, got=original) from e

    def _backward(g: np.ndarray):
        return (g.reshape(original),)

    return Tensor._from_op(out, (x,), _backward, path)


def take_rows(x: Tensor, indices: Union[Sequence[int], np.ndarray], path: str = "take_rows") -> Tensor:
    """Gather rows along axis 0 (repeats allowed); gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError(path, "indices must be a non-empty 1-D list", got=idx.shape)
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise ShapeError(path, "row index out of range", expected=f"[0, {x.shape[0]})", got=(int(idx.min()), int(idx.max())))
    xd = x.data

    def _backward(g: np.ndarray):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._from_op(xd[idx], (x,), _backward, path)


def segment_mean(
    x: Tensor,
    segment_ids: Union[Sequence[int], np.ndarray],
    num_segments: int,
    path: str = "segment_mean",
) -> Tensor:
    """Mean of the rows of x sharing a segment id; every segment must be non-empty."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (x.shape[0],):
        raise ShapeError(path, "one segment id per row", expected=(x.shape[0],), got=ids.shape)
    counts = np.bincount(ids, minlength=num_segments)
    if counts.shape[0] != num_segments or np.any(counts == 0):
        raise EmptySetError(path, "every segment needs at least one row")
    xd = x.data
    trailing = (1,) * (xd.ndim - 1)
    out = np.zeros((num_segments,) + xd.shape[1:], dtype=xd.dtype)
    np.add.at(out, ids, xd)
    out /= counts.reshape((-1,) + trailing)

    def _backward(g: np.ndarray):
        return (g[ids] / counts[ids].reshape((-1,) + trailing),)

    return Tensor._from_op(out, (x,), _backward, path)


def mean_axis(x: Tensor, axis: int, path: str = "mean_axis") -> Tensor:
    axis = axis % x.ndim
    extent = x.shape[axis]
    shape = x.shape

    def _backward(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis) / extent, shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=axis), (x,), _backward, path)


def stack(xs: Sequence[Tensor], path: str = "stack") -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if len(xs) == 0:
        raise EmptySetError(path, "cannot stack an empty list")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(path, "stacked tensors differ in shape", expected=shape, got=t.shape)

    def _backward(g: np.ndarray):
        return tuple(g[i] for i in range(len(xs)))

    return Tensor._from_op(np.stack([t.data for t in xs]), tuple(xs), _backward, path)


# ============================================================================
# PARAMETERS
# ============================================================================

@dataclass(frozen=True)
class ParamSnapshot:
    """Read-only copy of parameter values and running statistics."""
    params: Mapping[str, np.ndarray]
    running: Mapping[str, Tuple[np.ndarray, np.ndarray]]


class ParamStore:
    """
    Named parameters in deterministic (insertion) order.

    Paths follow stage/block/layer/role, e.g. `relational/block1/dense/weight`.
    Batch-norm layers register their gamma/beta here and keep their running
    statistics in `batchnorm[path]`.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.batchnorm: Dict[str, BatchNormState] = {}

    def add(self, path: str, value: ArrayLike) -> Tensor:
        if path in self._params:
            raise ConfigError(f"Duplicate parameter path: {path}")
        tensor = parameter(value, name=path)
        self._params[path] = tensor
        return tensor

    def add_batchnorm(self, path: str, channels: int, momentum: float, epsilon: float) -> BatchNormState:
        gamma = self.add(f"{path}/gamma", np.ones(channels))
        beta = self.add(f"{path}/beta", np.zeros(channels))
        state = BatchNormState(
            gamma=gamma,
            beta=beta,
            running_mean=np.zeros(channels, dtype=gamma.data.dtype),
            running_var=np.ones(channels, dtype=gamma.data.dtype),
            momentum=momentum,
            epsilon=epsilon,
        )
        self.batchnorm[path] = state
        return state

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self) -> List[str]:
        return list(self._params)

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        """Current gradients; parameters that received none report zeros."""
        grads = {}
        for path, tensor in self._params.items():
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            grads[path] = tensor.grad
        return grads

    def snapshot(self) -> ParamSnapshot:
        params = {}
        for path, tensor in self._params.items():
            value = tensor.data.copy()
            value.setflags(write=False)
            params[path] = value
        running = {}
        for path, state in self.batchnorm.items():
            mean, var = state.running_mean.copy(), state.running_var.copy()
            mean.setflags(write=False)
            var.setflags(write=False)
            running[path] = (mean, var)
        return ParamSnapshot(params=params, running=running)

    def load_snapshot(self, snapshot: ParamSnapshot) -> None:
        """Copy values (and running statistics) into this store in place."""
        for path, tensor in self._params.items():
            if path not in snapshot.params:
                raise ConfigError(f"Snapshot is missing parameter '{path}'")
            value = snapshot.params[path]
            if value.shape != tensor.shape:
                raise ShapeError(path, "snapshot shape mismatch", expected=tensor.shape, got=value.shape)
            tensor.data = np.array(value, dtype=tensor.data.dtype)
        for path, state in self.batchnorm.items():
            if path not in snapshot.running:
                raise ConfigError(f"Snapshot is missing running statistics for '{path}'")
            mean, var = snapshot.running[path]
            state.running_mean = np.array(mean, dtype=state.running_mean.dtype)
            state.running_var = np.array(var, dtype=state.running_var.dtype)

    def copy(self, dtype: Optional[Union[str, np.dtype]] = None) -> "ParamStore":
        """Independent copy, optionally cast to another precision."""
        clone = ParamStore()
        for path, tensor in self._params.items():
            clone._params[path] = Tensor(tensor.data, requires_grad=True, name=path, dtype=dtype or tensor.data.dtype)
        for path, state in self.batchnorm.items():
            target = np.dtype(dtype) if dtype else state.running_mean.dtype
            clone.batchnorm[path] = BatchNormState(
                gamma=clone._params[f"{path}/gamma"],
                beta=clone._params[f"{path}/beta"],
                running_mean=state.running_mean.astype(target),
                running_var=state.running_var.astype(target),
                momentum=state.momentum,
                epsilon=state.epsilon,
            )
        return clone


# ============================================================================
# INITIALIZERS
# ============================================================================

def lecun_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Normal(0, 1/fan_in) - fully connected layers."""
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)


def glorot_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """Normal(0, 2/(fan_in + fan_out)) - convolutional layers."""
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


# ============================================================================
# GRADIENT ORACLE
# ============================================================================

def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _sample_coords(size: int, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or max_coords >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Union[Tensor, ArrayLike],
    *,
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare backward() against central differences at `point`.

    The step per coordinate is step * (1 + |theta|). Run under
    `precision("float64")` for meaningful tolerances.

    Args:
        fn: Maps a tensor to a scalar tensor
        point: Where to evaluate
        max_coords: Check only a random subset of coordinates
        seed: RNG seed for the coordinate subset

    Returns:
        max over checked coordinates of |a - n| / max(1, |a|, |n|)
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=_precision)
    leaf = Tensor(base.copy(), requires_grad=True, name="grad_check/point")
    backward(fn(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    worst = 0.0
    for c in _sample_coords(flat.size, max_coords, np.random.default_rng(seed)):
        h = step * (1.0 + abs(flat[c]))
        plus, minus = flat.copy(), flat.copy()
        plus[c] += h
        minus[c] -= h
        f_plus = fn(constant(plus.reshape(base.shape))).item()
        f_minus = fn(constant(minus.reshape(base.shape))).item()
        numeric = (f_plus - f_minus) / (plus[c] - minus[c])
        worst = max(worst, _relative_error(float(analytic.reshape(-1)[c]), numeric))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    *,
    step: float = 1e-5,
    coords_per_param: Optional[int] = 3,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Gradient oracle over every parameter of a store.

    Returns:
        Map parameter path -> worst relative error over its checked coordinates
    """
    grads = {path: g.copy() for path, g in backward(loss_fn(), params).items()}
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}

    for path, tensor in params.items():
        flat = tensor.data.reshape(-1)
        worst = 0.0
        for c in _sample_coords(flat.size, coords_per_param, rng):
            original = flat[c]
            h = step * (1.0 + abs(original))
            flat[c] = original + h
            f_plus = loss_fn().item()
            upper = flat[c]
            flat[c] = original - h
            f_minus = loss_fn().item()
            lower = flat[c]
            flat[c] = original
            numeric = (f_plus - f_minus) / (upper - lower)
            worst = max(worst, _relative_error(float(grads[path].reshape(-1)[c]), numeric))
        errors[path] = worst

    worst_path = max(errors, key=errors.get) if errors else None
    if worst_path is not None:
        logger.debug(f"grad_check_params: worst {errors[worst_path]:.2e} at {worst_path}")
    return errors
