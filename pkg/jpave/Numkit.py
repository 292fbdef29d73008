"""Dense numeric core.

A small reverse-mode differentiation tape over :mod:`numpy` arrays. Every
operation builds a :class:`DenseTensor` node holding its forward value and a
closure that maps the output gradient to the gradients of its inputs.
:meth:`DenseTensor.backward` walks the tape in reverse topological order and
accumulates into the ``grad`` buffer of every :class:`Parameter` it reaches.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from dataclasses import fields
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from .Constants import DTYPE
from .Constants import LOG_FLOOR
from .Constants import PROB_CLAMP
from .Exceptions import ContractError
from .Exceptions import GradCheckError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class DenseTensor:
    """A dense float array that remembers how it was computed.

    Args:
        data: Values of the tensor; copied into a contiguous array of the
            configured float type.
        parents: Tensors this one was computed from.
        backward: Maps the gradient of this tensor to one gradient (or
            ``None``) per parent.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        parents: Tuple["DenseTensor", ...] = (),
        backward: Optional[Backward] = None,
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    @property
    def requires_grad(self) -> bool:
        return bool(self._parents)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        """Back-propagate from this scalar into every reachable parameter."""
        if self.data.size != 1:
            raise ContractError("backward() is only defined for scalar tensors.")

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
                continue
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


class Parameter(DenseTensor):
    """A named trainable tensor with its gradient buffer.

    Args:
        name: Dotted path, e.g. ``encoder.gru_fwd.W_z``.
        data: Initial value.
        frozen: Frozen parameters still receive gradients but the optimizer
            never updates them.
    """

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, data: ArrayLike, frozen: bool = False) -> None:
        super().__init__(data)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name}, shape={self.shape})"

    @property
    def requires_grad(self) -> bool:
        return True

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _topological_order(root: DenseTensor) -> List[DenseTensor]:
    order: List[DenseTensor] = []
    visited = set()
    stack: List[Tuple[DenseTensor, bool]] = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


class ModelParams:
    """Registry of every trainable tensor of one model, addressable by name."""

    def __init__(self) -> None:
        self._params: Dict[str, Parameter] = {}

    def __repr__(self) -> str:
        return f"ModelParams(n={len(self._params)})"

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"No parameter named {name}.") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def add(self, name: str, data: ArrayLike, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise ContractError(f"Parameter {name} is already registered.")
        param = Parameter(name, data, frozen=frozen)
        self._params[name] = param
        return param

    def zero_grad(self) -> None:
        for param in self:
            param.zero_grad()

    def size(self) -> int:
        return sum(param.data.size for param in self)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self)))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self._params.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            param = self[name]
            if list(value.shape) != param.shape:
                raise ContractError(
                    f"Shape mismatch for {name}: {list(value.shape)} vs {param.shape}"
                )
            param.data = np.array(value, dtype=DTYPE)


def as_tensor(value: Union[DenseTensor, ArrayLike]) -> DenseTensor:
    if isinstance(value, DenseTensor):
        return value
    return DenseTensor(value)


def _node(data: np.ndarray, parents: Tuple[DenseTensor, ...], backward: Backward) -> DenseTensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return DenseTensor(data, parents, backward)
    return DenseTensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(name: str, *tensors: DenseTensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"{name} received non-finite input.")


def add(a, b) -> DenseTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward)


def sub(a, b) -> DenseTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), backward)


def mul(a, b) -> DenseTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), backward)


def matmul(a, b) -> DenseTensor:
    """Matrix (or matrix-vector, vector-matrix, dot) product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ContractError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.data.ndim == 2 and b.data.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.data.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        if b.data.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data

    return _node(out, (a, b), backward)


def transpose(a) -> DenseTensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"transpose needs a matrix, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return _node(a.data.T.copy(), (a,), backward)


def concat(tensors: Sequence[DenseTensor], axis: int = 0) -> DenseTensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ContractError("concat needs at least one tensor.")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, parts, backward)


def stack(tensors: Sequence[DenseTensor]) -> DenseTensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ContractError("stack needs at least one tensor.")
    out = np.stack([p.data for p in parts])

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return _node(out, parts, backward)


def sigmoid(a) -> DenseTensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), backward)


def tanh(a) -> DenseTensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), backward)


def softmax(logits) -> DenseTensor:
    """Softmax over the last axis, stabilised by max-subtraction."""
    logits = as_tensor(logits)
    if logits.data.size == 0 or logits.data.shape[-1] == 0:
        raise ContractError("softmax of an empty vector.")
    _check_finite("softmax", logits)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (logits,), backward)


def gather_rows(matrix, index: Union[int, Sequence[int], np.ndarray]) -> DenseTensor:
    """Rows of ``matrix`` at ``index``; an int index yields a vector."""
    matrix = as_tensor(matrix)
    idx = index if isinstance(index, (int, np.integer)) else np.asarray(index, dtype=np.int64)
    n_rows = matrix.data.shape[0]
    if np.any(np.asarray(idx) < 0) or np.any(np.asarray(idx) >= n_rows):
        raise ContractError(f"Row index out of range for {n_rows} rows.")
    out = matrix.data[idx]

    def backward(g):
        grad = np.zeros_like(matrix.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _node(out, (matrix,), backward)


def scatter_add(src, index: Sequence[int], size: int) -> DenseTensor:
    """Sum ``src[k]`` into position ``index[k]`` of a zero vector of ``size``."""
    src = as_tensor(src)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != src.data.shape:
        raise ContractError(f"scatter_add index shape {idx.shape} != source shape {src.shape}")
    if np.any(idx < 0) or np.any(idx >= size):
        raise ContractError(f"scatter_add index out of range for size {size}.")
    out = np.zeros(size, dtype=DTYPE)
    np.add.at(out, idx, src.data)

    def backward(g):
        return (g[idx],)

    return _node(out, (src,), backward)


def mean(a, axis: Optional[int] = None) -> DenseTensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape) / count,)

    return _node(out, (a,), backward)


def total(a) -> DenseTensor:
    a = as_tensor(a)

    def backward(g):
        return (np.full_like(a.data, float(g)),)

    return _node(a.data.sum(), (a,), backward)


def add_all(tensors: Sequence[DenseTensor]) -> DenseTensor:
    """Sum scalar tensors in the order given."""
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        return DenseTensor(0.0)
    out = np.array(0.0, dtype=DTYPE)
    for p in parts:
        out = out + p.data

    def backward(g):
        return tuple(np.broadcast_to(g, p.data.shape).copy() for p in parts)

    return _node(out.reshape(()), parts, backward)


def cross_entropy(probs, target: int) -> DenseTensor:
    """``-log p[target]`` against a one-hot target, floored at ``LOG_FLOOR``."""
    probs = as_tensor(probs)
    if probs.data.ndim != 1 or not 0 <= target < probs.data.shape[0]:
        raise ContractError(f"cross_entropy target {target} invalid for shape {probs.shape}")
    p = float(probs.data[target])
    out = -np.log(max(p, LOG_FLOOR))

    def backward(g):
        grad = np.zeros_like(probs.data)
        if p > LOG_FLOOR:
            grad[target] = -float(g) / p
        return (grad,)

    return _node(np.array(out), (probs,), backward)


def binary_cross_entropy(probs, targets: ArrayLike) -> DenseTensor:
    """Summed binary cross-entropy; probabilities clamped to ``[c, 1 - c]``."""
    probs = as_tensor(probs)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != probs.data.shape:
        raise ContractError(f"BCE target shape {y.shape} != prediction shape {probs.shape}")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ContractError("BCE targets must be 0 or 1.")
    clipped = np.clip(probs.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = -np.sum(y * np.log(clipped) + (1.0 - y) * np.log(1.0 - clipped))
    inside = (probs.data > PROB_CLAMP) & (probs.data < 1.0 - PROB_CLAMP)

    def backward(g):
        grad = (-(y / clipped) + (1.0 - y) / (1.0 - clipped)) * float(g)
        return (np.where(inside, grad, 0.0),)

    return _node(np.array(out), (probs,), backward)


@dataclass
class GruCellParams:
    """Weights of one GRU cell (hidden x input, hidden x hidden, hidden)."""

    W_z: Parameter
    W_r: Parameter
    W_h: Parameter
    U_z: Parameter
    U_r: Parameter
    U_h: Parameter
    b_z: Parameter
    b_r: Parameter
    b_h: Parameter

    def __post_init__(self) -> None:
        hidden, inputs = self.input_shape
        for gate in ("z", "r", "h"):
            w = getattr(self, f"W_{gate}").shape
            u = getattr(self, f"U_{gate}").shape
            b = getattr(self, f"b_{gate}").shape
            if w != [hidden, inputs] or u != [hidden, hidden] or b != [hidden]:
                raise ContractError(f"Inconsistent GRU shapes for gate {gate}: {w}, {u}, {b}")

    @property
    def input_shape(self) -> Tuple[int, int]:
        hidden, inputs = self.W_z.shape
        return hidden, inputs

    @property
    def hidden_size(self) -> int:
        return self.input_shape[0]

    @property
    def input_size(self) -> int:
        return self.input_shape[1]

    def tensors(self) -> Tuple[Parameter, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @classmethod
    def register(
        cls,
        params: ModelParams,
        prefix: str,
        input_size: int,
        hidden_size: int,
        rng: np.random.Generator,
        init_range: float,
    ) -> "GruCellParams":
        """Create the nine cell tensors under ``prefix`` in ``params``."""
        created = {}
        for f in fields(cls):
            if f.name.startswith("W_"):
                shape: Tuple[int, ...] = (hidden_size, input_size)
            elif f.name.startswith("U_"):
                shape = (hidden_size, hidden_size)
            else:
                shape = (hidden_size,)
            created[f.name] = params.add(
                f"{prefix}.{f.name}", uniform(rng, shape, init_range)
            )
        return cls(**created)

    @classmethod
    def lookup(cls, params: ModelParams, prefix: str) -> "GruCellParams":
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


def gru_cell(x, h_prev, p: GruCellParams) -> DenseTensor:
    """One GRU step.

    ``z = sigmoid(W_z x + U_z h + b_z)``, ``r = sigmoid(W_r x + U_r h + b_r)``,
    ``h~ = tanh(W_h x + U_h (r * h) + b_h)``, ``h' = (1 - z) * h + z * h~``.
    """
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    if x.data.shape != (p.input_size,) or h_prev.data.shape != (p.hidden_size,):
        raise ContractError(
            f"gru_cell expects x of {p.input_size} and h of {p.hidden_size}, "
            f"got {x.shape} and {h_prev.shape}"
        )
    xv, hv = x.data, h_prev.data
    z = 0.5 * (1.0 + np.tanh(0.5 * (p.W_z.data @ xv + p.U_z.data @ hv + p.b_z.data)))
    r = 0.5 * (1.0 + np.tanh(0.5 * (p.W_r.data @ xv + p.U_r.data @ hv + p.b_r.data)))
    rh = r * hv
    hh = np.tanh(p.W_h.data @ xv + p.U_h.data @ rh + p.b_h.data)
    out = (1.0 - z) * hv + z * hh

    def backward(g):
        d_ah = g * z * (1.0 - hh * hh)
        d_az = g * (hh - hv) * z * (1.0 - z)
        d_rh = p.U_h.data.T @ d_ah
        d_ar = d_rh * hv * r * (1.0 - r)
        d_x = p.W_z.data.T @ d_az + p.W_r.data.T @ d_ar + p.W_h.data.T @ d_ah
        d_h = g * (1.0 - z) + d_rh * r + p.U_z.data.T @ d_az + p.U_r.data.T @ d_ar
        return (
            d_x,
            d_h,
            np.outer(d_az, xv),
            np.outer(d_ar, xv),
            np.outer(d_ah, xv),
            np.outer(d_az, hv),
            np.outer(d_ar, hv),
            np.outer(d_ah, rh),
            d_az,
            d_ar,
            d_ah,
        )

    return _node(out, (x, h_prev) + p.tensors(), backward)


def uniform(rng: np.random.Generator, shape: Tuple[int, ...], scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(DTYPE)


def grad_check(
    f: Callable[[ModelParams], DenseTensor],
    params: ModelParams,
    eps: float = 1e-5,
    names: Optional[Sequence[str]] = None,
) -> float:
    """Compare analytic gradients with central finite differences.

    Args:
        f: Deterministic scalar function of the registry.
        params: The registry ``f`` reads.
        eps: Finite-difference step, in ``(0, 1e-3]``.
        names (optional): Restrict the check to these parameters.

    Raises:
        ContractError: If ``eps`` is out of range or ``f`` is not scalar.
        GradCheckError: If a perturbed evaluation is not finite.

    Returns:
        float: Max over all checked entries of
        ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0.0 < eps <= 1e-3:
        raise ContractError(f"grad_check eps must lie in (0, 1e-3], got {eps}")

    params.zero_grad()
    loss = f(params)
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise ContractError("grad_check needs a finite scalar loss.")
    loss.backward()

    checked = [params[n] for n in names] if names is not None else list(params)
    worst = 0.0
    worst_at = ""
    with no_grad():
        for param in checked:
            analytic = param.grad.reshape(-1).copy()
            for i in range(param.data.size):
                original = param.data.flat[i]
                param.data.flat[i] = original + eps
                plus = f(params).item()
                param.data.flat[i] = original - eps
                minus = f(params).item()
                param.data.flat[i] = original
                if not (np.isfinite(plus) and np.isfinite(minus)):
                    raise GradCheckError(
                        f"Non-finite loss when perturbing {param.name}[{i}]",
                        parameter=param.name,
                        index=i,
                    )
                numeric = (plus - minus) / (2.0 * eps)
                error = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
                if error > worst:
                    worst, worst_at = error, f"{param.name}[{i}]"

    logger.debug("grad_check max relative error %.3e at %s", worst, worst_at or "-")
    return worst
