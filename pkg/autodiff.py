"""
Reverse-mode differentiation over dense float64 numpy arrays.

Only what the codec needs: elementwise arithmetic on equal shapes (plus
scalars), reductions, ELU/ReLU, causal and transposed 1-D convolutions over
[time x channels] tensors, framing for spectrograms, frame repetition and
the straight-through estimator. Parameters live in a ParameterStore that
also carries the Adam moments and the frozen set.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from errors import ContractViolation, TrainingAbort

logger = logging.getLogger(__name__)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = self.name or self._op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if g.shape != self.value.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match value shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self):
        """Propagate d(self)/d(leaf) into every leaf that requires a gradient."""
        if self.value.size != 1:
            raise ContractViolation(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior gradients are not needed once pushed to the parents
            node.grad = None

    # operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.value.size)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _result(value: np.ndarray, parents: Iterable[Tensor | None], backward, op: str) -> Tensor:
    if not np.isfinite(value).all():
        raise TrainingAbort(f"non-finite values produced by {op}")
    parents = tuple(p for p in parents if p is not None)
    out = Tensor(value)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.value.ndim and b.value.ndim and a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# === ELEMENTWISE ===

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g if a.value.ndim else np.asarray(g.sum()))
        if b.requires_grad:
            b._accumulate(g if b.value.ndim else np.asarray(g.sum()))

    return _result(a.value + b.value, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            ga = g * b.value
            a._accumulate(ga if a.value.ndim else np.asarray(ga.sum()))
        if b.requires_grad:
            gb = g * a.value
            b._accumulate(gb if b.value.ndim else np.asarray(gb.sum()))

    return _result(a.value * b.value, (a, b), backward, "mul")


def neg(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(-g)

    return _result(-x.value, (x,), backward, "neg")


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g * np.sign(x.value))

    return _result(np.abs(x.value), (x,), backward, "abs")


def square(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(2.0 * g * x.value)

    return _result(x.value * x.value, (x,), backward, "square")


def sqrt(x: Tensor) -> Tensor:
    value = np.sqrt(x.value)

    def backward(g):
        # subgradient 0 at the origin, where the derivative is unbounded
        safe = np.where(value > 0.0, value, 1.0)
        x._accumulate(np.where(value > 0.0, g / (2.0 * safe), 0.0))

    return _result(value, (x,), backward, "sqrt")


def log(x: Tensor) -> Tensor:
    if (x.value <= 0.0).any():
        raise ContractViolation("log of a non-positive value; clamp first")

    def backward(g):
        x._accumulate(g / x.value)

    return _result(np.log(x.value), (x,), backward, "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    def backward(g):
        x._accumulate(np.where(x.value > floor, g, 0.0))

    return _result(np.maximum(x.value, floor), (x,), backward, "clamp_min")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    value = elu_array(x.value, alpha)

    def backward(g):
        x._accumulate(np.where(x.value > 0.0, g, g * (value + alpha)))

    return _result(value, (x,), backward, "elu")


def elu_array(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    return np.where(x > 0.0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def relu(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.where(x.value > 0.0, g, 0.0))

    return _result(np.maximum(x.value, 0.0), (x,), backward, "relu")


def total(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.full_like(x.value, float(g)))

    return _result(np.asarray(x.value.sum()), (x,), backward, "sum")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _result(a.value @ b.value, (a, b), backward, "matmul")


def straight_through(v: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward value is `quantized`; the gradient reaches `v` unchanged."""
    quantized = np.asarray(quantized, dtype=np.float64)
    if quantized.shape != v.shape:
        raise ContractViolation(f"straight_through: shape {quantized.shape} vs {v.shape}")

    def backward(g):
        v._accumulate(g)

    return _result(quantized.copy(), (v,), backward, "straight_through")


# === SHAPE ===

def take(x: Tensor, index) -> Tensor:
    value = x.value[index]

    def backward(g):
        full = np.zeros_like(x.value)
        full[index] += g
        x._accumulate(full)

    return _result(np.array(value, copy=True), (x,), backward, "take")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.value.reshape(shape).copy(), (x,), backward, "reshape")


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    value = np.concatenate([t.value for t in tensors], axis=axis)
    return _result(value, tensors, backward, "concat")


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad along axis 0."""
    widths = [(left, right)] + [(0, 0)] * (x.value.ndim - 1)

    def backward(g):
        x._accumulate(g[left: left + x.shape[0]])

    return _result(np.pad(x.value, widths), (x,), backward, "pad_time")


def frames(x: Tensor, size: int, hop: int) -> Tensor:
    """Overlapping frames [num_frames x size] of a 1-D signal whose length is a multiple of hop."""
    n = x.shape[0]
    if x.value.ndim != 1 or size % hop or n % hop or n < size:
        raise ContractViolation(f"frames: need 1-D length multiple of hop={hop} and >= size={size}, got {x.shape}")
    blocks_per_frame = size // hop
    count = n // hop - blocks_per_frame + 1
    blocks = x.value.reshape(-1, hop)
    value = np.concatenate([blocks[j: j + count] for j in range(blocks_per_frame)], axis=1)

    def backward(g):
        gblocks = np.zeros_like(blocks)
        for j in range(blocks_per_frame):
            gblocks[j: j + count] += g[:, j * hop: (j + 1) * hop]
        x._accumulate(gblocks.reshape(-1))

    return _result(value, (x,), backward, "frames")


def repeat_frames(x: Tensor, factor: int, length: int) -> Tensor:
    """Repeat each row `factor` times and keep the first `length` rows."""
    if length > x.shape[0] * factor:
        raise ContractViolation(f"repeat_frames: {x.shape[0]} rows x {factor} < {length}")
    value = np.repeat(x.value, factor, axis=0)[:length]

    def backward(g):
        full = np.zeros((x.shape[0] * factor,) + x.shape[1:])
        full[:length] = g
        x._accumulate(full.reshape((x.shape[0], factor) + x.shape[1:]).sum(axis=1))

    return _result(value, (x,), backward, "repeat_frames")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean over `factor` time steps; a trailing partial block is dropped."""
    count = x.shape[0] // factor
    blocks = x.value[: count * factor].reshape((count, factor) + x.shape[1:])

    def backward(g):
        full = np.zeros_like(x.value)
        full[: count * factor] = np.repeat(g / factor, factor, axis=0)
        x._accumulate(full)

    return _result(blocks.mean(axis=1), (x,), backward, "avg_pool")


# === CONVOLUTION ===

def _windows(padded: np.ndarray, kernel_size: int, stride: int, count: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(padded, kernel_size, axis=0)
    view = view[: (count - 1) * stride + 1: stride]
    return np.ascontiguousarray(view.transpose(0, 2, 1)).reshape(count, kernel_size * padded.shape[1])


def conv1d_valid(signal: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None, stride: int) -> np.ndarray:
    """Windows start at 0, stride, ...; used by the streaming layers on history + chunk."""
    k, cin, cout = kernel.shape
    count = (signal.shape[0] - k) // stride + 1
    if count <= 0:
        return np.zeros((0, cout))
    out = _windows(signal, k, stride, count) @ kernel.reshape(k * cin, cout)
    if bias is not None:
        out += bias
    return out


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """
    Causal strided convolution of x [T x C_in] with kernel [K x C_in x C_out].
    Output frame t reads input samples t*stride-K+1 .. t*stride (zeros before 0),
    giving ceil(T/stride) frames.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    k, cin, cout = kernel.shape
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    if x.value.ndim != 2 or x.shape[1] != cin:
        raise ContractViolation(f"conv1d_causal: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ContractViolation(f"conv1d_causal: bias {bias.shape} does not match {cout} channels")

    t_in = x.shape[0]
    count = -(-t_in // stride)
    padded = np.concatenate([np.zeros((k - 1, cin)), x.value])
    cols = _windows(padded, k, stride, count)
    wmat = kernel.value.reshape(k * cin, cout)
    value = cols @ wmat
    if bias is not None:
        value = value + bias.value

    def backward(g):
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g).reshape(k, cin, cout))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(count, k, cin)
            gpad = np.zeros_like(padded)
            for tap in range(k):
                gpad[tap: tap + stride * count: stride] += gcols[:, tap]
            x._accumulate(gpad[k - 1:])

    return _result(value, (x, kernel, bias), backward, "conv1d_causal")


def _scatter_taps(cols: np.ndarray, stride: int, length: int) -> np.ndarray:
    """buffer[t*stride + k] += cols[t, k] for a [T x K x C] column block."""
    t_in, k, cout = cols.shape
    buffer = np.zeros((length, cout))
    for tap in range(k):
        buffer[tap: tap + stride * t_in: stride] += cols[:, tap]
    return buffer


def transposed_columns(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k, cin, cout = kernel.shape
    wmat = kernel.transpose(1, 0, 2).reshape(cin, k * cout)
    return (x @ wmat).reshape(x.shape[0], k, cout)


def overlap_add(cols: np.ndarray, stride: int) -> np.ndarray:
    """Causal overlap-add of one chunk: stride*T samples plus the max(K-stride, 0) sample tail."""
    t_in, k, _ = cols.shape
    return _scatter_taps(cols, stride, stride * t_in + max(k - stride, 0))


def conv1d_transposed(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                      causal: bool = False) -> Tensor:
    """
    Transposed convolution of x [T_in x C_in] with kernel [K x C_in x C_out] into
    stride*T_in output samples.

    By default this is the exact adjoint of conv1d_causal: frame t scatters onto
    samples t*stride-K+1 .. t*stride. With causal=True frame t scatters onto
    t*stride .. t*stride+K-1 instead, so output sample n depends only on frames
    <= n // stride; the decoder uses that form.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    k, cin, cout = kernel.shape
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    if x.value.ndim != 2 or x.shape[1] != cin:
        raise ContractViolation(f"conv1d_transposed: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ContractViolation(f"conv1d_transposed: bias {bias.shape} does not match {cout} channels")

    t_in = x.shape[0]
    length = stride * t_in
    offset = 0 if causal else k - 1
    wmat = kernel.value.transpose(1, 0, 2).reshape(cin, k * cout)
    cols = (x.value @ wmat).reshape(t_in, k, cout)
    buffer = _scatter_taps(cols, stride, length + k)
    value = buffer[offset: offset + length]
    if bias is not None:
        value = value + bias.value

    def backward(g):
        gbuf = np.zeros((length + k, cout))
        gbuf[offset: offset + length] = g
        gcols = np.stack([gbuf[tap: tap + stride * t_in: stride] for tap in range(k)], axis=1)
        gflat = gcols.reshape(t_in, k * cout)
        if x.requires_grad:
            x._accumulate(gflat @ wmat.T)
        if kernel.requires_grad:
            kernel._accumulate((x.value.T @ gflat).reshape(cin, k, cout).transpose(1, 0, 2))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(np.array(value, copy=True), (x, kernel, bias), backward, "conv1d_transposed")


# === PARAMETERS & OPTIMIZER ===

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


class ParameterStore:
    """Named parameters, their Adam moments and the set of frozen names."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.first_moments: dict[str, np.ndarray] = {}
        self.second_moments: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name {name}")
        tensor = Tensor(value, requires_grad=True, name=name)
        self.params[name] = tensor
        self.first_moments[name] = np.zeros_like(tensor.value)
        self.second_moments[name] = np.zeros_like(tensor.value)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def freeze(self, prefixes: Iterable[str]):
        prefixes = tuple(prefixes)
        self.frozen |= {name for name in self.params if name.startswith(prefixes)}

    def unfreeze_all(self):
        self.frozen.clear()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def check_gradients(self):
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise TrainingAbort(f"non-finite gradient in parameter {name}")

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale the trainable gradients to a global L2 norm of at most max_norm; returns the norm before."""
        if max_norm <= 0.0:
            raise ContractViolation(f"max_norm must be > 0, got {max_norm}")
        trainable = [p for name, p in self.params.items() if name not in self.frozen and p.grad is not None]
        norm = float(np.sqrt(sum(np.sum(p.grad * p.grad) for p in trainable)))
        if norm > max_norm:
            scale = max_norm / norm
            for p in trainable:
                p.grad = p.grad * scale
        return norm

    def snapshot(self, prefixes: Iterable[str] = ("",)) -> dict[str, np.ndarray]:
        prefixes = tuple(prefixes)
        return {name: p.value.copy() for name, p in self.params.items() if name.startswith(prefixes)}


def adam_step(store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-8):
    """One Adam update of every non-frozen parameter; a missing gradient counts as zero."""
    store.step_count += 1
    t = store.step_count
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        if name in store.frozen:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        m = store.first_moments[name]
        v = store.second_moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def gradient_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-4) -> dict[str, float]:
    """
    Compare backward() against central finite differences.

    Returns, per parameter, ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
                for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            up = float(loss_fn().value)
            flat[i] = original - h
            down = float(loss_fn().value)
            flat[i] = original
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(analytic[name] - numeric) / scale)
        logger.debug(f"gradient check {name}: relative error {errors[name]:.2e}")
    return errors
