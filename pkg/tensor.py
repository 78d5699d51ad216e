"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the op set the world model and the navigation model need is supported:
elementwise arithmetic, matmul, reductions, a few activations, softmax and
log-sum-exp, concatenation and indexing. ``ParamStore`` owns named parameters
together with their Adam moments and can be snapshotted to the binary
container format of ``file_handler``.
"""

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from errors import DivergenceError, ShapeError, SnapshotError
from file_handler import pack_container, unpack_container

LOG_STD_MIN = -7.0
LOG_STD_MAX = 6.9

_state = threading.local()


def grad_enabled():
    return getattr(_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a backward graph (thread local)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ('data', 'grad', 'requires_grad', 'op', '_parents', '_backward')

    def __init__(self, data, requires_grad=False, op='leaf'):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    # Arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return reduce_sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def clip(self, low, high):
        return clip(self, low, high)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf that requires gradients."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _topological_order(self)
        if not np.isfinite(self.data).all():
            raise DivergenceError(
                f"non-finite loss {float(self.data)}", op=_first_non_finite(order)
            )
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _first_non_finite(order):
    for node in order:
        if not np.isfinite(node.data).all():
            return node.op
    return None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad = tensor.grad + grad


def _record(data, parents, op, backward):
    out = Tensor(data, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# Elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _record(a.data + b.data, (a, b), 'add', backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)
    return _record(-a.data, (a,), 'neg', backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _record(a.data * b.data, (a, b), 'mul', backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))
    return _record(a.data / b.data, (a, b), 'div', backward)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))
    return _record(a.data ** exponent, (a,), 'pow', backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)
    return _record(out_data, (a,), 'exp', backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)
    return _record(np.log(a.data), (a,), 'log', backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))
    return _record(out_data, (a,), 'tanh', backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))
    return _record(out_data, (a,), 'sigmoid', backward)


def clip(a, low, high):
    """Hard clamp; the gradient is zero outside [low, high]."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)

    def backward(g):
        _accumulate(a, g * inside)
    return _record(np.clip(a.data, low, high), (a,), 'clip', backward)


# Shape ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        elif a.ndim == 2 and b.ndim == 1:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)
        else:
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
    return _record(a.data @ b.data, (a, b), 'matmul', backward)


def transpose(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.T)
    return _record(a.data.T, (a,), 'transpose', backward)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _record(a.data.reshape(shape), (a,), 'reshape', backward)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), 'sum', backward)


def take(a, index):
    """Basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)
    return _record(a.data[index], (a,), 'take', backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for tensor, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(tensor, piece)
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat', backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, tensor in enumerate(tensors):
            _accumulate(tensor, np.take(g, i, axis=axis))
    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, 'stack', backward)


# Normalizers

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))
    return _record(out_data, (a,), 'softmax', backward)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    peak = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - peak)
    total = e.sum(axis=axis, keepdims=True)
    weights = e / total
    out_data = np.log(total) + peak
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * weights)
    return _record(out_data, (a,), 'logsumexp', backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


def l2_normalize(a, axis=-1):
    """Scale rows to unit norm. Zero rows are rejected."""
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero embedding vector")
    return a / ((a * a).sum(axis=axis, keepdims=True) ** 0.5)


# Layers

def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


def attention_layer(queries, keys, values, additive_bias=None, return_weights=False):
    """Softmax(Q K^T / sqrt(d) + bias) V with one head.

    ``additive_bias`` has shape (n_q, n_k) and may hold -inf to forbid pairs.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    if queries.ndim != 2 or keys.ndim != 2 or values.ndim != 2:
        raise ShapeError("attention expects 2-D queries, keys and values")
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(f"query dim {queries.shape[1]} != key dim {keys.shape[1]}")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    scores = (queries @ keys.T) * (1.0 / np.sqrt(keys.shape[1]))
    if additive_bias is not None:
        additive_bias = as_tensor(additive_bias)
        if additive_bias.shape != (queries.shape[0], keys.shape[0]):
            raise ShapeError(
                f"bias shape {additive_bias.shape} != {(queries.shape[0], keys.shape[0])}"
            )
        scores = scores + additive_bias
    weights = softmax(scores, axis=-1)
    out = weights @ values
    return (out, weights) if return_weights else out


def gru_cell(inputs, hidden, params, prefix):
    """Gated recurrent update; ``params`` holds ``{prefix}.w_*``, ``u_*`` and ``b_*``."""
    reset = sigmoid(linear(inputs, params[f'{prefix}.w_r']) + linear(hidden, params[f'{prefix}.u_r'])
                    + params[f'{prefix}.b_r'])
    update = sigmoid(linear(inputs, params[f'{prefix}.w_z']) + linear(hidden, params[f'{prefix}.u_z'])
                     + params[f'{prefix}.b_z'])
    candidate = tanh(linear(inputs, params[f'{prefix}.w_h'])
                     + linear(reset * hidden, params[f'{prefix}.u_h']) + params[f'{prefix}.b_h'])
    return (1.0 - update) * hidden + update * candidate


# Distributions and similarity

@dataclass
class DiagGaussian:
    """Diagonal Gaussian with clamped log standard deviation."""

    mean: Tensor
    log_std: Tensor

    @classmethod
    def from_raw(cls, mean, raw_log_std):
        return cls(as_tensor(mean), clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def std(self):
        return exp(self.log_std)

    @property
    def dim(self):
        return self.mean.shape[-1]

    def sample(self, rng=None):
        """Reparameterized draw; ``rng=None`` returns the mean."""
        if rng is None:
            return self.mean
        noise = rng.standard_normal(self.mean.shape)
        return self.mean + self.std * noise

    def detach(self):
        return DiagGaussian(Tensor(self.mean.data), Tensor(self.log_std.data))


def gaussian_kl(q, p, axis=None):
    """Closed-form KL[q || p] for diagonal Gaussians, summed over ``axis``."""
    if q.mean.shape != p.mean.shape or q.log_std.shape != p.log_std.shape:
        raise ShapeError(f"KL dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    diff = q.mean - p.mean
    terms = (p.log_std - q.log_std
             + 0.5 * (exp(2.0 * (q.log_std - p.log_std)) + diff * diff * exp(-2.0 * p.log_std))
             - 0.5)
    return reduce_sum(terms, axis=axis)


def cosine_sim(a, b):
    a = np.asarray(getattr(a, 'data', a), dtype=np.float64)
    b = np.asarray(getattr(b, 'data', b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim shape mismatch {a.shape} vs {b.shape}")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    value = float(a @ b) / (norm_a * norm_b)
    return min(1.0, max(-1.0, value))


# Parameters and optimization

class ParamStore:
    """Named trainable arrays plus Adam state and a global step counter."""

    def __init__(self, seed=0):
        self.params = {}
        self.first_moment = {}
        self.second_moment = {}
        self.step = 0
        self._rng = np.random.default_rng(seed)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def add(self, name, shape, scale=None, zeros=False):
        """Register a parameter; weights default to N(0, 1/fan_in)."""
        if name in self.params:
            raise KeyError(f"parameter {name} already registered")
        shape = tuple(shape)
        if zeros:
            data = np.zeros(shape)
        else:
            if scale is None:
                scale = 1.0 / np.sqrt(shape[0]) if shape else 1.0
            data = self._rng.standard_normal(shape) * scale
        self.params[name] = Tensor(data, requires_grad=True, op=name)
        self.first_moment[name] = np.zeros(shape)
        self.second_moment[name] = np.zeros(shape)
        return self.params[name]

    def set(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: expected {self.params[name].shape}, got {value.shape}")
        self.params[name].data = value.copy()

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def gradients(self):
        return {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in self.params.items()}

    def apply_adam(self, grads, lr, betas=(0.9, 0.999), eps=1e-8):
        """One Adam update; ``lr = 0`` leaves every parameter untouched."""
        beta1, beta2 = betas
        self.step += 1
        for name, tensor in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = beta1 * self.first_moment[name] + (1.0 - beta1) * g
            v = beta2 * self.second_moment[name] + (1.0 - beta2) * g * g
            self.first_moment[name], self.second_moment[name] = m, v
            m_hat = m / (1.0 - beta1 ** self.step)
            v_hat = v / (1.0 - beta2 ** self.step)
            tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        self.check_finite()

    def check_finite(self):
        for name, tensor in self.params.items():
            if not np.isfinite(tensor.data).all():
                raise DivergenceError(f"parameter {name} became non-finite", op=name)

    def arrays(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def to_bytes(self):
        arrays = {}
        for name, tensor in self.params.items():
            arrays[f'param/{name}'] = tensor.data
            arrays[f'adam_m/{name}'] = self.first_moment[name]
            arrays[f'adam_v/{name}'] = self.second_moment[name]
        return pack_container({'kind': 'params', 'step': self.step}, arrays)

    def load_bytes(self, payload):
        """Restore values in place; every registered name must be present with its shape."""
        manifest, arrays = unpack_container(payload)
        if manifest.get('kind') != 'params':
            raise SnapshotError(f"expected a parameter snapshot, got {manifest.get('kind')!r}")
        for name, tensor in self.params.items():
            key = f'param/{name}'
            if key not in arrays:
                raise SnapshotError(f"snapshot is missing parameter {name}")
            if arrays[key].shape != tensor.shape:
                raise SnapshotError(
                    f"{name}: snapshot shape {arrays[key].shape} != model shape {tensor.shape}"
                )
            tensor.data = arrays[key].copy()
            self.first_moment[name] = arrays[f'adam_m/{name}'].copy()
            self.second_moment[name] = arrays[f'adam_v/{name}'].copy()
        self.step = int(manifest['step'])


def grad(loss, store):
    """Reverse-mode gradients of a scalar loss for every parameter in ``store``."""
    store.zero_grad()
    loss.backward()
    return store.gradients()


def numerical_gradient(loss_fn, store, name, h=1e-4, entries=None):
    """Central differences of ``loss_fn()`` w.r.t. selected entries of one parameter."""
    tensor = store[name]
    flat_indices = range(tensor.data.size) if entries is None else entries
    estimate = np.zeros(tensor.data.size)
    for flat in flat_indices:
        index = np.unravel_index(flat, tensor.shape)
        original = tensor.data[index]
        with no_grad():
            tensor.data[index] = original + h
            upper = loss_fn().item()
            tensor.data[index] = original - h
            lower = loss_fn().item()
        tensor.data[index] = original
        estimate[flat] = (upper - lower) / (2.0 * h)
    return estimate.reshape(tensor.shape)


def check_gradients(loss_fn, store, names=None, h=1e-4, max_entries=None, seed=0, floor=1e-4):
    """Max relative error between autodiff and central finite differences.

    ``loss_fn`` must be deterministic (fixed noise) and read parameters from
    ``store``. ``max_entries`` samples that many entries per parameter.
    """
    analytic = grad(loss_fn(), store)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in (names or store.names()):
        size = store[name].data.size
        if max_entries is not None and size > max_entries:
            entries = sorted(rng.choice(size, size=max_entries, replace=False).tolist())
        else:
            entries = list(range(size))
        numeric = numerical_gradient(loss_fn, store, name, h=h, entries=entries)
        a = analytic[name].reshape(-1)[entries]
        n = numeric.reshape(-1)[entries]
        error = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if error.size:
            worst = max(worst, float(error.max()))
    return worst
