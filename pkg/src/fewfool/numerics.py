"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Everything is float64 on top of numpy. The graph is built eagerly: each
operation returns a Tensor carrying a closure that pushes gradients to its
parents. Networks in this project are tiny, so precision and determinism
win over speed everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity", "softmax", "tanh")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """backward() was called on an unsuitable node."""


class NonFiniteError(FloatingPointError):
    """A value or gradient turned NaN/Inf."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _op(data, parents, backward_fn) -> "Tensor":
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- basics ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._op(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._op(-self.data, (self,), backward)

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._op(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        return Tensor._op(out_data, (self, other), backward)

    def __matmul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul dimension mismatch: {self.data.shape} @ {other.data.shape}"
            )
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._op(out_data, (self, other), backward)

    # -- nonlinearities ----------------------------------------------------

    def relu(self) -> "Tensor":
        # Subgradient at 0 is 0.
        mask = (self.data > 0).astype(np.float64)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor._op(np.maximum(self.data, 0.0), (self,), backward)

    def sigmoid(self) -> "Tensor":
        # Split form avoids exp overflow for large |x|.
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._op(out_data, (self,), backward)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._op(out_data, (self,), backward)

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * sign)

        return Tensor._op(np.abs(self.data), (self,), backward)

    def clip(self, lo: float | None, hi: float | None) -> "Tensor":
        # Gradient is zero outside [lo, hi].
        inside = np.ones_like(self.data)
        if lo is not None:
            inside = inside * (self.data >= lo)
        if hi is not None:
            inside = inside * (self.data <= hi)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * inside)

        return Tensor._op(np.clip(self.data, lo, hi), (self,), backward)

    def softmax(self) -> "Tensor":
        """Row-wise softmax with max-subtraction for stability."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            if self.requires_grad:
                dot = (g * out_data).sum(axis=-1, keepdims=True)
                self._accumulate(out_data * (g - dot))

        return Tensor._op(out_data, (self,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        out_data = self.data.sum(axis=axis)

        def backward(g):
            if self.requires_grad:
                if axis is None:
                    self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                else:
                    self._accumulate(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())

        return Tensor._op(out_data, (self,), backward)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Populate .grad on every reachable Parameter with d(self)/d(param)."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("loss is not finite")
        if not self.requires_grad:
            warnings.warn("backward() on a detached graph: no gradients will flow",
                          RuntimeWarning, stacklevel=2)
            return

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A trainable Tensor with a name and per-optimizer state."""

    __slots__ = ("name", "state")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.state: dict = {}


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss."""
    loss.backward()


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# -- layers ---------------------------------------------------------------


def _activate(z: Tensor, activation: str) -> Tensor:
    if activation == "identity":
        return z
    if activation == "relu":
        return z.relu()
    if activation == "sigmoid":
        return z.sigmoid()
    if activation == "tanh":
        return z.tanh()
    if activation == "softmax":
        return z.softmax()
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def layer_forward(x: Tensor, weights: Tensor, bias: Tensor, activation: str) -> Tensor:
    """activation(x @ weights + bias), recorded on the tape."""
    if x.data.ndim != 2 or x.data.shape[1] != weights.data.shape[0]:
        raise ShapeError(
            f"layer input {x.data.shape} does not match weights {weights.data.shape}"
        )
    return _activate(x @ weights + bias, activation)


def scatter_columns(x: Tensor, indices: np.ndarray, width: int) -> Tensor:
    """Place the columns of x at `indices` in a zero matrix of given width."""
    indices = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or x.data.shape[1] != indices.size:
        raise ShapeError(f"cannot scatter {x.data.shape} into {indices.size} columns")
    out_data = np.zeros((x.data.shape[0], width))
    out_data[:, indices] = x.data

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g[:, indices])

    return Tensor._op(out_data, (x,), backward_fn)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy fused with softmax: -log softmax(logits)[label].

    `reduction` is "mean" or "none" (per-sample vector).
    """
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(f"logits {logits.data.shape} vs labels {labels.shape}")
    rows = np.arange(labels.size)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    losses = lse - logits.data[rows, labels]
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(logits.data)
    onehot[rows, labels] = 1.0

    def backward_fn(g):
        if logits.requires_grad:
            logits._accumulate((probs - onehot) * np.reshape(g, (-1, 1)))

    per_sample = Tensor._op(losses, (logits,), backward_fn)
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return per_sample.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


class Linear:
    """Affine layer with a fixed activation."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, init: str = "auto",
                 name: str = "linear"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((in_dim, out_dim))
        else:
            # He for relu, Xavier otherwise.
            std = np.sqrt(2.0 / in_dim) if activation == "relu" else np.sqrt(1.0 / in_dim)
            w = rng.normal(0.0, std, size=(in_dim, out_dim))
        self.activation = activation
        self.w = Parameter(w, name=f"{name}.w")
        self.b = Parameter(np.zeros(out_dim), name=f"{name}.b")
        self.last_preactivation: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.w.data.shape[0]:
            raise ShapeError(
                f"layer input {x.data.shape} does not match weights {self.w.data.shape}"
            )
        z = x @ self.w + self.b
        self.last_preactivation = z.data
        return _activate(z, self.activation)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class MLP:
    """Stack of Linear layers: relu (configurable) hiddens, chosen output head."""

    def __init__(self, dims: list[int], hidden_activation: str = "relu",
                 output_activation: str = "identity",
                 rng: np.random.Generator | None = None,
                 zero_output: bool = False, output_bias: float = 0.0,
                 name: str = "mlp"):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.dims = list(dims)
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: list[Linear] = []
        for i in range(len(dims) - 2):
            self.layers.append(Linear(dims[i], dims[i + 1], hidden_activation,
                                      rng=rng, name=f"{name}.{i}"))
        last = Linear(dims[-2], dims[-1], output_activation, rng=rng,
                      init="zeros" if zero_output else "auto",
                      name=f"{name}.{len(dims) - 2}")
        if output_bias:
            last.b.data[:] = output_bias
        self.layers.append(last)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def relu_kink_distance(self) -> float:
        """Min |pre-activation| over relu layers in the last forward pass."""
        dist = np.inf
        for layer in self.layers:
            if layer.activation == "relu" and layer.last_preactivation is not None:
                dist = min(dist, float(np.abs(layer.last_preactivation).min()))
        return dist

    def weights_to_payload(self) -> list:
        return [[layer.w.data.tolist(), layer.b.data.tolist()] for layer in self.layers]

    def weights_from_payload(self, payload: list) -> None:
        if len(payload) != len(self.layers):
            raise ValueError(f"payload has {len(payload)} layers, model has {len(self.layers)}")
        for layer, (w, b) in zip(self.layers, payload):
            w = _as_array(w)
            b = _as_array(b)
            if w.shape != layer.w.data.shape or b.shape != layer.b.data.shape:
                raise ShapeError(f"stored shapes {w.shape}/{b.shape} do not match "
                                 f"{layer.w.data.shape}/{layer.b.data.shape}")
            layer.w.data = w
            layer.b.data = b


# -- optimizers --------------------------------------------------------------


def _check_grads(params) -> None:
    for p in params:
        if p.grad is None:
            raise GraphError(f"parameter {p.name or '<unnamed>'} has no gradient; "
                             "run backward() first")
        if not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise NonFiniteError(
                f"non-finite gradient on {p.name or '<unnamed>'} ({bad} entries); step aborted"
            )


def _sgd_step(params, lr: float) -> None:
    _check_grads(params)
    for p in params:
        p.data = p.data - lr * p.grad


def _adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    _check_grads(params)
    for p in params:
        st = p.state
        if "adam_m" not in st:
            st["adam_m"] = np.zeros_like(p.data)
            st["adam_v"] = np.zeros_like(p.data)
            st["adam_t"] = 0
        st["adam_t"] += 1
        t = st["adam_t"]
        st["adam_m"] = beta1 * st["adam_m"] + (1 - beta1) * p.grad
        st["adam_v"] = beta2 * st["adam_v"] + (1 - beta2) * (p.grad * p.grad)
        m_hat = st["adam_m"] / (1 - beta1 ** t)
        v_hat = st["adam_v"] / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def optimizer_step(params, rule: str, lr: float) -> None:
    """One in-place update of `params` under the given rule (gradients must be set)."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if rule == "sgd":
        _sgd_step(params, lr)
    elif rule == "adam":
        _adam_step(params, lr)
    else:
        raise ValueError(f"unknown optimizer rule {rule!r}")


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        _sgd_step(self.params, self.lr)

    def zero_grad(self) -> None:
        zero_grad(self.params)


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self) -> None:
        _adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# -- gradient checking --------------------------------------------------------

# Floored denominator: central differences carry ~1e-9 absolute noise, so an
# unfloored ratio on near-zero gradients would flag correct implementations.
REL_ERR_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    per_parameter: dict = field(default_factory=dict)
    max_rel_error: float = 0.0
    tolerance: float = 1e-4
    passed: bool = False

    def __str__(self) -> str:
        lines = [f"grad check: max rel error {self.max_rel_error:.3e} "
                 f"(tolerance {self.tolerance:.1e}) -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_parameter.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, params, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of loss_fn() against central finite differences.

    loss_fn must be a deterministic closure over `params` returning a scalar
    Tensor; the numeric side only ever calls loss_fn forward, so it is
    independent of the tape.
    """
    params = list(params)
    zero_grad(params)
    loss_fn().backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    report = GradCheckReport(tolerance=tolerance)
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        a = analytic[id(p)].reshape(-1)
        max_err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            denom = max(abs(a[i]) + abs(numeric), REL_ERR_FLOOR)
            max_err = max(max_err, abs(a[i] - numeric) / denom)
        name = p.name or f"param{k}"
        report.per_parameter[name] = max_err
        worst = max(worst, max_err)
    report.max_rel_error = worst
    report.passed = worst <= tolerance
    return report
