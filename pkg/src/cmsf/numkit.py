"""Dense float64 matrices with tape-based reverse-mode differentiation.

Everything is a 2-D row-major float64 array. Operations optionally record
their backward closure onto a Tape; replaying the tape in reverse order is
a valid backward pass because records are appended in forward execution
order. Constants may be passed as plain ndarrays and receive no gradient.
"""

from __future__ import annotations

import math

import numpy as np

BN_EPS = 1e-5
L2_EPS_DEFAULT = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A public operation produced or received a non-finite value."""


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D matrix, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op} produced non-finite values")
    return a


class Tensor:
    """A matrix value plus a gradient accumulator."""

    __slots__ = ("value", "_grad")

    def __init__(self, value):
        self.value = _as_matrix(value)
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else _as_matrix(x)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    __slots__ = ("_records",)

    def __init__(self):
        self._records = []

    def record(self, fn):
        self._records.append(fn)

    def __len__(self):
        return len(self._records)

    def __bool__(self):
        return True  # an empty tape is still an active tape

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and replay all records in reverse."""
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        loss.grad[...] += 1.0
        for fn in reversed(self._records):
            fn()


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b, tape: Tape | None = None) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = Tensor(_check_finite(av @ bv, "matmul"))

    if tape is not None:
        def bwd():
            g = out.grad
            if isinstance(a, Tensor):
                a.grad[...] += g @ bv.T
            if isinstance(b, Tensor):
                b.grad[...] += av.T @ g
        tape.record(bwd)
    return out


def add_bias(x, bias, tape: Tape | None = None) -> Tensor:
    xv, bv = _val(x), _val(bias)
    if bv.shape != (1, xv.shape[1]):
        raise ShapeError(f"bias shape {bv.shape} does not fit input {xv.shape}")
    out = Tensor(xv + bv)

    if tape is not None:
        def bwd():
            g = out.grad
            if isinstance(x, Tensor):
                x.grad[...] += g
            if isinstance(bias, Tensor):
                bias.grad[...] += g.sum(axis=0, keepdims=True)
        tape.record(bwd)
    return out


def relu(x, tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    out = Tensor(np.maximum(xv, 0.0))

    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                x.grad[...] += out.grad * (xv > 0.0)
        tape.record(bwd)
    return out


class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer."""

    def __init__(self, width: int, momentum: float = 0.9):
        self.gamma = Tensor(np.ones((1, width)))
        self.beta = Tensor(np.zeros((1, width)))
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.momentum = momentum

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]


def batch_norm_1d(x, state: BatchNormState, training: bool,
                  tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    if training:
        if xv.shape[0] < 2:
            raise ShapeError("batch_norm_1d needs batch size >= 2 in training mode "
                             "(variance undefined)")
        mean = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1.0 - m) * mean
        state.running_var[...] = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean.copy()
        var = state.running_var.copy()

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xv - mean) * inv_std
    gamma_v = state.gamma.value.copy()
    out = Tensor(_check_finite(xhat * gamma_v + state.beta.value, "batch_norm_1d"))

    if tape is not None:
        n = xv.shape[0]

        def bwd():
            g = out.grad
            state.gamma.grad[...] += (g * xhat).sum(axis=0, keepdims=True)
            state.beta.grad[...] += g.sum(axis=0, keepdims=True)
            if isinstance(x, Tensor):
                gx = g * gamma_v
                if training:
                    # standard batch-norm backward through batch statistics
                    x.grad[...] += inv_std / n * (
                        n * gx
                        - gx.sum(axis=0, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=0, keepdims=True)
                    )
                else:
                    x.grad[...] += gx * inv_std
        tape.record(bwd)
    return out


def l2_row_normalize(x, eps: float = L2_EPS_DEFAULT,
                     tape: Tape | None = None) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = _val(x)
    norms = np.linalg.norm(xv, axis=1, keepdims=True)
    bad = np.nonzero(norms.ravel() <= eps)[0]
    if bad.size:
        raise NumericError(f"degenerate embedding: row {bad[0]} has norm <= {eps}")
    y = xv / norms
    out = Tensor(y)

    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                g = out.grad
                dot = (g * y).sum(axis=1, keepdims=True)
                x.grad[...] += (g - y * dot) / norms
        tape.record(bwd)
    return out


def scale(x, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(_val(x) * c)
    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                x.grad[...] += out.grad * c
        tape.record(bwd)
    return out


def add_scalar(x, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(_val(x) + c)
    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                x.grad[...] += out.grad
        tape.record(bwd)
    return out


def add(a, b, tape: Tape | None = None) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    out = Tensor(av + bv)
    if tape is not None:
        def bwd():
            g = out.grad
            if isinstance(a, Tensor):
                a.grad[...] += g
            if isinstance(b, Tensor):
                b.grad[...] += g
        tape.record(bwd)
    return out


def sub(a, b, tape: Tape | None = None) -> Tensor:
    return add(a, scale(b, -1.0, tape), tape)


def mul(a, b, tape: Tape | None = None) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
    out = Tensor(av * bv)
    if tape is not None:
        def bwd():
            g = out.grad
            if isinstance(a, Tensor):
                a.grad[...] += g * bv
            if isinstance(b, Tensor):
                b.grad[...] += g * av
        tape.record(bwd)
    return out


def sum_all(x, tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    out = Tensor([[xv.sum()]])
    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                x.grad[...] += out.grad[0, 0]
        tape.record(bwd)
    return out


def mean_all(x, tape: Tape | None = None) -> Tensor:
    return scale(sum_all(x, tape), 1.0 / _val(x).size, tape)


def take_row(x, i: int, tape: Tape | None = None) -> Tensor:
    xv = _val(x)
    out = Tensor(xv[i:i + 1, :])
    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                x.grad[i, :] += out.grad[0, :]
        tape.record(bwd)
    return out


def mean_rowwise_dot(x, c, tape: Tape | None = None) -> Tensor:
    """(1/rows) * sum_i x[i] . c[i] for a constant matrix c."""
    xv, cv = _val(x), _val(c)
    if xv.shape != cv.shape:
        raise ShapeError(f"mean_rowwise_dot shape mismatch: {xv.shape} vs {cv.shape}")
    n = xv.shape[0]
    out = Tensor([[float((xv * cv).sum() / n)]])
    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                x.grad[...] += out.grad[0, 0] * cv / n
        tape.record(bwd)
    return out


def logsumexp_all(x, tape: Tape | None = None) -> Tensor:
    """log(sum(exp(x))) over all entries of a row vector."""
    xv = _val(x)
    m = xv.max()
    e = np.exp(xv - m)
    z = e.sum()
    out = Tensor([[float(m + math.log(z))]])
    if tape is not None:
        softmax = e / z
        def bwd():
            if isinstance(x, Tensor):
                x.grad[...] += out.grad[0, 0] * softmax
        tape.record(bwd)
    return out


def mean_select(x, indices, tape: Tape | None = None) -> Tensor:
    """Mean of selected entries of a row vector."""
    xv = _val(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("mean_select needs at least one index")
    out = Tensor([[float(xv[0, idx].mean())]])
    if tape is not None:
        def bwd():
            if isinstance(x, Tensor):
                np.add.at(x.grad[0], idx, out.grad[0, 0] / idx.size)
        tape.record(bwd)
    return out


def cross_entropy_mean(logits, labels, tape: Tape | None = None) -> Tensor:
    """Mean negative log-softmax of the true class over a batch."""
    lv = _val(logits)
    y = np.asarray(labels, dtype=np.intp)
    n, c = lv.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    m = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (lv - m) - np.log(z)
    out = Tensor([[float(-logp[np.arange(n), y].mean())]])
    if tape is not None:
        softmax = e / z
        def bwd():
            if isinstance(logits, Tensor):
                d = softmax.copy()
                d[np.arange(n), y] -= 1.0
                logits.grad[...] += out.grad[0, 0] * d / n
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# optimization


class SgdOptimizer:
    """SGD with heavy-ball momentum; weight decay folded into the gradient."""

    def __init__(self, params, lr0: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        self.params = list(params)
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float | None = None):
        if lr is None:
            lr = self.lr0
        for p, v in zip(self.params, self.velocities):
            g = p.grad + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= lr * v
            _check_finite(p.value, "sgd_step")

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def sgd_step(optimizer: SgdOptimizer, lr: float | None = None):
    optimizer.step(lr)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at t=0 to 0 at t=total."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
