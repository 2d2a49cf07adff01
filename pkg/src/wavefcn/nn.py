"""Reverse-mode differentiation on numpy arrays and the layer primitives.

A :class:`Tensor` records the operation that produced it; calling
``backward()`` on a scalar result walks that record in reverse
topological order and accumulates gradients into every tensor that
requires one. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    def __init__(self, values, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Callable[[np.ndarray], None] | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.shape)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (default ones) back through the recorded graph."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        seed = np.ones(self.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter(Tensor):
    """A trainable leaf tensor; its gradient slot is allocated up front."""

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.values)
        self.touched = False

    def accumulate(self, g: np.ndarray) -> None:
        self.grad += g
        self.touched = True

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------- layers


def _matmul_rows(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    # A single-row product goes through gemv, whose rounding differs from the
    # gemm used for batches; pad to two rows so every row is computed the same
    # way regardless of batch size. Strided views (sliding windows) would skip
    # BLAS altogether, so they are copied first.
    x = np.ascontiguousarray(x)
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ w_t)[:1]
    return x @ w_t


def dense(x, weight: Tensor, bias: Tensor) -> Tensor:
    """y[n, o] = sum_i W[o, i] x[n, i] + b[o] for x of shape (batch, in)."""
    x = as_tensor(x)
    if x.values.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"dense shape mismatch: x{x.shape}, W{weight.shape}, b{bias.shape}")
    xv, wv = x.values, weight.values
    out = _matmul_rows(xv, wv.T) + bias.values

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ wv)
        weight.accumulate(g.T @ xv)
        bias.accumulate(g.sum(axis=0))

    return Tensor(out, parents=(x, weight, bias), backward=backward)


def _patches(xp: np.ndarray, k: int) -> np.ndarray:
    # (n, c, len) -> (n * out_len, c * k) sliding patches
    n, c, length = xp.shape
    out_len = length - k + 1
    return sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(n * out_len, c * k)


def conv1d(x, filters: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlation of x (batch, in_ch, len) with filters (out_ch, in_ch, k).

    ``same`` zero-pads (k - 1) / 2 samples per side and needs odd k;
    ``valid`` returns len - k + 1 samples.
    """
    x = as_tensor(x)
    out_ch, in_ch, k = filters.shape
    if x.values.ndim != 3 or x.shape[1] != in_ch or bias.shape != (out_ch,):
        raise ValueError(f"conv1d shape mismatch: x{x.shape}, filters{filters.shape}, b{bias.shape}")
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel size, got k={k}")
        pad = (k - 1) // 2
    elif padding == "valid":
        if x.shape[2] < k:
            raise ValueError(f"valid convolution needs len >= k, got len={x.shape[2]}, k={k}")
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad))) if pad else x.values
    n = xp.shape[0]
    out_len = xp.shape[2] - k + 1
    cols = _patches(xp, k)
    fmat = filters.values.reshape(out_ch, in_ch * k)
    y = (cols @ fmat.T).reshape(n, out_len, out_ch).transpose(0, 2, 1) + bias.values[None, :, None]

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * out_len, out_ch)
        filters.accumulate((g2.T @ cols).reshape(out_ch, in_ch, k))
        bias.accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            # input gradient = correlation of the padded output gradient with
            # the flipped, channel-transposed filters
            edge = k - 1 - pad
            gp = np.pad(g, ((0, 0), (0, 0), (edge, edge)))
            flipped = filters.values[:, :, ::-1].transpose(1, 0, 2).reshape(in_ch, out_ch * k)
            length = x.shape[2]
            dx = (_patches(gp, k) @ flipped.T).reshape(n, length, in_ch).transpose(0, 2, 1)
            x.accumulate(dx)

    return Tensor(np.ascontiguousarray(y), parents=(x, filters, bias), backward=backward)


def _channel_view(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x, slope: Tensor) -> Tensor:
    """y = x for x > 0, slope * x otherwise; slope is per channel (axis 1) or shared."""
    x = as_tensor(x)
    if slope.values.ndim != 1 or slope.shape[0] not in (1, x.shape[1]):
        raise ValueError(f"prelu slope shape {slope.shape} does not broadcast to channels of {x.shape}")
    a = _channel_view(slope.values, x.values.ndim)
    pos = x.values > 0
    out = np.where(pos, x.values, a * x.values)
    reduce_axes = tuple(i for i in range(x.values.ndim) if i != 1 or slope.shape[0] == 1)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.where(pos, g, a * g))
        ga = np.where(pos, 0.0, g * x.values).sum(axis=reduce_axes)
        slope.accumulate(np.atleast_1d(ga).reshape(slope.shape))

    return Tensor(out, parents=(x, slope), backward=backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features))


def batchnorm(x, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
              update_stats: bool = True) -> Tensor:
    """Per-feature normalization over the batch (and time, for 3-D input).

    In training mode batch statistics are used and, unless ``update_stats``
    is off, folded into the running averages; inference uses the running
    averages only.
    """
    x = as_tensor(x)
    xv = x.values
    if xv.ndim not in (2, 3) or gamma.shape != (xv.shape[1],) or beta.shape != gamma.shape:
        raise ValueError(f"batchnorm shape mismatch: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}")
    axes = (0,) if xv.ndim == 2 else (0, 2)
    view = lambda a: _channel_view(a, xv.ndim)  # noqa: E731
    g_, b_ = view(gamma.values), view(beta.values)

    if not training:
        inv = 1.0 / np.sqrt(view(state.running_var) + state.eps)
        xhat = (xv - view(state.running_mean)) * inv
        out = g_ * xhat + b_

        def backward_infer(g):
            if x.requires_grad:
                x.accumulate(g * g_ * inv)
            gamma.accumulate((g * xhat).sum(axis=axes))
            beta.accumulate(g.sum(axis=axes))

        return Tensor(out, parents=(x, gamma, beta), backward=backward_infer)

    if xv.shape[0] < 2:
        raise ValueError("batch normalization in training mode needs a batch of at least 2")
    count = xv.size // xv.shape[1]
    mean = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(view(var) + state.eps)
    xhat = (xv - view(mean)) * inv
    out = g_ * xhat + b_
    if update_stats:
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var * count / (count - 1)

    def backward_train(g):
        gamma.accumulate((g * xhat).sum(axis=axes))
        beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * g_
            dx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            x.accumulate(dx)

    return Tensor(out, parents=(x, gamma, beta), backward=backward_train)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape

    def backward(g):
        x.accumulate(g.reshape(orig))

    return Tensor(x.values.reshape(shape), parents=(x,), backward=backward)


def flatten(x) -> Tensor:
    """(batch, ...) -> (batch, prod(...))."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    t = target.values if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.values - t
    count = diff.size

    def backward(g):
        pred.accumulate(g * 2.0 * diff / count)

    return Tensor(np.mean(diff * diff), parents=(pred,), backward=backward)


# -------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # per-parameter work buffers, reused across steps
    scratch: list[np.ndarray] = field(default_factory=list, repr=False)


class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState([np.zeros_like(p.values) for p in self.params],
                               [np.zeros_like(p.values) for p in self.params],
                               0, lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)


def adam_step(params: Sequence[Parameter], state: AdamState) -> None:
    if params and not any(p.touched for p in params):
        raise RuntimeError("adam_step called before any backward pass")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr / (1.0 - b1 ** state.t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** state.t)
    if len(state.scratch) != len(params):
        state.scratch = [np.empty_like(p.values) for p in params]
    for p, m, v, buf in zip(params, state.m, state.v, state.scratch):
        g = p.grad
        np.multiply(g, 1.0 - b1, out=buf)
        m *= b1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v *= b2
        v += buf
        # theta -= lr * m_hat / (sqrt(v_hat) + eps)
        np.sqrt(v, out=buf)
        buf *= inv_c2
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= step
        p.values -= buf


# ------------------------------------------------------------------ grad check


def grad_check(fragment: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fragment`` recomputes the output from ``tensors`` (whose ``values`` are
    perturbed in place). Non-scalar outputs are reduced with a fixed random
    projection. The relative error of an entry is
    ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.
    """
    first = fragment()
    again = fragment()
    if not np.array_equal(first.values, again.values):
        raise ValueError("fragment is not deterministic (freeze batch-norm statistics first)")
    proj = np.random.default_rng(seed).standard_normal(first.shape)

    def loss() -> float:
        return float(np.sum(fragment().values * proj))

    for t in tensors:
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
    out = fragment()
    out.backward(proj)

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.values) if t.grad is None else t.grad.copy()
        flat = t.values.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * step)
        ga = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(ga - numeric) / denom)) if flat.size else 0.0)
    return worst
