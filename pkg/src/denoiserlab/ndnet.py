"""Dense tensors and a small reverse-mode tape, covering the operations a UNet needs.

Nothing is recorded unless a :class:`Tape` is active, so plain forward passes
carry no graph overhead::

    with Tape() as tape:
        loss = ndnet.sum(ndnet.square(model_output))
    tape.backward(loss)        # populates .grad on requires_grad leaves
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible tensor extents for an operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


_DEFAULT_DTYPE = [np.float32]
_TAPES: list["Tape"] = []
_KINK_LOG: list[list[np.ndarray]] = []


def default_dtype() -> type:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    ``precision(np.float64)`` is the 64-bit mode used for gradient checking.
    """
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of executed primitives; backward replays it in reverse."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> list[str]:
        """Propagate d(loss) back through the recorded ops.

        Leaves that require grad get ``.grad`` set to the total gradient of this
        pass (previous values are overwritten). Returns the op names in the order
        they were visited, which is exactly the reverse of execution order.
        """
        if seed_grad is None:
            if loss.data.size != 1:
                raise ContractError("backward() needs a scalar loss or an explicit seed_grad")
            seed_grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=loss.dtype)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            visited.append(node.op)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, t in leaves.items():
            t.grad = grads.get(key, np.zeros_like(t.data))
        return visited


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].nodes.append(_Node(inputs, out, backward, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, None if isinstance(b, Tensor) else a.dtype)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, None if isinstance(b, Tensor) else a.dtype)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, None if isinstance(b, Tensor) else a.dtype)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    xd = x.data
    out = xd.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g = np.expand_dims(g, tuple(a % xd.ndim for a in axes))
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_LOG:
        _KINK_LOG[-1].append(mask)
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype, copy=False),
                   lambda g: (g * mask,))


@contextlib.contextmanager
def kink_monitor() -> Iterator[list[np.ndarray]]:
    """Collect the active/inactive mask of every ReLU evaluated inside the block."""
    log: list[np.ndarray] = []
    _KINK_LOG.append(log)
    try:
        yield log
    finally:
        _KINK_LOG.pop()


# image ops -------------------------------------------------------------------

def _im2col(xd: np.ndarray, K: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, K*K*C) patches of the zero-padded input, channel fastest."""
    B, C, H, W = xd.shape
    p = K // 2
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=xd.dtype)
    xp[:, p:p + H, p:p + W, :] = xd.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, K * K, C), dtype=xd.dtype)
    for i in range(K):
        for j in range(K):
            cols[:, :, :, i * K + j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, K * K * C)


def _wmat(w: np.ndarray) -> np.ndarray:
    # OIKK -> O x (K*K*I), matching the patch layout of _im2col
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_same(xd: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B, C, H, W = xd.shape
    O, _, K, _ = w.shape
    cols = _im2col(xd, K)
    out = cols @ _wmat(w).T
    return out.reshape(B, H, W, O).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 'same' cross-correlation; x is BCHW, weight OIKK."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects BCHW input and OIKK weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, I, K, K2 = weight.shape
    if K != K2 or K % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {K}x{K2}")
    if I != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {I}")
    out, cols = _conv_same(x.data, weight.data)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gw = None
        if weight.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
            gw = (g2.T @ cols).reshape(O, K, K, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            # adjoint of a same-padded correlation: correlate with the flipped, transposed kernel
            wt = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv_same(g, wt)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", inputs, out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over (C, H, W), then apply a per-channel affine map."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    n = xd[0].size
    mean = xd.mean(axis=(1, 2, 3), keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, -1, 1, 1)
    out = xhat * gd + bias.data.reshape(1, -1, 1, 1)

    def back(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True)
        gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return gx, ggain, gbias

    return _record("layer_norm", (x, gain, bias), out.astype(xd.dtype, copy=False), back)


def avg_pool2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extent, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record("avg_pool2", (x,), out, back)


def upsample_nearest2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _record("upsample_nearest2", (x,), out, back)


def spatial_mean(x: Tensor) -> Tensor:
    """Per (batch, channel) mean over H x W."""
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).copy(),)

    return _record("spatial_mean", (x,), out, back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _record("concat", tensors, out, back)


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_kinks: int
    analytic: np.ndarray
    numeric: np.ndarray

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(fn: Callable[[Tensor], Tensor], x, step: float = 1e-6,
               skip_kinks: bool = True) -> GradCheckResult:
    """Compare reverse-mode gradients of a scalar ``fn`` with central differences.

    Must run in 64-bit mode. Coordinates whose +/- step evaluations flip the
    state of any ReLU are not smooth over the stencil; with ``skip_kinks`` they
    are counted in ``n_kinks`` and left out of the maximum.
    """
    if default_dtype() is not np.float64:
        raise ContractError("grad_check requires precision(np.float64)")
    if not 1e-6 <= step <= 1e-4:
        raise ContractError(f"step must lie in [1e-6, 1e-4], got {step}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape, kink_monitor() as masks0:
        out = fn(xt)
    if out.data.size != 1:
        raise ContractError(f"grad_check fn must return a scalar, got shape {out.shape}")
    tape.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    kinked = np.zeros(x0.shape, dtype=bool)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sgn in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            with kink_monitor() as masks:
                vals.append(float(fn(Tensor(xp.reshape(x0.shape))).data))
            if any(not np.array_equal(a, b) for a, b in zip(masks0, masks)):
                kinked.reshape(-1)[i] = True
        numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    use = ~kinked if skip_kinks else np.ones_like(kinked)
    max_rel = float(rel[use].max()) if use.any() else 0.0
    return GradCheckResult(max_rel, int(use.sum()), int(kinked.sum()), analytic, numeric)
