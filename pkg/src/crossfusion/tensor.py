"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the fusion model needs are provided. Every op builds a
tape node (parents + backward closure); ``backward()`` on a scalar walks the
tape once in reverse topological order and accumulates gradients into every
tensor with ``requires_grad`` until they are explicitly zeroed.

Broadcasting is restricted to leading extents: the last extent of both
operands must match exactly, the shorter operand is padded with leading 1s,
and only size-1 leading extents expand. There is no general broadcasting and
forward ops never mutate their inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

# Tanh-form GELU constants, fixed so outputs are bit-reproducible.
GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715

# When True, every forward op asserts its output is finite. Off by default;
# enabled by tests and debugging sessions (it costs one pass over the data).
debug_checks = False

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Visits each recorded node exactly once in reverse topological order.
        Each call deposits exactly one unit of seed gradient, so grads of
        leaves keep accumulating across calls until explicitly zeroed.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if self._backward is None:
            if self.requires_grad:
                _accum(self, np.ones_like(self.data))
            return
        topo = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                if node.grad is not None:
                    node._backward(node.grad)
                # Grads of recorded intermediates only matter during the sweep.
                node.grad = None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS over the tape (graphs exceed recursion limits)."""
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return topo


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward operation")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_leading_broadcast(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    """Allow broadcasting over leading extents only; scalars always pass.

    The last extent must match exactly; earlier positions may differ only
    where one side is 1 or absent.
    """
    if a_shape == () or b_shape == ():
        return
    for i in range(1, max(len(a_shape), len(b_shape)) + 1):
        da = a_shape[-i] if i <= len(a_shape) else 1
        db = b_shape[-i] if i <= len(b_shape) else 1
        if da == db:
            continue
        if i > 1 and (da == 1 or db == 1):
            continue
        raise DimensionError(
            f"elementwise op: shapes {a_shape} and {b_shape} differ beyond leading extents"
        )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (d, s) in enumerate(zip(g.shape, shape)) if s == 1 and d != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_leading_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_leading_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner extents do not match: {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul: batch extents do not match: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the first extent."""
    if not (0 <= start < stop <= a.data.shape[0]):
        raise DimensionError(
            f"narrow: range [{start}, {stop}) invalid for extent {a.data.shape[0]}"
        )

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _make(a.data[start:stop], (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def linear_op(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """x[.., d_in] @ weight[d_out, d_in]^T (+ bias[d_out]), as one tape node."""
    d_out, d_in = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise DimensionError(f"linear: input width {x.data.shape[-1]} != expected {d_in}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data += bias.data

    def backward(g):
        _accum(x, g @ weight.data)
        g2 = g.reshape(-1, d_out)
        _accum(weight, g2.T @ x.data.reshape(-1, d_in))
        if bias is not None:
            _accum(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def mha_core(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention over projected inputs.

    q: [n, d]; k, v: [m, d]; d split into n_heads. Returns the merged [n, d]
    output and the detached attention weights [heads, n, m].
    """
    n, d = q.data.shape
    m = k.data.shape[0]
    if d % n_heads != 0:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    scale = 1.0 / np.sqrt(hd)
    qh = q.data.reshape(n, n_heads, hd).transpose(1, 0, 2)
    kh = k.data.reshape(m, n_heads, hd).transpose(1, 0, 2)
    vh = v.data.reshape(m, n_heads, hd).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale  # [h, n, m]
    smax = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - smax)
    weights = e / e.sum(axis=-1, keepdims=True)
    ctx = weights @ vh  # [h, n, hd]
    out_data = ctx.transpose(1, 0, 2).reshape(n, d)

    def backward(g):
        gh = g.reshape(n, n_heads, hd).transpose(1, 0, 2)
        gw = gh @ vh.transpose(0, 2, 1)  # [h, n, m]
        gv = weights.transpose(0, 2, 1) @ gh
        ds = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
        gq = (ds @ kh) * scale
        gk = (ds.transpose(0, 2, 1) @ qh) * scale
        _accum(q, gq.transpose(1, 0, 2).reshape(n, d))
        _accum(k, gk.transpose(1, 0, 2).reshape(m, d))
        _accum(v, gv.transpose(1, 0, 2).reshape(m, d))

    return _make(out_data, (q, k, v), backward), weights


# -- nonlinearities -----------------------------------------------------------


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last extent {d}"
        )
    inv_d = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        dxhat = g * gamma.data
        m1 = dxhat.sum(axis=-1, keepdims=True) * inv_d
        m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    u = GELU_K * (x + GELU_C * (x2 * x))
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        du = GELU_K * (1.0 + 3.0 * GELU_C * x2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def cumprod_lastdim(a: Tensor) -> Tensor:
    """Running product along the last extent. Inputs must be nonzero."""
    y = np.cumprod(a.data, axis=-1)

    def backward(g):
        gy = g * y
        rev = np.flip(np.cumsum(np.flip(gy, axis=-1), axis=-1), axis=-1)
        _accum(a, rev / a.data)

    return _make(y, (a,), backward)


class DropoutRng:
    """Counter-based mask source: mask ``i`` depends only on (seed, i).

    Each call derives a fresh Philox stream keyed by the run seed and an
    incrementing counter, so masks are reproducible regardless of what other
    random state the process consumed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def keep_mask(self, shape: tuple[int, ...], rate: float) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        self.counter += 1
        return gen.random(shape) >= rate


def dropout(a: Tensor, rate: float, mask: np.ndarray) -> Tensor:
    """Inverted dropout with a caller-supplied keep mask (pure given the mask)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    scale = 1.0 / (1.0 - rate)
    keep = mask.astype(np.float64) * scale

    def backward(g):
        _accum(a, g * keep)

    return _make(a.data * keep, (a,), backward)


# -- convolutions -------------------------------------------------------------
#
# Accumulation order inside each output element is part of the contract:
# bias first, then (input-channel-in-group, kh, kw) for 2-D and
# (channel, kd, kh, kw) for 3-D. Tests compare bitwise against loop oracles
# that sum in the same order.


def grouped_conv2d(x: Tensor, weight: Tensor, bias: Tensor, groups: int) -> Tensor:
    """Grouped 2-D convolution with zero same-padding, one output channel per group.

    x: [C_in, H, W]; weight: [C_out, C_in/groups, k, k]; bias: [C_out].
    Covers the depth-wise case (groups == C_in == C_out) and the
    channel-reducing case (groups == C_out, two input channels per group).
    """
    c_in, h, w = x.data.shape
    c_out, cig, k, k2 = weight.data.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"grouped_conv2d: kernel must be square and odd, got {k}x{k2}")
    if c_in % groups != 0:
        raise ConfigError(f"grouped_conv2d: {c_in} input channels not divisible by {groups} groups")
    if c_out != groups or cig != c_in // groups:
        raise ConfigError(
            f"grouped_conv2d: weight shape {weight.shape} inconsistent with "
            f"{c_in} channels in {groups} groups"
        )
    if bias.data.shape != (c_out,):
        raise DimensionError(f"grouped_conv2d: bias shape {bias.shape} != ({c_out},)")
    p = k // 2
    xp = np.zeros((c_in, h + 2 * p, w + 2 * p))
    xp[:, p : p + h, p : p + w] = x.data
    out = np.empty((c_out, h, w))
    out[:] = bias.data[:, None, None]
    tmp = np.empty_like(out)
    for ci in range(cig):
        xc = xp[ci::cig]  # channel g*cig+ci for every group g
        for kh in range(k):
            for kw in range(k):
                np.multiply(
                    weight.data[:, ci, kh, kw][:, None, None],
                    xc[:, kh : kh + h, kw : kw + w],
                    out=tmp,
                )
                out += tmp

    def backward(g):
        _accum(bias, g.sum(axis=(1, 2)))
        dw = np.empty_like(weight.data)
        dx = np.empty_like(x.data)
        gp = np.zeros((c_out, h + 2 * p, w + 2 * p))
        gp[:, p : p + h, p : p + w] = g
        gwin = np.ascontiguousarray(
            np.lib.stride_tricks.sliding_window_view(gp, (k, k), axis=(1, 2))
        ).reshape(c_out, h * w, k * k)
        wflip = weight.data[:, :, ::-1, ::-1]
        gflat = g.reshape(c_out, h * w, 1)
        for ci in range(cig):
            xwin = np.ascontiguousarray(
                np.lib.stride_tricks.sliding_window_view(xp[ci::cig], (h, w), axis=(1, 2))
            ).reshape(c_out, k * k, h * w)
            dw[:, ci] = (xwin @ gflat).reshape(c_out, k, k)
            dx[ci::cig] = (gwin @ wflip[:, ci].reshape(c_out, k * k, 1)).reshape(c_out, h, w)
        _accum(weight, dw)
        _accum(x, dx)

    return _make(out, (x, weight, bias), backward)


def conv3d_fuse(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3-D convolution collapsing exactly 3 input channels to 1, zero same-padding.

    x: [3, D, H, W]; weight: [3, kd, kh, kw]; bias: [1]. Output: [1, D, H, W].
    """
    if x.data.ndim != 4 or x.data.shape[0] != 3:
        raise ConfigError(f"conv3d_fuse: expected 3 input channels, got shape {x.shape}")
    _, d, h, w = x.data.shape
    cw, kd, kh, kw = weight.data.shape
    if cw != 3:
        raise ConfigError(f"conv3d_fuse: kernel must have 3 input channels, got {cw}")
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv3d_fuse: kernel extents must be odd, got {(kd, kh, kw)}")
    if bias.data.shape != (1,):
        raise DimensionError(f"conv3d_fuse: bias shape {bias.shape} != (1,)")
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.zeros((3, d + 2 * pd, h + 2 * ph, w + 2 * pw))
    xp[:, pd : pd + d, ph : ph + h, pw : pw + w] = x.data
    out = np.full((d, h, w), bias.data[0])
    for c in range(3):
        for ka in range(kd):
            for kb in range(kh):
                for kc in range(kw):
                    out += weight.data[c, ka, kb, kc] * xp[c, ka : ka + d, kb : kb + h, kc : kc + w]

    def backward(g):
        g3 = g[0]
        _accum(bias, np.asarray([g3.sum()]))
        xwin = np.lib.stride_tricks.sliding_window_view(xp, (d, h, w), axis=(1, 2, 3))
        _accum(weight, np.einsum("cabeijl,ijl->cabe", xwin, g3))
        gp = np.zeros((d + 2 * pd, h + 2 * ph, w + 2 * pw))
        gp[pd : pd + d, ph : ph + h, pw : pw + w] = g3
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kd, kh, kw), axis=(0, 1, 2))
        wflip = weight.data[:, ::-1, ::-1, ::-1]
        _accum(x, np.einsum("ijlabe,cabe->cijl", gwin, wflip))

    return _make(out[None, :, :, :], (x, weight, bias), backward)


# -- verification oracle -------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor | tuple[str, Tensor]],
    eps: float = 1e-4,
    coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be deterministic (no dropout) and return a scalar Tensor built
    from ``params``. A random sample of coordinates per parameter is probed;
    returns the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    plist: list[Tensor] = []
    for p in params:
        t = p[1] if isinstance(p, tuple) else p
        plist.append(t)
    for t in plist:
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in plist]
    for t in plist:
        t.grad = None

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for t, a in zip(plist, analytic):
        n = t.data.size
        if n <= coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for idx in coords:
            v = flat[idx]
            with no_grad():
                flat[idx] = v + eps
                fp = f().item()
                flat[idx] = v - eps
                fm = f().item()
            flat[idx] = v
            numeric = (fp - fm) / (2.0 * eps)
            rel = abs(aflat[idx] - numeric) / max(abs(aflat[idx]), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
