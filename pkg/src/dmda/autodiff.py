"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are Tensors. Gradient recording happens on an explicitly opened
Tape; primitives called with no tape active just compute forward, which
is what evaluation code wants. Broadcasting is deliberately restricted
to bias addition over the batch axis -- every other shape mismatch is a
hard error.
"""

from __future__ import annotations

import numpy as np

# Probabilities are clamped to at least this value before any log.
PROB_FLOOR = 1e-12


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal constructor for op outputs: takes ownership, no copy.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended in execution order, so every operand of entry k
    was produced by an earlier entry or is a leaf. Opening a tape makes
    it the recording target for all primitives until it is closed.
    """

    def __init__(self):
        self._entries = []  # (inputs, output, backward_fn)
        self._produced = {}  # id(output) -> entry index
        self._leaves = {}  # id(tensor) -> tensor, first-use order

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise AutodiffError("tapes closed out of order")
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, inputs, output, backward_fn):
        for t in inputs:
            tid = id(t)
            if tid not in self._produced and tid not in self._leaves:
                self._leaves[tid] = t
        self._produced[id(output)] = len(self._entries)
        self._entries.append((inputs, output, backward_fn))


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x, name):
    if not isinstance(x, Tensor):
        raise ShapeError(f"{name}: expected Tensor, got {type(x).__name__}")
    return x


def _check_finite(name, *tensors):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{name}: non-finite input value")


def _emit(inputs, out_arr, backward_fn) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = active_tape()
    if tape is not None:
        tape._record(inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _as_tensor(a, "matmul"), _as_tensor(b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    _check_finite("matmul", a, b)
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _emit((a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _as_tensor(a, "add"), _as_tensor(b, "add")
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("add", a, b)

    def backward(g):
        return g, g

    return _emit((a, b), a.data + b.data, backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-K bias to every row of a (B, K) matrix.

    The single sanctioned broadcast in the core.
    """
    _as_tensor(x, "bias_add"), _as_tensor(b, "bias_add")
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    _check_finite("bias_add", x, b)

    def backward(g):
        return g, g.sum(axis=0)

    return _emit((x, b), x.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _as_tensor(a, "mul"), _as_tensor(b, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return _emit((a, b), a.data * b.data, backward)


def neg(x: Tensor) -> Tensor:
    _as_tensor(x, "neg")
    _check_finite("neg", x)

    def backward(g):
        return (-g,)

    return _emit((x,), -x.data, backward)


def scale(x: Tensor, c: float) -> Tensor:
    _as_tensor(x, "scale")
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: non-finite scalar factor")
    _check_finite("scale", x)

    def backward(g):
        return (g * c,)

    return _emit((x,), x.data * c, backward)


def relu(x: Tensor) -> Tensor:
    _as_tensor(x, "relu")
    _check_finite("relu", x)
    # Subgradient at exactly 0 is fixed to 0.
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return _emit((x,), np.where(mask, x.data, 0.0), backward)


def log(x: Tensor) -> Tensor:
    """Natural log with the probability floor applied below PROB_FLOOR."""
    _as_tensor(x, "log")
    _check_finite("log", x)
    clamped = np.maximum(x.data, PROB_FLOOR)

    def backward(g):
        return (np.where(x.data >= PROB_FLOOR, g / clamped, 0.0),)

    return _emit((x,), np.log(clamped), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed stably."""
    _as_tensor(x, "softmax")
    if x.data.ndim < 1:
        raise ShapeError("softmax: needs at least one axis")
    _check_finite("softmax", x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit((x,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    _as_tensor(x, "sum")
    _check_finite("sum", x)
    n_shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, n_shape).copy(),)

    return _emit((x,), np.asarray(x.data.sum()), backward)


def mean_spatial(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an (H, W, K) map or (B, H, W, K) batch."""
    _as_tensor(x, "mean_spatial")
    if x.data.ndim == 3:
        h, w, _ = x.shape
        if h < 1 or w < 1:
            raise ShapeError(f"mean_spatial: empty map {x.shape}")
        out = x.data.mean(axis=(0, 1))

        def backward(g):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)

        return _emit((x,), out, backward)
    if x.data.ndim == 4:
        _, h, w, _ = x.shape
        if h < 1 or w < 1:
            raise ShapeError(f"mean_spatial: empty map {x.shape}")
        out = x.data.mean(axis=(1, 2))

        def backward(g):
            return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

        return _emit((x,), out, backward)
    raise ShapeError(f"mean_spatial: expected 3-D or 4-D input, got {x.shape}")


def scale_channels(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply each channel of a feature map by a constant factor.

    `factors` is a plain array of shape (K,) or, for batched maps, (B, K);
    it is a constant with respect to differentiation.
    """
    _as_tensor(x, "scale_channels")
    factors = np.asarray(factors, dtype=np.float64)
    if x.data.ndim == 3:
        k = x.shape[2]
        if factors.shape != (k,):
            raise ShapeError(
                f"scale_channels: factor length {factors.shape} != channels ({k},)")
        f = factors
    elif x.data.ndim == 4:
        b, _, _, k = x.shape
        if factors.shape == (k,):
            f = factors[None, None, None, :]
        elif factors.shape == (b, k):
            f = factors[:, None, None, :]
        else:
            raise ShapeError(
                f"scale_channels: factors {factors.shape} do not match map {x.shape}")
    else:
        raise ShapeError(f"scale_channels: expected 3-D or 4-D map, got {x.shape}")
    _check_finite("scale_channels", x)
    if not np.isfinite(factors).all():
        raise NonFiniteError("scale_channels: non-finite factors")

    def backward(g):
        return (g * f,)

    return _emit((x,), x.data * f, backward)


def pad_spatial(x: Tensor, p: int) -> Tensor:
    """Zero-pad the spatial axes of a (B, H, W, C) batch by p on each side."""
    _as_tensor(x, "pad_spatial")
    if x.data.ndim != 4:
        raise ShapeError(f"pad_spatial: expected 4-D input, got {x.shape}")
    p = int(p)
    if p < 0:
        raise ShapeError("pad_spatial: negative padding")
    _check_finite("pad_spatial", x)
    _, h, w, _ = x.shape
    out = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))

    def backward(g):
        return (g[:, p:p + h, p:p + w, :],)

    return _emit((x,), out, backward)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over a (B, H, W, C) batch."""
    _as_tensor(x, "avgpool2")
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2: expected 4-D input, got {x.shape}")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: spatial dims must be even, got {x.shape}")
    _check_finite("avgpool2", x)
    out = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (up * 0.25,)

    return _emit((x,), out, backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of a (B, H, W, Cin) batch with (Cout, Cin, k, k) kernels."""
    _as_tensor(x, "conv2d"), _as_tensor(kernels, "conv2d"), _as_tensor(bias, "conv2d")
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-D input and kernels, got {x.shape} and {kernels.shape}")
    b, h, w, cin = x.shape
    cout, cin_k, k, k2 = kernels.shape
    if k != k2 or cin != cin_k:
        raise ShapeError(
            f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} != ({cout},)")
    stride = int(stride)
    if stride < 1:
        raise ShapeError("conv2d: stride must be positive")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than input {h}x{w}")
    _check_finite("conv2d", x, kernels, bias)

    sb, sh, sw, sc = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(b, ho, wo, k, k, cin),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
    )
    cols = windows.reshape(b * ho * wo, k * k * cin)
    wmat = kernels.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out = (cols @ wmat + bias.data).reshape(b, ho, wo, cout)

    def backward(g):
        gflat = g.reshape(b * ho * wo, cout)
        dkern = (cols.T @ gflat).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        dbias = gflat.sum(axis=0)
        dwin = (gflat @ wmat.T).reshape(b, ho, wo, k, k, cin)
        dx = np.zeros((b, h, w, cin))
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho * stride:stride, j:j + wo * stride:stride, :] += \
                    dwin[:, :, :, i, j, :]
        return dx, dkern, dbias

    return _emit((x, kernels, bias), out, backward)


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -lam backward."""
    _as_tensor(x, "grl")
    lam = float(lam)
    if lam < 0:
        raise ShapeError(f"grl: lambda must be nonnegative, got {lam}")
    _check_finite("grl", x)

    def backward(g):
        return (g * (-lam),)

    return _emit((x,), x.data.copy(), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer class labels.

    Accepts a (C,) vector with a single label or a (B, C) batch with a
    length-B label array. Gradient w.r.t. logits is softmax - onehot,
    averaged over the batch.
    """
    _as_tensor(logits, "softmax_cross_entropy")
    _check_finite("softmax_cross_entropy", logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(
            f"softmax_cross_entropy: expected 1-D or 2-D logits, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels))
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: {y.shape} labels for {z.shape[0]} rows")
    if not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
    n, c = z.shape
    if (y < 0).any() or (y >= c).any():
        raise ValueError(
            f"softmax_cross_entropy: label out of range [0, {c}): {y.min()}..{y.max()}")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out = np.asarray((lse - z[np.arange(n), y]).mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        p *= float(g) / n
        return (p[0] if single else p,)

    return _emit((logits,), out, backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "bias_add": bias_add,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "relu": relu,
    "log": log,
    "softmax": softmax,
    "sum": sum_all,
    "mean_spatial": mean_spatial,
    "scale_channels": scale_channels,
    "pad_spatial": pad_spatial,
    "avgpool2": avgpool2,
    "conv2d": conv2d,
    "grl": grl,
}


def forward_primitive(kind: str, inputs, **kwargs) -> Tensor:
    """Apply a primitive by name. Extra parameters go through as keywords."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    Leaves not reachable from the loss get a zero gradient buffer.
    Repeated calls without zero_grad accumulate.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    idx = tape._produced.get(id(loss))
    if idx is None:
        raise AutodiffError("backward: loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for inputs, output, backward_fn in reversed(tape._entries[:idx + 1]):
        gout = grads.get(id(output))
        if gout is None:
            continue
        gins = backward_fn(gout)
        for t, gin in zip(inputs, gins):
            if gin is None:
                continue
            tid = id(t)
            acc = grads.get(tid)
            if acc is None:
                # Own the buffer: backward rules may return views or
                # share arrays between inputs.
                grads[tid] = np.array(gin)
            else:
                acc += gin

    for leaf in tape._leaves.values():
        if not leaf.requires_grad:
            continue
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        g = grads.get(id(leaf))
        if g is not None:
            leaf.grad += g


def grad_check(fn, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar fn() against central differences.

    Returns the max over all parameter entries of
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    if loss.data.size != 1:
        raise AutodiffError("grad_check: fn must return a scalar")
    backward(tape, loss)
    analytic = [np.array(p.grad) for p in params]

    max_err = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.ravel()
        gflat = ga.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("grad_check: non-finite function value")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
