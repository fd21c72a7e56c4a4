"""Reverse-mode differentiable tensor kernel on float64 numpy arrays.

Covers exactly what the tracking model needs: dense stacks, same-padded 2-D
convolutions, elementwise nonlinearities, gather / segment reductions with
per-segment softmax, scalar-loss backpropagation, Adam, finite-difference
gradient checking, and a JSON parameter container.  All arithmetic is 64-bit
and single-threaded, so results are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .errors import CheckpointError, GradientError, ShapeError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    """Whether operations are currently recorded for backpropagation."""
    return _GRAD_ENABLED


class no_grad:
    """Context manager that suspends recording of backward closures."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


class Tensor:
    """Dense float64 array plus an optional link into the computation record.

    Leaves created with requires_grad=True are parameters; tensors produced
    by operations carry a backward closure while recording is enabled.
    Constants (labels, masks, feature matrices) stay outside the record and
    never receive gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _live(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _record(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_live(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not _live(t):
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce a broadcast gradient back down to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into .grad fields."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = astensor(a)

    def bwd(g):
        _accum(a, -g)

    return _record(-a.data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} and {b.data.shape} do not chain")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(data, (a, b), bwd)


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0.0

    def bwd(g):
        _accum(a, g * mask)

    return _record(a.data * mask, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = astensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _record(np.log(a.data), (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through strictly inside."""
    a = astensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        _accum(a, g * inside)

    return _record(np.clip(a.data, lo, hi), (a,), bwd)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _record(data, (a,), bwd)


def mean(a) -> Tensor:
    a = astensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _record(a.data.mean(), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(data, (a,), bwd)


def concat(parts, axis: int = 1) -> Tensor:
    parts = [astensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    spans = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, spans, axis=axis)):
            _accum(p, piece)

    return _record(data, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# gather / scatter primitives for graph aggregation

def rows(a, idx) -> Tensor:
    """Gather rows along axis 0; the gradient scatter-adds back."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _record(a.data[idx], (a,), bwd)


def segment_sum(a, seg, num_segments: int) -> Tensor:
    """Sum rows into num_segments bins keyed by seg; empty bins stay zero."""
    a = astensor(a)
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError(f"segment ids {seg.shape} do not match rows {a.data.shape}")
    out = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)

    def bwd(g):
        _accum(a, g[seg])

    return _record(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner))

    return _record(out, (a,), bwd)


def segment_softmax(logits, seg, num_segments: int) -> Tensor:
    """Softmax of a 1-D logit vector normalized within each segment."""
    a = astensor(logits)
    if a.data.ndim != 1:
        raise ShapeError(f"segment_softmax expects 1-D logits, got {a.data.shape}")
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError(f"segment ids {seg.shape} do not match logits {a.data.shape}")
    mx = np.full(num_segments, -np.inf)
    np.maximum.at(mx, seg, a.data)
    ex = np.exp(a.data - mx[seg])
    den = np.zeros(num_segments)
    np.add.at(den, seg, ex)
    out = ex / den[seg]

    def bwd(g):
        inner = np.zeros(num_segments)
        np.add.at(inner, seg, g * out)
        _accum(a, out * (g - inner[seg]))

    return _record(out, (a,), bwd)


def conv2d(x, w, b, kernel: int) -> Tensor:
    """Same-padded 2-D convolution on (N, H, W, Cin) with an odd square kernel.

    The kernel matrix w is stored flattened as (kernel*kernel*Cin, Cout) with
    taps ordered row-major over (dy, dx).
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    if kernel % 2 != 1 or kernel < 1:
        raise ShapeError(f"kernel size must be odd and positive, got {kernel}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects (N, H, W, C) input, got {x.data.shape}")
    n, h, wd, cin = x.data.shape
    taps = kernel * kernel
    if w.data.shape[0] != taps * cin:
        raise ShapeError(f"kernel matrix {w.data.shape} does not match {taps}x{cin} taps")
    cout = w.data.shape[1]
    pad = kernel // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.concatenate(
        [xp[:, dy:dy + h, dx:dx + wd, :] for dy in range(kernel) for dx in range(kernel)],
        axis=3,
    )
    flat = cols.reshape(-1, taps * cin)
    out = (flat @ w.data + b.data).reshape(n, h, wd, cout)

    def bwd(g):
        gflat = g.reshape(-1, cout)
        _accum(w, flat.T @ gflat)
        _accum(b, gflat.sum(axis=0))
        if _live(x):
            gcols = (gflat @ w.data.T).reshape(n, h, wd, taps * cin)
            gxp = np.zeros_like(xp)
            for t_i, (dy, dx) in enumerate((dy, dx) for dy in range(kernel) for dx in range(kernel)):
                gxp[:, dy:dy + h, dx:dx + wd, :] += gcols[:, :, :, t_i * cin:(t_i + 1) * cin]
            _accum(x, gxp[:, pad:pad + h, pad:pad + wd, :])

    return _record(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# parameter containers

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class DenseStack:
    """Fully connected stack with ReLU between layers.

    sizes lists the feature widths, so [6, 32, 1] is a two-layer network.
    out_activation is 'identity', 'relu', or 'sigmoid'.
    """

    def __init__(self, sizes, out_activation: str = "identity", *,
                 rng: np.random.Generator, name: str):
        if len(sizes) < 2:
            raise ShapeError(f"{name}: need at least one layer, got sizes {sizes}")
        if out_activation not in ("identity", "relu", "sigmoid"):
            raise ShapeError(f"{name}: unknown activation {out_activation!r}")
        self.name = name
        self.sizes = list(sizes)
        self.out_activation = out_activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for k, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(Tensor(glorot_uniform(rng, fin, fout, (fin, fout)),
                                       requires_grad=True, name=f"{name}/W{k}"))
            # biases use the same symmetric draw: exactly-zero biases let a
            # dead ReLU row pin downstream pre-activations exactly onto the
            # next kink, which is a non-differentiable point
            self.biases.append(Tensor(glorot_uniform(rng, fin, fout, (fout,)),
                                      requires_grad=True, name=f"{name}/b{k}"))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append((w.name, w))
            out.append((b.name, b))
        return out

    def __call__(self, x) -> Tensor:
        return dense_forward(self, x)


def dense_forward(stack: DenseStack, x) -> Tensor:
    x = astensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != stack.sizes[0]:
        raise ShapeError(
            f"{stack.name}: input shape {x.data.shape} does not match "
            f"expected (n, {stack.sizes[0]})")
    h = x
    last = len(stack.weights) - 1
    for k, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        h = add(matmul(h, w), b)
        if k < last:
            h = relu(h)
        elif stack.out_activation == "relu":
            h = relu(h)
        elif stack.out_activation == "sigmoid":
            h = sigmoid(h)
    return h


class ConvStack:
    """Same-padded conv layers with ReLU between them.

    channels lists the channel widths per layer boundary; all kernels are
    square with odd size.  out_activation is 'identity' or 'sigmoid'.
    """

    def __init__(self, channels, kernel: int = 3, out_activation: str = "identity", *,
                 rng: np.random.Generator, name: str):
        if len(channels) < 2:
            raise ShapeError(f"{name}: need at least one conv layer")
        if kernel % 2 != 1:
            raise ShapeError(f"{name}: kernel must be odd, got {kernel}")
        if out_activation not in ("identity", "sigmoid"):
            raise ShapeError(f"{name}: unknown activation {out_activation!r}")
        self.name = name
        self.channels = list(channels)
        self.kernel = kernel
        self.out_activation = out_activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        taps = kernel * kernel
        for k, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            w = glorot_uniform(rng, taps * cin, taps * cout, (taps * cin, cout))
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}/K{k}"))
            self.biases.append(Tensor(glorot_uniform(rng, taps * cin, taps * cout,
                                                     (cout,)),
                                      requires_grad=True, name=f"{name}/b{k}"))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append((w.name, w))
            out.append((b.name, b))
        return out

    def __call__(self, x) -> Tensor:
        return conv_forward(self, x)


def conv_forward(stack: ConvStack, x) -> Tensor:
    x = astensor(x)
    squeeze = False
    if x.data.ndim == 3:
        x = reshape(x, (1,) + x.data.shape)
        squeeze = True
    if x.data.ndim != 4 or x.data.shape[3] != stack.channels[0]:
        raise ShapeError(
            f"{stack.name}: input shape {x.data.shape} does not match "
            f"expected (n, h, w, {stack.channels[0]})")
    h = x
    last = len(stack.weights) - 1
    for k, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        h = conv2d(h, w, b, stack.kernel)
        if k < last:
            h = relu(h)
        elif stack.out_activation == "sigmoid":
            h = sigmoid(h)
    if squeeze:
        h = reshape(h, h.data.shape[1:])
    return h


# ---------------------------------------------------------------------------
# optimization

class AdamState:
    """First/second moment buffers plus hyperparameters for Adam.

    weight_decay is additive L2: the decay term joins the gradient before
    the moment updates.
    """

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: list[tuple[str, Tensor]], grads, state: AdamState) -> None:
    """Apply one Adam update in place.

    grads may be None, in which case each parameter's .grad is used
    (missing gradients count as zero).
    """
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for _, p in params]
    if len(grads) != len(params):
        raise GradientError(f"got {len(grads)} gradients for {len(params)} parameters")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for (name, p), g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise GradientError(f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter group {name}")
        g = g + state.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, params: list[tuple[str, Tensor]], fd_step: float = 1e-6) -> float:
    """Compare backpropagated gradients against central differences.

    f rebuilds the computation and returns the scalar loss.  Returns the
    maximum relative error |ga - gn| / max(scale, |ga| + |gn|) over every
    element of every parameter, where scale = 1e-5 * max(1, |loss|).  The
    scale floor matches what the difference quotient can certify: each loss
    evaluation carries relative rounding of about 2e-16, so the quotient has
    absolute noise near eps * |loss| / (2 * fd_step) ~ 1e-10 * |loss|, and
    gradients below the floor are compared absolutely at that noise ceiling
    instead of relatively.
    """
    for _, p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for _, p in params]
    scale = 1e-5 * max(1.0, abs(loss.data.item()))
    worst = 0.0
    with no_grad():
        for (_, p), ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + fd_step
                up = f().item()
                flat[i] = saved - fd_step
                down = f().item()
                flat[i] = saved
                gn = (up - down) / (2.0 * fd_step)
                rel = abs(gflat[i] - gn) / max(scale, abs(gflat[i]) + abs(gn))
                if rel > worst:
                    worst = rel
    return worst


# ---------------------------------------------------------------------------
# parameter serialization

CHECKPOINT_FORMAT = "mpnflow-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: list[tuple[str, Tensor]], extra: dict | None = None) -> None:
    """Write named parameter groups to a self-describing JSON file.

    Values are emitted through repr-exact float serialization, so a
    save/load round trip reproduces every bit.
    """
    groups = {}
    for name, p in params:
        if name in groups:
            raise CheckpointError(f"duplicate parameter group name {name!r}")
        groups[name] = {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "groups": groups,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint, returning (name -> array, extra metadata)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing or wrong format header")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    groups = {}
    for name, spec in doc.get("groups", {}).items():
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        groups[name] = arr
    return groups, doc.get("extra", {})


def assign_parameters(params: list[tuple[str, Tensor]], groups: dict[str, np.ndarray]) -> None:
    """Load arrays into live parameters, insisting on matching names/shapes."""
    names = {name for name, _ in params}
    missing = names - set(groups)
    extra = set(groups) - names
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in params:
        arr = groups[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match {p.data.shape}")
        p.data = arr.copy()
