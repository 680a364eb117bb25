"""Reverse-mode automatic differentiation on dense float32 tensors.

Tape-based: every operation records its parents and a backward closure;
``Tensor.backward()`` runs a topological sweep. First-order only, rebuilt
per forward pass.
"""

import numpy as np

DTYPE = np.float32

# When True every op checks its output for NaN/inf and raises NonFiniteError
# naming the op that produced it. Enabled by gradcheck.
CHECK_FINITE = False


class NonFiniteError(FloatingPointError):
    """An operation produced a NaN or infinite value."""

    def __init__(self, op_name):
        super().__init__(f"non-finite value produced by op '{op_name}'")
        self.op_name = op_name


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)  # module DTYPE read at creation time
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype)

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # ---- arithmetic ----

    def _lift(self, other):
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=DTYPE))

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, _parents=(self, other), op="add")

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, _parents=(self, other), op="mul")

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,), op="neg")

        def bw(g):
            if self.requires_grad:
                self._accum(-g)
        out._backward = bw
        return out

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data, _parents=(self, other), op="div")

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))
        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        assert isinstance(p, (int, float)), "only scalar exponents"
        out = Tensor(self.data ** p, _parents=(self,), op="pow")

        def bw(g):
            if self.requires_grad:
                self._accum(g * p * self.data ** (p - 1))
        out._backward = bw
        return out

    def __matmul__(self, other):
        """x @ W with W two-dimensional; x may carry leading batch axes."""
        other = self._lift(other)
        assert other.data.ndim == 2, "right matmul operand must be 2-D"
        out = Tensor(self.data @ other.data, _parents=(self, other), op="matmul")

        def bw(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                n = other.data.shape[0]
                other._accum(self.data.reshape(-1, n).T @ g.reshape(-1, g.shape[-1]))
        out._backward = bw
        return out

    # ---- shape ----

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,), op="reshape")

        def bw(g):
            if self.requires_grad:
                self._accum(g.reshape(self.shape))
        out._backward = bw
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = Tensor(self.data.transpose(axes), _parents=(self,), op="transpose")
        inv = np.argsort(axes) if axes else None

        def bw(g):
            if self.requires_grad:
                self._accum(g.transpose(inv))
        out._backward = bw
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,), op="slice")

        def bw(g):
            if self.requires_grad:
                full = np.zeros(self.shape, dtype=DTYPE)
                np.add.at(full, idx, g)
                self._accum(full)
        out._backward = bw
        return out

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), op="sum")

        def bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.shape))
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- elementwise ----

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,), op="exp")

        def bw(g):
            if self.requires_grad:
                self._accum(g * out.data)
        out._backward = bw
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), op="log")

        def bw(g):
            if self.requires_grad:
                self._accum(g / self.data)
        out._backward = bw
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), _parents=(self,), op="tanh")

        def bw(g):
            if self.requires_grad:
                self._accum(g * (1.0 - out.data ** 2))
        out._backward = bw
        return out

    def sigmoid(self):
        out = Tensor(1.0 / (1.0 + np.exp(-self.data)), _parents=(self,), op="sigmoid")

        def bw(g):
            if self.requires_grad:
                self._accum(g * out.data * (1.0 - out.data))
        out._backward = bw
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _parents=(self,), op="relu")

        def bw(g):
            if self.requires_grad:
                self._accum(g * (self.data > 0))
        out._backward = bw
        return out

    def gelu(self):
        """tanh-approximation GELU."""
        c = np.float32(np.sqrt(2.0 / np.pi))
        x = self.data
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = Tensor(0.5 * x * (1.0 + t), _parents=(self,), op="gelu")

        def bw(g):
            if self.requires_grad:
                dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
                d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
                self._accum(g * d)
        out._backward = bw
        return out

    def sqrt(self):
        return self ** 0.5

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={'set' if self.grad is not None else 'unset'})"


# ---- free functions ----

def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors), op="concat")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accum(g[tuple(sl)])
    out._backward = bw
    return out


def stack(tensors, axis=0):
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=tuple(tensors), op="stack")

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))
    out._backward = bw
    return out


def grl(x, alpha):
    """Gradient reversal: identity forward, backward scales incoming grad by -alpha."""
    if alpha < 0:
        raise ValueError("grl strength must be >= 0")
    out = Tensor(x.data, _parents=(x,), op="grl")

    def bw(g):
        if x.requires_grad:
            x._accum(-alpha * g)
    out._backward = bw
    return out


def reparam_sample(mu, sigma, eps):
    """mu + sigma * eps, with gradient flowing to mu and sigma only."""
    eps = np.asarray(eps, dtype=DTYPE)
    if eps.shape != mu.shape or sigma.shape != mu.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}, eps {eps.shape}")
    return mu + sigma * Tensor(eps)


def kl_diag_gaussian(mu, sigma):
    """KL(N(mu, diag(sigma^2)) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)."""
    if mu.shape != sigma.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}")
    bad = np.flatnonzero(sigma.data <= 0)
    if bad.size:
        raise ValueError(f"sigma must be strictly positive; offending flat index {int(bad[0])}")
    s2 = sigma * sigma
    return ((mu * mu + s2 - 1.0 - s2.log()).sum()) * 0.5


def softmax(logits, axis=-1):
    m = logits.data.max(axis=axis, keepdims=True)
    e = np.exp(logits.data - m)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, _parents=(logits,), op="softmax")

    def bw(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            logits._accum(p * (g - dot))
    out._backward = bw
    return out


def softmax_cross_entropy(logits, labels):
    """-log softmax(logits)[label]; mean over leading axes if labels is an array.

    `logits`: (..., n_classes); `labels`: int or int array matching the
    leading shape.
    """
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    scalar_input = labels.ndim == 0 and logits.data.ndim == 1
    flat_logits = logits.data.reshape(-1, n_classes)
    flat_labels = labels.reshape(-1)
    if flat_labels.shape[0] != flat_logits.shape[0]:
        raise ValueError("labels shape does not match logits leading shape")
    m = flat_logits.max(axis=1, keepdims=True)
    z = flat_logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = flat_labels.shape[0]
    ce = -logp[np.arange(n), flat_labels].mean()
    out = Tensor(ce, _parents=(logits,), op="softmax_cross_entropy")

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), flat_labels] -= 1.0
            logits._accum((g * p / n).reshape(logits.shape))
    out._backward = bw
    _ = scalar_input
    return out


def layer_norm(h, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then gain, bias."""
    x = h.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gain.data + bias.data
    out = Tensor(out_data, _parents=(h, gain, bias), op="layer_norm")
    d = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accum(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g, bias.shape))
        if h.requires_grad:
            gx = g * gain.data
            dg = gx.mean(axis=-1, keepdims=True)
            dgx = (gx * xhat).mean(axis=-1, keepdims=True)
            h._accum(inv * (gx - dg - xhat * dgx))
        _ = d
    out._backward = bw
    return out


def gradcheck(f, x, eps=1e-3):
    """Compare analytic gradient of scalar f at x against central differences.

    Returns the max over coordinates of
    |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    global CHECK_FINITE, DTYPE
    if eps <= 0:
        raise ValueError("eps must be > 0")
    old = CHECK_FINITE
    old_dtype = DTYPE
    CHECK_FINITE = True
    # Evaluate in float64 so the check isolates backward-formula errors from
    # float32 rounding; the training engine itself stays float32.
    DTYPE = np.float64
    try:
        xt = Tensor(x.data.astype(np.float64), requires_grad=True)
        out = f(xt)
        out.backward()
        analytic = xt.grad.reshape(-1).astype(np.float64)
        base = x.data.astype(np.float64).reshape(-1)
        numeric = np.zeros_like(analytic)
        for i in range(base.size):
            step = eps * (1.0 + abs(float(base[i])))
            for sign in (+1.0, -1.0):
                v = base.copy()
                v[i] += sign * step
                val = float(f(Tensor(v.reshape(x.shape))).data)
                numeric[i] += sign * val
            numeric[i] /= 2.0 * step
        rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
        return float(rel.max())
    finally:
        CHECK_FINITE = old
        DTYPE = old_dtype
