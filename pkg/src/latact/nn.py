"""Neural building blocks: MLP stacks, AdaLN modulation, causal temporal
convolution, sinusoidal time embedding, single-head temporal attention."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, layer_norm, softmax


@dataclass
class MlpSpec:
    widths: list            # input width first, output width last
    activation: str = "tanh"
    init_scale: float = 1.0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least input and output widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.activation not in ("tanh", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


def init_linear(rng, fan_in, fan_out, scale=1.0):
    """Uniform in +-scale/sqrt(fan_in)."""
    bound = scale / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    b = np.zeros(fan_out, dtype=np.float32)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


class Mlp:
    """Plain MLP; activation on all but the final layer."""

    def __init__(self, spec, rng, name="mlp"):
        self.spec = spec
        self.name = name
        self.layers = []
        for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            self.layers.append(init_linear(rng, a, b, spec.init_scale))

    def __call__(self, x):
        act = Tensor.tanh if self.spec.activation == "tanh" else Tensor.gelu
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def params(self):
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{self.name}.l{i}.w"] = w
            out[f"{self.name}.l{i}.b"] = b
        return out

    def load(self, tensors):
        for k, p in self.params().items():
            p.data[...] = tensors[k]


class ModulationWeights:
    """Linear map from a conditioning vector to concatenated (beta, gamma)."""

    def __init__(self, cond_width, hidden_width, rng, name="mod"):
        self.hidden_width = hidden_width
        self.name = name
        self.w, self.b = init_linear(rng, cond_width, 2 * hidden_width)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


def adaln_modulate(h, c, mod):
    """(1 + gamma) * LN(h) + beta with (beta, gamma) = W_mod c.

    Zeroed conditioning (c=0, zero bias) reduces exactly to LN(h).
    """
    d = h.shape[-1]
    if d != mod.hidden_width:
        raise ValueError(f"hidden width {d} != modulation width {mod.hidden_width}")
    bg = c @ mod.w + mod.b
    beta = bg[..., :d]
    gamma = bg[..., d:]
    ones = Tensor(np.ones(d, dtype=np.float32))
    zeros = Tensor(np.zeros(d, dtype=np.float32))
    return (gamma + 1.0) * layer_norm(h, ones, zeros) + beta


class CausalConvKernel:
    """Weights for the stride-grouped causal temporal convolution.

    The first output token reads only the first input token through
    `w_first`; every later output token reads its own stride-length block
    through `w_block[k]`.
    """

    def __init__(self, d_in, d_out, stride, rng, name="cconv"):
        self.stride = stride
        self.name = name
        self.w_first, self.b_first = init_linear(rng, d_in, d_out)
        self.w_block = [init_linear(rng, d_in, d_out) for _ in range(stride)]

    @classmethod
    def identity(cls, d, stride=1):
        rng = np.random.default_rng(0)
        k = cls(d, d, stride, rng)
        k.w_first.data[...] = np.eye(d, dtype=np.float32)
        for w, b in k.w_block:
            w.data[...] = np.eye(d, dtype=np.float32)
            b.data[...] = 0.0
        k.b_first.data[...] = 0.0
        return k

    def params(self):
        out = {f"{self.name}.first.w": self.w_first, f"{self.name}.first.b": self.b_first}
        for i, (w, b) in enumerate(self.w_block):
            out[f"{self.name}.blk{i}.w"] = w
            out[f"{self.name}.blk{i}.b"] = b
        return out


def causal_temporal_conv(z_seq, kernel):
    """Map T frame-rate tokens to F = 1 + (T-1)/stride conditioning tokens.

    Token 1 sees only z_1; token f >= 2 sees the block
    z_{(f-2)s+2 : (f-1)s+1}. No output depends on later inputs.
    `z_seq`: Tensor of shape (..., T, d_in).
    """
    s = kernel.stride
    if s < 1:
        raise ValueError("stride must be >= 1")
    T = z_seq.shape[-2]
    if (T - 1) % s != 0:
        raise ValueError(f"(T-1)={T - 1} not divisible by stride {s}")
    F = 1 + (T - 1) // s
    outs = [z_seq[..., 0:1, :] @ kernel.w_first + kernel.b_first]
    for f in range(1, F):
        start = 1 + (f - 1) * s
        block = None
        for k in range(s):
            w, b = kernel.w_block[k]
            term = z_seq[..., start + k:start + k + 1, :] @ w + b
            block = term if block is None else block + term
        outs.append(block)
    return concat(outs, axis=-2)


def time_embed(tau, width, max_freq=1000.0):
    """Sinusoidal embedding of tau in [0, 1]; frequencies geometrically spaced.

    Returns a plain float32 array: (..., width) = [sin(w_k tau), cos(w_k tau)].
    """
    if width % 2 != 0:
        raise ValueError("width must be even")
    tau = np.asarray(tau, dtype=np.float32)
    half = width // 2
    k = np.arange(half)
    freqs = max_freq ** (k / max(half - 1, 1))
    ang = tau[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


class TemporalAttention:
    """Single-head self-attention over the time axis of (..., T, d)."""

    def __init__(self, d, rng, name="attn"):
        self.name = name
        self.d = d
        self.wq, _ = init_linear(rng, d, d)
        self.wk, _ = init_linear(rng, d, d)
        self.wv, _ = init_linear(rng, d, d)
        self.wo, _ = init_linear(rng, d, d)

    def __call__(self, x):
        q = x @ self.wq
        k = x @ self.wk
        v = x @ self.wv
        scores = q @_t(k) * (1.0 / np.sqrt(self.d))
        attn = softmax(scores, axis=-1)
        mixed = _bmm(attn, v)
        return x + mixed @ self.wo

    def params(self):
        return {f"{self.name}.wq": self.wq, f"{self.name}.wk": self.wk,
                f"{self.name}.wv": self.wv, f"{self.name}.wo": self.wo}


def _t(x):
    """Transpose of a 2-D tensor for attention score computation."""
    if len(x.shape) != 2:
        raise ValueError("temporal attention supports unbatched (T, d) input")
    return x.transpose(1, 0)


def _bmm(a, b):
    return a @ b
