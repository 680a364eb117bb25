"""Learned components: inverse dynamics, flow-matching forward dynamics,
embodiment discriminator, and the action-to-latent controller.

All components are plain MLP stacks over the autodiff Tensor type. The
forward model consumes a latent token sequence v_{1:F} (the latent encoder
is the identity here, so v = x), conditions on the inferred latent actions
through adaptive layer norm, and is trained as a flow-matching velocity
predictor with per-token noise levels (diffusion forcing).
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, grl, reparam_sample
from .nn import (
    CausalConvKernel,
    Mlp,
    MlpSpec,
    ModulationWeights,
    adaln_modulate,
    causal_temporal_conv,
    init_linear,
    time_embed,
)

F32 = np.float32


def linear_schedule(tau):
    """sigma_tau = tau: noise fraction equals the time coordinate."""
    return tau


@dataclass
class ModelConfig:
    d_v: int = 12              # latent token width (identity encoder: = d_x)
    d_z: int = 8               # latent action width
    d_c: int = 16              # conditioning width after temporal conv
    d_a_max: int = 5           # padded raw-action width for action baselines
    n_embodiments: int = 4
    idm_hidden: tuple = (64, 64, 64)
    fdm_hidden: tuple = (128, 128, 128)
    disc_hidden: tuple = (32, 32)
    a2l_hidden: tuple = (64, 64)
    a2l_memory: int = 16
    stride: int = 1            # temporal compression of the conditioning path
    time_width: int = 8
    f_hist: int = 5
    p_clean: float = 0.5
    n_euler_steps: int = 8

    def __post_init__(self):
        if self.time_width % 2:
            raise ValueError("time_width must be even")
        if not 0.0 <= self.p_clean <= 1.0:
            raise ValueError("p_clean must lie in [0, 1]")


@dataclass
class LatentActionPosterior:
    """Per-transition diagonal Gaussian over the latent action."""

    mu: Tensor          # (T-1, d_z)
    log_sigma: Tensor   # (T-1, d_z)

    def sample(self, rng):
        eps = rng.standard_normal(self.mu.shape).astype(F32)
        return reparam_sample(self.mu, self.log_sigma.exp(), eps)


@dataclass
class FlowBatch:
    v: np.ndarray
    epsilon: np.ndarray
    tau_seq: np.ndarray
    v_tilde: np.ndarray
    u_tau: np.ndarray


def make_flow_target(v, epsilon, tau_seq, schedule=linear_schedule):
    """Noise the clean sequence and form the velocity target.

    v_tilde = (1 - sigma_tau) v + sigma_tau eps, u_tau = eps - v.
    """
    v = np.asarray(v, F32)
    epsilon = np.asarray(epsilon, F32)
    tau_seq = np.asarray(tau_seq, F32)
    if epsilon.shape != v.shape:
        raise ValueError(f"epsilon shape {epsilon.shape} != v shape {v.shape}")
    if tau_seq.shape != v.shape[:-1]:
        raise ValueError("tau_seq must hold one noise level per token")
    if tau_seq.min() < 0 or tau_seq.max() > 1:
        raise ValueError("tau values must lie in [0, 1]")
    sigma = np.asarray(schedule(tau_seq), F32)[..., None]
    v_tilde = (1.0 - sigma) * v + sigma * epsilon
    return FlowBatch(v=v, epsilon=epsilon, tau_seq=tau_seq,
                     v_tilde=v_tilde.astype(F32), u_tau=(epsilon - v).astype(F32))


def diffusion_forcing_schedule(F, f_hist, p_clean, rng):
    """Independent tau_f ~ U[0,1]; with probability p_clean the whole
    history block is clamped clean (tau = 0)."""
    if not 0 <= f_hist <= F:
        raise ValueError("need 0 <= f_hist <= F")
    tau = rng.uniform(0.0, 1.0, F).astype(F32)
    if f_hist and rng.uniform() < p_clean:
        tau[:f_hist] = 0.0
    return tau


# ---- parameter containers ----

class _Component:
    """Name-prefixed parameter bag with checkpoint plumbing."""

    prefix = ""

    def params(self):
        return {f"{self.prefix}.{k}": t for k, t in self._named().items()}

    def load(self, tensors):
        mine = self.params()
        for name, t in mine.items():
            if name not in tensors:
                raise KeyError(f"checkpoint missing {name}")
            if tensors[name].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            t.data[...] = tensors[name].astype(t.data.dtype)


class IdmParams(_Component):
    prefix = "idm"

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = [2 * cfg.d_v, *cfg.idm_hidden, 2 * cfg.d_z]
        self.mlp = Mlp(MlpSpec(widths, activation="gelu"), rng)
        self.cond_kernel = CausalConvKernel(cfg.d_z, cfg.d_c, cfg.stride, rng)

    def _named(self):
        named = dict(self.mlp.params())
        named.update(self.cond_kernel.params())
        return named


class FdmParams(_Component):
    prefix = "fdm"

    def __init__(self, cfg, rng):
        self.cfg = cfg
        d_in = 3 * cfg.d_v + cfg.time_width
        widths = [d_in, *cfg.fdm_hidden]
        self.layers = []
        self.mods = []
        for i in range(len(widths) - 1):
            self.layers.append(init_linear(rng, widths[i], widths[i + 1]))
            self.mods.append(ModulationWeights(cfg.d_c, widths[i + 1], rng))
        self.w_out, self.b_out = init_linear(rng, widths[-1], cfg.d_v)

    def _named(self):
        named = {}
        for i, (w, b) in enumerate(self.layers):
            named[f"block{i}.w"] = w
            named[f"block{i}.b"] = b
            named[f"block{i}.mod.w"] = self.mods[i].w
            named[f"block{i}.mod.b"] = self.mods[i].b
        named["out.w"] = self.w_out
        named["out.b"] = self.b_out
        return named


class DiscParams(_Component):
    prefix = "disc"

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = [cfg.d_z, *cfg.disc_hidden, cfg.n_embodiments]
        self.mlp = Mlp(MlpSpec(widths, activation="gelu"), rng)

    def _named(self):
        return dict(self.mlp.params())


class A2LParams(_Component):
    prefix = "a2l"

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.encoder = Mlp(MlpSpec([cfg.d_v, *cfg.a2l_hidden, cfg.a2l_memory],
                                   activation="gelu"), rng)
        d_in = cfg.d_a_max + cfg.a2l_memory
        self.decoder = Mlp(MlpSpec([d_in, *cfg.a2l_hidden, cfg.d_z],
                                   activation="gelu"), rng)

    def _named(self):
        named = {f"enc.{k}": t for k, t in self.encoder.params().items()}
        named.update({f"dec.{k}": t for k, t in self.decoder.params().items()})
        return named


class ActionCondParams(_Component):
    """Conditioning path for raw-action baselines: padded actions are run
    through the same causal temporal conv used for latent actions."""

    prefix = "gtcond"

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.cond_kernel = CausalConvKernel(cfg.d_a_max, cfg.d_c, cfg.stride, rng)

    def _named(self):
        return dict(self.cond_kernel.params())


@dataclass
class ScarModel:
    cfg: ModelConfig
    idm: IdmParams
    fdm: FdmParams
    disc: DiscParams
    a2l: A2LParams = None
    gtcond: ActionCondParams = None

    def params(self):
        out = {}
        for comp in (self.idm, self.fdm, self.disc, self.a2l, self.gtcond):
            if comp is not None:
                out.update(comp.params())
        return out

    def numpy_params(self):
        return {k: t.data.copy() for k, t in self.params().items()}

    def load(self, tensors):
        for comp in (self.idm, self.fdm, self.disc, self.a2l, self.gtcond):
            if comp is not None:
                comp.load(tensors)


def build_model(cfg, rng, with_a2l=False, with_gtcond=False):
    return ScarModel(
        cfg=cfg,
        idm=IdmParams(cfg, rng),
        fdm=FdmParams(cfg, rng),
        disc=DiscParams(cfg, rng),
        a2l=A2LParams(cfg, rng) if with_a2l else None,
        gtcond=ActionCondParams(cfg, rng) if with_gtcond else None,
    )


# ---- forward passes ----

def idm_infer(v_seq, idm):
    """Posterior over per-transition latent actions from the token sequence.

    Accepts (T, d_v) or any leading batch shape (..., T, d_v).
    """
    if not isinstance(v_seq, Tensor):
        v_seq = Tensor(np.asarray(v_seq, F32))
    T = v_seq.shape[-2]
    if T < 2:
        raise ValueError("need at least two tokens to infer a transition")
    pairs = concat([v_seq[..., :-1, :], v_seq[..., 1:, :]], axis=-1)
    out = idm.mlp(pairs)
    d_z = idm.cfg.d_z
    return LatentActionPosterior(mu=out[..., :d_z], log_sigma=out[..., d_z:])


def cond_sequence(z_seq, idm):
    """Align latent actions to the token timeline: a zero token is placed
    before z_1 so token f is conditioned only on actions strictly before it,
    then the causal temporal conv compresses by the configured stride."""
    if not isinstance(z_seq, Tensor):
        z_seq = Tensor(np.asarray(z_seq, F32))
    zero = Tensor(np.zeros((*z_seq.shape[:-2], 1, z_seq.shape[-1]), F32))
    padded = concat([zero, z_seq], axis=-2)
    return causal_temporal_conv(padded, idm.cond_kernel)


def action_cond_sequence(a_seq, gtcond):
    """Same alignment for padded raw actions (action-conditioned baseline)."""
    if not isinstance(a_seq, Tensor):
        a_seq = Tensor(np.asarray(a_seq, F32))
    zero = Tensor(np.zeros((*a_seq.shape[:-2], 1, a_seq.shape[-1]), F32))
    padded = concat([zero, a_seq], axis=-2)
    return causal_temporal_conv(padded, gtcond.cond_kernel)


def pad_actions(a_seq, d_a_max):
    a_seq = np.asarray(a_seq, F32)
    if a_seq.shape[-1] > d_a_max:
        raise ValueError("action dimension exceeds the padded interface width")
    out = np.zeros((*a_seq.shape[:-1], d_a_max), F32)
    out[..., : a_seq.shape[-1]] = a_seq
    return out


def fdm_flow_predict(v_tilde, tau_seq, c_seq, fdm, v_ctx=None):
    """Predicted flow velocity for every token.

    Per-token input is the noised token, its noised predecessor (zeros for
    the first token), a clean context token shared across the sequence (the
    last history frame; zeros when absent), and the time embedding of its
    noise level; the conditioning sequence enters through AdaLN at every
    hidden block. Accepts (F, d_v) or any leading batch shape (..., F, d_v);
    tau_seq must match the leading-and-time shape.
    """
    if not isinstance(v_tilde, Tensor):
        v_tilde = Tensor(np.asarray(v_tilde, F32))
    F = v_tilde.shape[-2]
    if not isinstance(c_seq, Tensor):
        c_seq = Tensor(np.asarray(c_seq, F32))
    if c_seq.shape[-2] != F:
        raise ValueError(f"conditioning length {c_seq.shape[-2]} != token count {F}")
    temb = Tensor(time_embed(np.asarray(tau_seq, F32), fdm.cfg.time_width))
    zero = Tensor(np.zeros((*v_tilde.shape[:-2], 1, fdm.cfg.d_v), F32))
    prev = concat([zero, v_tilde[..., :-1, :]], axis=-2)
    if v_ctx is None:
        ctx_tokens = Tensor(np.zeros((*v_tilde.shape[:-2], F, fdm.cfg.d_v), F32))
    else:
        if not isinstance(v_ctx, Tensor):
            v_ctx = Tensor(np.asarray(v_ctx, F32))
        one = v_ctx.reshape(*v_ctx.shape[:-1], 1, v_ctx.shape[-1])
        ctx_tokens = concat([one] * F, axis=-2)
    h = concat([v_tilde, prev, ctx_tokens, temb], axis=-1)
    for (w, b), mod in zip(fdm.layers, fdm.mods):
        h = adaln_modulate(h @ w + b, c_seq, mod).gelu()
    return h @ fdm.w_out + fdm.b_out


def rollout_generate(context, c_seq, fdm, rng, n_steps=None, schedule=linear_schedule):
    """Euler-integrate the flow from tau=1 to tau=0 over the future tokens,
    clamping the context block to its clean values at every step."""
    if n_steps is None:
        n_steps = fdm.cfg.n_euler_steps
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    context = np.asarray(context, F32)
    f_hist = context.shape[0]
    F = c_seq.shape[0] if not isinstance(c_seq, Tensor) else c_seq.shape[0]
    if f_hist >= F:
        raise ValueError("context covers the whole horizon; nothing to generate")
    cur = np.concatenate(
        [context, rng.standard_normal((F - f_hist, fdm.cfg.d_v)).astype(F32)], axis=0)
    taus = np.linspace(1.0, 0.0, n_steps + 1)
    v_ctx = context[-1]
    for k in range(n_steps):
        tau_seq = np.full(F, taus[k], F32)
        tau_seq[:f_hist] = 0.0
        u_hat = fdm_flow_predict(cur, tau_seq, c_seq, fdm, v_ctx=v_ctx).data
        cur = cur + (taus[k + 1] - taus[k]) * u_hat
        cur[:f_hist] = context
    return cur.astype(F32)


def disc_classify(z, disc, alpha):
    """Per-token embodiment logits; the gradient-reversal node sits between
    the latent and the classifier, scaling upstream gradients by -alpha."""
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, F32))
    return disc.mlp(grl(z, alpha))


def a2l_predict(a_seq, context, a2l, pointwise=False):
    """Latent-action sequence from raw commands plus visual context.

    The context tokens are encoded and mean-pooled into a memory vector that
    is broadcast to every decoding step; the pointwise variant zeroes the
    memory so the comparison isolates context, not capacity.
    """
    a_seq = np.asarray(a_seq, F32)
    if a_seq.shape[0] == 0:
        return Tensor(np.zeros((0, a2l.cfg.d_z), F32))
    a_pad = pad_actions(a_seq, a2l.cfg.d_a_max)
    if pointwise:
        memory = Tensor(np.zeros((1, a2l.cfg.a2l_memory), F32))
    else:
        context = np.asarray(context, F32)
        if context.shape[0] == 0:
            raise ValueError("sequence variant needs a nonempty context")
        memory = a2l.encoder(Tensor(context)).mean(axis=0).reshape(1, -1)
    mem_rows = concat([memory] * a_pad.shape[0], axis=0)
    return a2l.decoder(concat([Tensor(a_pad), mem_rows], axis=1))
