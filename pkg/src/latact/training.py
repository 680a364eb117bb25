"""Loss assembly and training loops for the latent-action variants, the
action-free forward-model pretraining phase, and the action-to-latent stage.

L_total = L_rec + beta * L_KL + lambda_adv * L_GRL. The discriminator and
the encoder update in a single optimizer step: the gradient-reversal node
between the latent and the classifier realizes the minimax.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, kl_diag_gaussian, softmax_cross_entropy
from .models import (
    ModelConfig,
    a2l_predict,
    action_cond_sequence,
    build_model,
    cond_sequence,
    diffusion_forcing_schedule,
    disc_classify,
    fdm_flow_predict,
    idm_infer,
    make_flow_target,
    pad_actions,
)
from .optim import AdamW
from .rng import stream
from .serialize import checksum

F32 = np.float32

VARIANTS = {
    "shared-latent": {"kl": False, "grl": False},
    "scar-kl": {"kl": True, "grl": False},
    "scar-grl": {"kl": False, "grl": True},
    "scar-kl-grl": {"kl": True, "grl": True},
    "target-only-latent": {"kl": False, "grl": False, "target_only": True},
    "gt-action-baseline": {"kl": False, "grl": False, "gt_action": True},
}

# wall_ms is kept in the in-memory rows but not persisted: written outputs
# must be byte-identical across reruns of the same (command, config, seed)
LOG_COLUMNS = ["step", "L_total", "L_rec", "L_KL", "L_GRL", "grad_norm"]


class TrainingAborted(RuntimeError):
    def __init__(self, step, component, value):
        super().__init__(f"step {step}: {component} = {value}")
        self.step = step
        self.component = component


@dataclass
class TrainConfig:
    variant: str = "scar-kl-grl"
    beta: float = 5e-4
    lam_adv: float = 5e-3
    alpha: float = 0.25
    lr_idm: float = 5e-5
    lr_fdm: float = 5e-6
    lr_disc: float = 5e-5       # paper leaves this unstated; tied to the IDM rate
    lr_a2l: float = 1e-4
    wd_idm: float = 1e-4
    wd_fdm: float = 5e-2
    steps: int = 2000
    pretrain_steps: int = 500
    a2l_steps: int = 800
    batch_episodes: int = 16
    seed: int = 0
    m_target: int = 10
    source_count: int = 300
    pretrain_fdm: bool = False
    kl_warmup_steps: int = 0    # linear ramp of beta from 0; 0 disables

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("beta", "lam_adv", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        flags = VARIANTS[self.variant]
        if flags["kl"] and self.beta == 0:
            raise ValueError(f"variant {self.variant} requires beta > 0")
        if not flags["kl"] and self.beta != 0:
            raise ValueError(f"variant {self.variant} requires beta = 0")
        if flags["grl"] and self.lam_adv == 0:
            raise ValueError(f"variant {self.variant} requires lam_adv > 0")
        if not flags["grl"] and self.lam_adv != 0:
            raise ValueError(f"variant {self.variant} requires lam_adv = 0")

    @property
    def uses_kl(self):
        return VARIANTS[self.variant]["kl"]

    @property
    def uses_grl(self):
        return VARIANTS[self.variant]["grl"]

    @property
    def target_only(self):
        return VARIANTS[self.variant].get("target_only", False)

    @property
    def gt_action(self):
        return VARIANTS[self.variant].get("gt_action", False)


def make_config(variant, **overrides):
    """TrainConfig with loss weights consistent with the variant's gating:
    paper-default weights where a term is active, zero where it is not."""
    flags = VARIANTS[variant]
    base = {"variant": variant,
            "beta": 5e-4 if flags["kl"] else 0.0,
            "lam_adv": 5e-3 if flags["grl"] else 0.0}
    base.update(overrides)
    return TrainConfig(**base)


def _episode_pool(dataset, config):
    if config.target_only:
        pool = [ep for ep in dataset.episodes if ep.e == dataset.target_e]
    else:
        pool = list(dataset.episodes)
    if not pool:
        raise ValueError("empty episode pool for this variant")
    return pool


def _stack_batch(pool, idx, d_a_max):
    eps = [pool[i] for i in idx]
    v = np.stack([ep.x for ep in eps]).astype(F32)
    a = np.stack([pad_actions(ep.a, d_a_max) for ep in eps]).astype(F32)
    e = np.array([ep.e for ep in eps])
    return v, a, e


def total_loss(model, batch, config, rng, step=None):
    """(L_total, components). Components are floats; inactive terms are None.

    L_rec: mean squared error between predicted and target flow velocity over
    all tokens. L_KL: KL to the standard normal, averaged per transition.
    L_GRL: mean classifier cross-entropy over all latent-action tokens.
    With kl_warmup_steps > 0 the KL weight ramps linearly from 0 so the
    posterior can settle on an informative code before being compressed.
    """
    v, a, e = batch
    B, T, _ = v.shape
    cfg = model.cfg

    if config.gt_action:
        c_seq = action_cond_sequence(a, model.gtcond)
        post = None
        z = None
    else:
        post = idm_infer(v, model.idm)
        z = post.sample(rng)
        c_seq = cond_sequence(z, model.idm)

    tau = np.stack([diffusion_forcing_schedule(T, cfg.f_hist, cfg.p_clean, rng)
                    for _ in range(B)])
    epsilon = rng.standard_normal(v.shape).astype(F32)
    fb = make_flow_target(v, epsilon, tau)
    v_ctx = v[:, cfg.f_hist - 1, :]
    pred = fdm_flow_predict(fb.v_tilde, fb.tau_seq, c_seq, model.fdm, v_ctx=v_ctx)
    l_rec = ((pred - Tensor(fb.u_tau)) ** 2).mean()
    total = l_rec
    components = {"L_rec": float(l_rec.data), "L_KL": None, "L_GRL": None}

    if config.uses_kl:
        beta = config.beta
        if config.kl_warmup_steps > 0 and step is not None:
            beta *= min(1.0, (step + 1) / config.kl_warmup_steps)
        l_kl = kl_diag_gaussian(post.mu, post.log_sigma.exp()) * (1.0 / (B * (T - 1)))
        total = total + l_kl * beta
        components["L_KL"] = float(l_kl.data)
    if config.uses_grl:
        logits = disc_classify(z, model.disc, config.alpha)
        labels = np.broadcast_to(e[:, None], (B, T - 1))
        l_grl = softmax_cross_entropy(logits, labels)
        total = total + l_grl * config.lam_adv
        components["L_GRL"] = float(l_grl.data)

    components["L_total"] = float(total.data)
    return total, components


def _check_components(step, components):
    for name, val in components.items():
        if val is None:
            continue
        if not np.isfinite(val):
            raise TrainingAborted(step, name, val)
        if val > 1e6:
            raise TrainingAborted(step, name, val)


def _grad_norm(params):
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def _write_log(log_path, rows):
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else row[c] for c in LOG_COLUMNS])


def _optimizers(model, config):
    opts = [AdamW(model.fdm.params(), lr=config.lr_fdm, wd=config.wd_fdm)]
    if config.gt_action:
        opts.append(AdamW(model.gtcond.params(), lr=config.lr_idm, wd=config.wd_idm))
    else:
        opts.append(AdamW(model.idm.params(), lr=config.lr_idm, wd=config.wd_idm))
        if config.uses_grl:
            opts.append(AdamW(model.disc.params(), lr=config.lr_disc))
    return opts


def train_scar(dataset, config, model=None, log_path=None, init_tensors=None):
    """Train one variant; returns (model, log rows).

    `init_tensors` seeds matching components from a checkpoint (used to start
    from a pretrained forward model).
    """
    cfg_model = ModelConfig(d_v=dataset.spec.d_x,
                            n_embodiments=dataset.spec.n_embodiments)
    if model is None:
        model = build_model(cfg_model, stream(config.seed, "model-init"),
                            with_gtcond=config.gt_action)
    if init_tensors is not None:
        model.fdm.load(init_tensors)
    pool = _episode_pool(dataset, config)
    opts = _optimizers(model, config)
    batch_rng = stream(config.seed, f"train:{config.variant}:batches")
    loss_rng = stream(config.seed, f"train:{config.variant}:noise")
    rows = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = batch_rng.integers(0, len(pool), config.batch_episodes)
        batch = _stack_batch(pool, idx, model.cfg.d_a_max)
        for opt in opts:
            opt.zero_grad()
        total, components = total_loss(model, batch, config, loss_rng, step=step)
        _check_components(step, components)
        total.backward()
        components["grad_norm"] = _grad_norm(model.params())
        for opt in opts:
            opt.step()
        components["step"] = step
        components["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3)
        rows.append(components)
    if log_path is not None:
        _write_log(log_path, rows)
    return model, rows


def pretrain_fdm(dataset, config, model=None, log_path=None):
    """Action-free pretraining: the forward model learns the flow with the
    conditioning path zeroed, so only unconditional dynamics are absorbed."""
    cfg_model = ModelConfig(d_v=dataset.spec.d_x,
                            n_embodiments=dataset.spec.n_embodiments)
    if model is None:
        model = build_model(cfg_model, stream(config.seed, "model-init"))
    pool = list(dataset.episodes)
    opt = AdamW(model.fdm.params(), lr=config.lr_idm, wd=config.wd_fdm)
    batch_rng = stream(config.seed, "pretrain:batches")
    loss_rng = stream(config.seed, "pretrain:noise")
    cfg = model.cfg
    rows = []
    for step in range(config.pretrain_steps):
        t0 = time.perf_counter()
        idx = batch_rng.integers(0, len(pool), config.batch_episodes)
        v, _, _ = _stack_batch(pool, idx, cfg.d_a_max)
        B, T, _ = v.shape
        tau = np.stack([diffusion_forcing_schedule(T, cfg.f_hist, cfg.p_clean, loss_rng)
                        for _ in range(B)])
        epsilon = loss_rng.standard_normal(v.shape).astype(F32)
        fb = make_flow_target(v, epsilon, tau)
        c_zero = Tensor(np.zeros((B, T, cfg.d_c), F32))
        opt.zero_grad()
        pred = fdm_flow_predict(fb.v_tilde, fb.tau_seq, c_zero, model.fdm,
                                v_ctx=v[:, cfg.f_hist - 1, :])
        loss = ((pred - Tensor(fb.u_tau)) ** 2).mean()
        components = {"L_total": float(loss.data), "L_rec": float(loss.data),
                      "L_KL": None, "L_GRL": None}
        _check_components(step, components)
        loss.backward()
        components["grad_norm"] = _grad_norm(model.fdm.params())
        opt.step()
        components["step"] = step
        components["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3)
        rows.append(components)
    if log_path is not None:
        _write_log(log_path, rows)
    return model, rows


def posterior_mean_targets(model, episode):
    """Stop-gradient latent targets from the frozen inverse model."""
    post = idm_infer(Tensor(episode.x.astype(F32)), model.idm)
    return post.mu.data.copy()


def train_a2l(model, dataset, config, pointwise=False, ft=False, log_path=None):
    """Fit the action-to-latent controller against stop-gradient posterior
    means. The FT variant additionally fine-tunes the forward model through
    a flow-matching term conditioned on the predicted latents; the inverse
    model is never updated (checksum-stable)."""
    if model.a2l is None:
        raise ValueError("model was built without an A2L head")
    cfg = model.cfg
    pool = [ep for ep in dataset.episodes if ep.e == dataset.target_e]
    if not pool:
        raise ValueError("no target-embodiment episodes for A2L training")
    targets = [posterior_mean_targets(model, ep) for ep in pool]
    params = model.a2l.params()
    opts = [AdamW(params, lr=config.lr_a2l)]
    if ft:
        opts.append(AdamW(model.fdm.params(), lr=config.lr_fdm, wd=config.wd_fdm))
    batch_rng = stream(config.seed, "a2l:batches")
    loss_rng = stream(config.seed, "a2l:noise")
    rows = []
    batch_n = min(config.batch_episodes, len(pool))
    for step in range(config.a2l_steps):
        t0 = time.perf_counter()
        idx = batch_rng.integers(0, len(pool), batch_n)
        for opt in opts:
            opt.zero_grad()
        loss = None
        for i in idx:
            ep = pool[i]
            z_hat = a2l_predict(ep.a, ep.x[: cfg.f_hist], model.a2l,
                                pointwise=pointwise)
            term = ((z_hat - Tensor(targets[i])) ** 2).mean()
            if ft:
                T = ep.x.shape[0]
                c_seq = cond_sequence(z_hat, model.idm)
                tau = diffusion_forcing_schedule(T, cfg.f_hist, cfg.p_clean, loss_rng)
                epsilon = loss_rng.standard_normal(ep.x.shape).astype(F32)
                fb = make_flow_target(ep.x.astype(F32), epsilon, tau)
                pred = fdm_flow_predict(fb.v_tilde, fb.tau_seq, c_seq, model.fdm,
                                        v_ctx=ep.x[cfg.f_hist - 1].astype(F32))
                term = term + ((pred - Tensor(fb.u_tau)) ** 2).mean()
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / batch_n)
        components = {"L_total": float(loss.data), "L_rec": float(loss.data),
                      "L_KL": None, "L_GRL": None}
        _check_components(step, components)
        loss.backward()
        components["grad_norm"] = _grad_norm(params)
        for opt in opts:
            opt.step()
        components["step"] = step
        components["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3)
        rows.append(components)
    if log_path is not None:
        _write_log(log_path, rows)
    return model, rows


def model_checksum(model):
    return checksum(model.numpy_params())
