"""Evaluation protocols: image metrics, transfer rollouts, embodiment
leakage, action probing, and latent-recovery scoring against the synthetic
ground truth."""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy
from .fitting import fit_logistic_probe, fit_mlp, r2_score
from .models import (
    action_cond_sequence,
    cond_sequence,
    idm_infer,
    pad_actions,
    rollout_generate,
)
from .nn import Mlp, MlpSpec, init_linear
from .optim import AdamW
from .rng import stream
from .worldgen import frame_from_obs, generate_episode, transfer_spec

F32 = np.float32

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricRow:
    ssim: float
    psnr: float
    mse: float
    ssim_l: float


@dataclass
class LeakageReport:
    source_prob: float
    target_prob: float

    @property
    def target_share(self):
        return self.target_prob / (self.target_prob + self.source_prob)

    @property
    def target_source(self):
        return self.target_prob - self.source_prob


def ssim_global(a, b):
    """SSIM with whole-frame statistics (frames are smaller than the usual
    11x11 window), constants for unit dynamic range."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    mu_a, mu_b = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (va + vb + SSIM_C2)
    return num / den


def image_metrics(pred_frames, true_frames):
    """MetricRow over a predicted-future frame stack."""
    pred = np.asarray(pred_frames, np.float64)
    true = np.asarray(true_frames, np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"frame shape mismatch: {pred.shape} vs {true.shape}")
    if pred.ndim != 3 or pred.shape[0] == 0:
        raise ValueError("expected a nonempty (n_frames, H, W) stack")
    mse = float(((pred - true) ** 2).mean())
    psnr = PSNR_CAP_DB if mse == 0 else min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)
    ssims = [ssim_global(p, t) for p, t in zip(pred, true)]
    return MetricRow(ssim=float(np.mean(ssims)), psnr=float(psnr),
                     mse=mse, ssim_l=float(ssims[-1]))


# ---- transfer evaluation ----

def _conditioning(model, episode):
    if model.gtcond is not None:
        a = pad_actions(episode.a, model.cfg.d_a_max)
        return action_cond_sequence(a, model.gtcond)
    post = idm_infer(episode.x.astype(F32), model.idm)
    return cond_sequence(Tensor(post.mu.data), model.idm)


def rollout_episode(model, episode, rng, c_seq=None):
    """Predict the episode's future tokens from its context block,
    conditioned on latents inferred from the full ground-truth episode."""
    if c_seq is None:
        c_seq = _conditioning(model, episode)
    f_hist = model.cfg.f_hist
    return rollout_generate(episode.x[:f_hist].astype(F32), c_seq, model.fdm, rng)


def frames_from_obs_seq(obs_seq, spec):
    return np.stack([frame_from_obs(x, spec)[0] for x in obs_seq])


def eval_episodes(spec, seed, n_episodes, embodiment):
    """Held-out episodes drawn from a stream disjoint from training data."""
    return [generate_episode(seed, embodiment, spec.T, spec, index=10_000 + i)
            for i in range(n_episodes)]


def evaluate_rollouts(model, episodes, spec, seed):
    """Per-episode image metrics of predicted vs true future frames, plus
    token-space MSE; deterministic given the seed."""
    rows = []
    token_mse = []
    f_hist = model.cfg.f_hist
    for i, ep in enumerate(episodes):
        rng = stream(seed, f"rollout:{i}")
        pred = rollout_episode(model, ep, rng)
        pred_frames = frames_from_obs_seq(pred[f_hist:], spec)
        true_frames = frames_from_obs_seq(ep.x[f_hist:], spec)
        rows.append(image_metrics(pred_frames, true_frames))
        token_mse.append(float(((pred[f_hist:] - ep.x[f_hist:]) ** 2).mean()))
    return rows, token_mse


def run_transfer_eval(models, spec, seed, n_episodes=50):
    """Target-task and transfer-task metric tables per method.

    The transfer task is the same process with the goal offset mirrored.
    Returns {method: {task: {"rows": [MetricRow], "mse": mean frame MSE,
    "token_mse": mean token MSE}}}.
    """
    tasks = {"target": spec, "transfer": transfer_spec(spec)}
    out = {}
    for name, model in models.items():
        out[name] = {}
        for task, task_spec in tasks.items():
            episodes = eval_episodes(task_spec, seed, n_episodes, 0)
            rows, token_mse = evaluate_rollouts(model, episodes, task_spec, seed)
            out[name][task] = {
                "rows": rows,
                "mse": float(np.mean([r.mse for r in rows])),
                "ssim": float(np.mean([r.ssim for r in rows])),
                "psnr": float(np.mean([r.psnr for r in rows])),
                "ssim_l": float(np.mean([r.ssim_l for r in rows])),
                "token_mse": float(np.mean(token_mse)),
            }
    return out


# ---- frame classifier and leakage ----

class FrameClassifier:
    """Minimal convolutional stack: one 3x3 conv (im2col + matmul), gelu,
    flatten, linear head. No pooling — the embodiment cue is a few corner
    pixels and spatial pooling would dilute it."""

    def __init__(self, n_classes, rng, channels=8, frame_size=16):
        self.channels = channels
        self.w_conv, self.b_conv = init_linear(rng, 9, channels)
        n_feat = (frame_size - 2) ** 2 * channels
        self.head = Mlp(MlpSpec([n_feat, n_classes], activation="gelu"), rng)

    @staticmethod
    def _patches(frames):
        frames = np.asarray(frames, F32)
        n, H, W = frames.shape
        cols = []
        for dy in range(3):
            for dx in range(3):
                cols.append(frames[:, dy:H - 2 + dy, dx:W - 2 + dx].reshape(n, -1))
        return np.stack(cols, axis=-1)    # (n, (H-2)(W-2), 9)

    def logits(self, frames):
        patches = Tensor(self._patches(frames))
        h = (patches @ self.w_conv + self.b_conv).gelu()
        return self.head(h.reshape(h.shape[0], -1))

    def probs(self, frames):
        logits = self.logits(frames).data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def params(self):
        out = {"conv.w": self.w_conv, "conv.b": self.b_conv}
        out.update(self.head.params())
        return out


def train_frame_classifier(dataset, seed=0, steps=3000, lr=1e-2, frames_per_episode=4):
    """Independent single-frame embodiment classifier; returns
    (classifier, validation accuracy)."""
    rng = stream(seed, "frame-clf")
    frames, labels = [], []
    for ep in dataset.episodes:
        picks = rng.choice(len(ep.x), size=min(frames_per_episode, len(ep.x)),
                           replace=False)
        for t in picks:
            frames.append(frame_from_obs(ep.x[t], dataset.spec)[0])
            labels.append(ep.e)
    frames = np.stack(frames).astype(F32)
    labels = np.array(labels)
    perm = rng.permutation(len(frames))
    frames, labels = frames[perm], labels[perm]
    n_val = max(len(frames) // 5, 1)
    tr_f, tr_l = frames[n_val:], labels[n_val:]
    va_f, va_l = frames[:n_val], labels[:n_val]

    clf = FrameClassifier(dataset.spec.n_embodiments, rng,
                          frame_size=dataset.spec.frame_size)
    opt = AdamW(clf.params(), lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(tr_f), min(128, len(tr_f)))
        opt.zero_grad()
        ce = softmax_cross_entropy(clf.logits(tr_f[idx]), tr_l[idx])
        ce.backward()
        opt.step()
    val_acc = float((clf.probs(va_f).argmax(1) == va_l).mean())
    return clf, val_acc


def leakage_rollouts(model, dataset, seed, pairs_per_source=10):
    """Cross-conditioned rollouts: latents inferred from a source-embodiment
    episode drive generation from a target-embodiment context."""
    spec = dataset.spec
    target_e = dataset.target_e
    sources = [e for e in spec.embodiments if e != target_e]
    rollouts = []
    for e_s in sources:
        for i in range(pairs_per_source):
            src = generate_episode(seed, e_s, spec.T, spec, index=20_000 + i)
            tgt = generate_episode(seed, target_e, spec.T, spec, index=30_000 + i)
            post = idm_infer(src.x.astype(F32), model.idm)
            c_seq = cond_sequence(Tensor(post.mu.data), model.idm)
            rng = stream(seed, f"leak:{e_s}:{i}")
            pred = rollout_generate(tgt.x[: model.cfg.f_hist].astype(F32),
                                    c_seq, model.fdm, rng)
            frames = frames_from_obs_seq(pred[model.cfg.f_hist:], spec)
            rollouts.append((frames, e_s, target_e))
    return rollouts


def leakage_eval(rollouts, classifier, val_acc):
    """Leakage metrics over predicted future frames only, averaged over
    source embodiments."""
    if val_acc < 0.9:
        raise ValueError(
            f"frame classifier validation accuracy {val_acc:.3f} < 0.9; "
            "leakage diagnostic unreliable")
    by_source = {}
    for frames, e_s, e_t in rollouts:
        p = classifier.probs(frames)
        by_source.setdefault(e_s, []).append(
            (float(p[:, e_s].mean()), float(p[:, e_t].mean())))
    source_probs, target_probs = [], []
    for e_s, vals in sorted(by_source.items()):
        source_probs.append(np.mean([v[0] for v in vals]))
        target_probs.append(np.mean([v[1] for v in vals]))
    return LeakageReport(source_prob=float(np.mean(source_probs)),
                         target_prob=float(np.mean(target_probs)))


# ---- action probe ----

def action_probe(model, dataset, seed=0, steps=800, n_eval=20):
    """Small regressor from posterior-mean latents to raw actions on the
    target embodiment; train on the dataset's target episodes, evaluate on
    held-out episodes. The probed model is never mutated."""
    spec = dataset.spec
    target_e = dataset.target_e

    def collect(episodes):
        zs, acts = [], []
        for ep in episodes:
            post = idm_infer(ep.x.astype(F32), model.idm)
            zs.append(post.mu.data)
            acts.append(ep.a)
        return np.vstack(zs).astype(F32), np.vstack(acts).astype(F32)

    train_eps = [ep for ep in dataset.episodes if ep.e == target_e]
    eval_eps = eval_episodes(spec, seed, n_eval, target_e)
    z_tr, a_tr = collect(train_eps)
    z_ev, a_ev = collect(eval_eps)
    predict = fit_mlp(z_tr, a_tr, steps=steps, seed=seed)
    report = {}
    for split, (z, a) in (("train", (z_tr, a_tr)), ("eval", (z_ev, a_ev))):
        err = predict(z) - a
        report[f"{split}_mse"] = float((err ** 2).mean())
        report[f"{split}_l1"] = float(np.abs(err).mean())
    return report


# ---- latent recovery ----

def latent_recovery_score(z, u, e_labels, seed=0, mlp_steps=600):
    """Bijection evidence (per-embodiment u <-> z regression R^2, held out)
    and an invariance probe with the mutual-information lower bound
    I(e;z) >= H(e) - CE_probe."""
    z = np.asarray(z, F32)
    u = np.asarray(u, F32)
    e_labels = np.asarray(e_labels)
    embodiments = sorted(set(int(v) for v in e_labels))
    r2_fwd, r2_inv = {}, {}
    for e in embodiments:
        mask = e_labels == e
        ue, ze = u[mask], z[mask]
        n = len(ue)
        tr, te = slice(0, n // 2), slice(n // 2, n)
        fwd = fit_mlp(ue[tr], ze[tr], steps=mlp_steps, seed=seed + e)
        inv = fit_mlp(ze[tr], ue[tr], steps=mlp_steps, seed=seed + 50 + e)
        # variance-weighted: a posterior dim shrunk onto the prior carries no
        # signal and should not dominate the bijection score
        r2_fwd[e] = r2_score(ze[te], fwd(ue[te]), weighting="variance")
        r2_inv[e] = r2_score(ue[te], inv(ze[te]), weighting="variance")
    probe, ce = fit_logistic_probe(z, e_labels, len(embodiments), seed=seed)
    acc = float((probe(z).argmax(1) == e_labels).mean())
    h_e = math.log(len(embodiments))
    return {
        "r2_forward": r2_fwd,
        "r2_inverse": r2_inv,
        "min_r2_forward": min(r2_fwd.values()),
        "min_r2_inverse": min(r2_inv.values()),
        "probe_ce": ce,
        "probe_accuracy": acc,
        "mi_lower_bound": max(h_e - ce, 0.0),
    }


def latents_with_ground_truth(model, dataset, max_per_embodiment=40):
    """Posterior-mean latents with matched ground-truth u and embodiment
    labels, for recovery scoring."""
    zs, us, es = [], [], []
    counts = {}
    for ep in dataset.episodes:
        if counts.get(ep.e, 0) >= max_per_embodiment:
            continue
        counts[ep.e] = counts.get(ep.e, 0) + 1
        post = idm_infer(ep.x.astype(F32), model.idm)
        zs.append(post.mu.data)
        us.append(ep.u)
        es.append(np.full(len(ep.u), ep.e))
    return (np.vstack(zs).astype(F32), np.vstack(us).astype(F32),
            np.concatenate(es))
