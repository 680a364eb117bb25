"""Numerical identifiability checks.

The chain being verified: an adversarial (gradient-reversed) linear encoder
on von Mises-Fisher action clusters is driven into the orthogonal
complement of the cluster-difference subspace; the inverse-dynamics stage
recovers raw actions up to a bijection; the per-embodiment maps from the
unified command to the latent share one pushforward law.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, grl, softmax_cross_entropy
from .fitting import (
    energy_distance,
    energy_permutation_test,
    fit_linear,
    fit_mlp,
    r2_score,
)
from .optim import AdamW
from .rng import stream
from .worldgen import DGPSpec, generate_episode, vmf_sample

F32 = np.float32

SERIES_ASYMPTOTIC_SWITCH = 30.0


def bessel_log_I(nu, r):
    """log of the modified Bessel function of the first kind I_nu(r).

    Ascending series below the switch point, asymptotic expansion above;
    log-space output avoids overflow for large arguments.
    """
    if nu < 0 or r < 0:
        raise ValueError("requires nu >= 0 and r >= 0")
    if r == 0.0:
        return 0.0 if nu == 0 else -np.inf
    if r < SERIES_ASYMPTOTIC_SWITCH:
        return math.log(_bessel_series(nu, r))
    return _bessel_asymptotic_log(nu, r)


def bessel_I(nu, r):
    return math.exp(bessel_log_I(nu, r))


def _bessel_series(nu, r):
    # I_nu(r) = sum_k (r/2)^(2k+nu) / (k! Gamma(k+nu+1))
    half = r / 2.0
    term = half**nu / math.gamma(nu + 1.0)
    total = term
    for k in range(1, 200):
        term *= half * half / (k * (k + nu))
        total += term
        if term < total * 1e-18:
            break
    return total


def _bessel_asymptotic_log(nu, r):
    # I_nu(r) ~ e^r / sqrt(2 pi r) * sum_k (-1)^k a_k(nu) / r^k,
    # a_k = prod_{j=1..k} (4 nu^2 - (2j-1)^2) / (k! 8^k); truncated at the
    # smallest term (the series is asymptotic, not convergent).
    mu = 4.0 * nu * nu
    term = 1.0
    total = 1.0
    prev = abs(term)
    for k in range(1, 60):
        term *= -(mu - (2 * k - 1) ** 2) / (8.0 * k * r)
        if abs(term) > prev:
            break
        total += term
        prev = abs(term)
    return r - 0.5 * math.log(2.0 * math.pi * r) + math.log(total)


def bessel_ratio(d, kappa):
    """I_{d/2}(kappa) / I_{d/2-1}(kappa): mean resultant length of vMF."""
    if kappa == 0:
        return 0.0
    return math.exp(bessel_log_I(d / 2.0, kappa) - bessel_log_I(d / 2.0 - 1.0, kappa))


def log_sphere_psi(d, r):
    """log Psi(r) with Psi(r) = (2 pi)^{d/2} r^{1-d/2} I_{d/2-1}(r):
    the spherical integral of exp(<w, x>) at ||w|| = r."""
    if r <= 0:
        raise ValueError("r must be > 0")
    return (d / 2.0) * math.log(2 * math.pi) + (1.0 - d / 2.0) * math.log(r) \
        + bessel_log_I(d / 2.0 - 1.0, r)


def mgf_closed_form(u_tilde, M, v_e, kappa, d_a):
    """Normalized MGF E[exp <u_tilde, M a>] for a ~ vMF(v_e, kappa):
    Psi(sqrt(||M^T u||^2 + 2 kappa <u, M v_e> + kappa^2)) / Psi(kappa)."""
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    u_tilde = np.asarray(u_tilde, np.float64)
    if not np.any(u_tilde):
        return 1.0
    M = np.asarray(M, np.float64)
    v_e = np.asarray(v_e, np.float64)
    r2 = float(M.T @ u_tilde @ (M.T @ u_tilde)) + 2.0 * kappa * float(u_tilde @ (M @ v_e)) + kappa**2
    r = math.sqrt(max(r2, 1e-300))
    return math.exp(log_sphere_psi(d_a, r) - log_sphere_psi(d_a, kappa))


def principal_angles(basis_a, basis_b):
    """Canonical angles between two subspaces, ascending, in radians."""
    qa = _orthonormalize(basis_a)
    qb = _orthonormalize(basis_b)
    svals = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(svals, -1.0, 1.0))


def _orthonormalize(basis):
    basis = np.asarray(basis, np.float64)
    if basis.ndim != 2:
        raise ValueError("basis must be a matrix of column vectors")
    q, r = np.linalg.qr(basis)
    if np.abs(np.diag(r)).min() < 1e-10:
        raise ValueError("rank-deficient basis")
    return q


# ---- vMF saddle experiment ----

@dataclass
class VmfExperiment:
    """Cluster geometry and trainable weights for the saddle check."""

    d_a: int
    d_z: int
    n_embodiments: int
    kappa: float
    centers: np.ndarray        # (|E|, d_a) unit rows
    V: np.ndarray              # (d_a, d_a - d_z) basis of the difference span
    V_perp: np.ndarray         # (d_a, d_z) basis of its complement
    M: np.ndarray              # (d_z, d_a) linear encoder
    W: np.ndarray              # (d_z, |E|) classifier weights
    b: np.ndarray              # (|E|,) classifier bias


def make_vmf_experiment(d_a=6, d_z=3, n_embodiments=4, kappa=8.0, seed=0,
                        center_angle=1.05, init_in_v_perp=False):
    """Place unit cluster centers so their pairwise differences span a
    (d_a - d_z)-dimensional subspace exactly."""
    d_v = d_a - d_z
    if n_embodiments - 1 < d_v:
        raise ValueError("need |E| - 1 >= d_a - d_z for the difference span")
    rng = stream(seed, "vmf-experiment")
    frame = np.linalg.qr(rng.normal(size=(d_a, d_a)))[0]
    v_basis = frame[:, :d_v]            # spans V
    w_axis = frame[:, d_v]              # common component, orthogonal to V
    # simplex directions inside V: |E| unit points whose differences span V
    simplex = _simplex_points(n_embodiments, d_v)
    centers = np.cos(center_angle) * w_axis[None, :] \
        + np.sin(center_angle) * (simplex @ v_basis.T)
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    M0 = rng.normal(0, 0.3, (d_z, d_a))
    if init_in_v_perp:
        M0 = frame[:, d_v:].T.copy()    # orthonormal rows spanning V_perp
    return VmfExperiment(
        d_a=d_a, d_z=d_z, n_embodiments=n_embodiments, kappa=kappa,
        centers=centers, V=v_basis, V_perp=frame[:, d_v:],
        M=M0.astype(F32),
        W=rng.normal(0, 0.1, (d_z, n_embodiments)).astype(F32),
        b=np.zeros(n_embodiments, F32),
    )


def _simplex_points(n, d):
    """n unit points in R^d whose pairwise differences span R^d (needs n-1 >= d)."""
    pts = np.eye(n)[:, : n - 1]
    pts = pts - pts.mean(axis=0)
    u, s, _ = np.linalg.svd(pts, full_matrices=False)
    pts = u[:, :d] * s[:d]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts


def vmf_experiment_data(exp, n_per_class, seed, purpose="saddle-data"):
    rng = stream(seed, purpose)
    xs, es = [], []
    for e in range(exp.n_embodiments):
        xs.append(vmf_sample(exp.centers[e], exp.kappa, n_per_class, rng))
        es.append(np.full(n_per_class, e))
    x = np.vstack(xs).astype(F32)
    e = np.concatenate(es)
    perm = rng.permutation(len(x))
    return x[perm], e[perm]


def saddle_train(exp, steps=8000, lr_enc=2e-3, lr_cls=2e-2, batch=256,
                 rank_penalty=1e-3, seed=0, n_test=4000):
    """Adversarial training of the linear encoder against the embodiment
    classifier; the gradient-reversal node realizes the minimax in one
    optimizer step.

    Batches are drawn fresh from the vMF mixture every step, so the game is
    played against the population objective rather than a finite training
    set (a fixed sample leaves an O(n^{-1/2}) bias in the recovered
    subspace). The learning rates decay linearly to damp SGD noise near the
    saddle. Returns a report dict.
    """
    x_test, e_test = vmf_experiment_data(exp, n_test // exp.n_embodiments, seed, "saddle-test")

    Mt = Tensor(exp.M.T.copy(), requires_grad=True)   # (d_a, d_z)
    W = Tensor(exp.W.copy(), requires_grad=True)
    b = Tensor(exp.b.copy(), requires_grad=True)
    opt_enc = AdamW({"Mt": Mt}, lr=lr_enc)
    opt_cls = AdamW({"W": W, "b": b}, lr=lr_cls)
    rng = stream(seed, "saddle-batches")
    per_class = batch // exp.n_embodiments

    for step in range(steps):
        decay = 1.0 - 0.9 * step / steps
        opt_enc.lr = lr_enc * decay
        opt_cls.lr = lr_cls * decay
        xb = np.vstack([vmf_sample(exp.centers[e], exp.kappa, per_class, rng)
                        for e in range(exp.n_embodiments)]).astype(F32)
        eb = np.repeat(np.arange(exp.n_embodiments), per_class)
        opt_enc.zero_grad()
        opt_cls.zero_grad()
        z = Tensor(xb) @ Mt
        logits = grl(z, 1.0) @ W + b
        ce = softmax_cross_entropy(logits, eb)
        ce.backward()
        # spectral floor: minimize -mu log det(M M^T + eps I)
        M = Mt.data.T.astype(np.float64)
        G = M @ M.T + 1e-6 * np.eye(exp.d_z)
        Mt.grad = Mt.grad + (-rank_penalty * 2.0 * (np.linalg.inv(G) @ M)).T.astype(F32)
        opt_enc.step()
        opt_cls.step()

    M = Mt.data.T.astype(np.float64)
    exp.M = Mt.data.T.copy()
    exp.W = W.data.copy()
    exp.b = b.data.copy()

    svals = np.linalg.svd(M, compute_uv=False)
    if svals.min() < 1e-6:
        return {"ok": False, "reason": "rank collapse", "singular_values": svals.tolist()}

    logits_test = x_test @ M.T @ W.data.astype(np.float64) + b.data
    ce_test = float(softmax_cross_entropy(Tensor(logits_test.astype(F32)), e_test).data)
    diffs = [exp.centers[i] - exp.centers[j]
             for i in range(exp.n_embodiments) for j in range(i + 1, exp.n_embodiments)]
    inv_stat = max(np.linalg.norm(M @ d) for d in diffs) / svals.max()
    angles = principal_angles(M.T, exp.V_perp)
    return {
        "ok": True,
        "held_out_ce": ce_test,
        "ln_num_embodiments": math.log(exp.n_embodiments),
        "invariance_stat": float(inv_stat),
        "max_principal_angle": float(angles.max()),
        "singular_values": svals.tolist(),
    }


# ---- inverse-dynamics lemma check ----

def make_linear_dgp(seed=0):
    """Fully linear process: no squash, no gain field, identity mixing.

    Three embodiments, so the pooled raw actions affinely span the whole
    action space; with a single 2-dof embodiment the actions sit on a plane
    and one recovered-action coordinate would be unconstrained by the
    reconstruction loss.
    """
    return DGPSpec(d_u=2, d_a=3, d_s=3, d_x=6, nuisance_dim=0, n_embodiments=3,
                   gain_field=False, squash=False, mixing="identity",
                   lighting_scale=0.0, param_seed=seed)


def _collect_transitions(spec, n_episodes, T, seed):
    xs, xn, aa, ss = [], [], [], []
    for i in range(n_episodes):
        ep = generate_episode(seed, i % spec.n_embodiments, T, spec, index=i)
        xs.append(ep.x[:-1])
        xn.append(ep.x[1:])
        aa.append(ep.a)
        ss.append(ep.s[:-1])
    return (np.vstack(xs).astype(F32), np.vstack(xn).astype(F32),
            np.vstack(aa).astype(F32), np.vstack(ss).astype(F32))


def train_linear_idm_fdm(spec, steps=3000, lr=1e-2, seed=0, n_episodes=200,
                         checkpoint_every=None):
    """Jointly train a linear IDM (observation pair -> recovered action) and
    a linear FDM on the state-reconstruction objective.

    The FDM is parameterized in residual form, next = state + D a_tilde,
    which is exactly expressive for the identity-mixing linear process. A
    free state matrix in the FDM would admit zero-loss optima where the
    recovered action smuggles state information (the state path compensates),
    so the residual form is what makes the state-independence conclusion
    testable rather than assumed.

    Returns (idm_predict, final_loss, history) with (loss, B) snapshots.
    """
    x_t, x_n, a, s_t = _collect_transitions(spec, n_episodes, spec.T, seed)
    s_n = s_t + a @ spec.W_dyn.T.astype(F32)
    rng = stream(seed, "lemma-train")
    d_in = 2 * spec.d_x
    B = Tensor(rng.normal(0, 0.1, (d_in, spec.d_a)).astype(F32), requires_grad=True)
    b_i = Tensor(np.zeros(spec.d_a, F32), requires_grad=True)
    D = Tensor(rng.normal(0, 0.1, (spec.d_a, spec.d_s)).astype(F32), requires_grad=True)
    opt = AdamW({"B": B, "b_i": b_i, "D": D}, lr=lr, wd=1e-4)
    pairs = np.hstack([x_t, x_n])
    history = []

    def full_loss():
        a_tilde = Tensor(pairs) @ B + b_i
        return float((((Tensor(s_t) + a_tilde @ D) - Tensor(s_n)) ** 2).mean().data)

    for step in range(steps):
        idx = rng.integers(0, len(pairs), 256)
        opt.zero_grad()
        a_tilde = Tensor(pairs[idx]) @ B + b_i
        pred = Tensor(s_t[idx]) + a_tilde @ D
        loss = ((pred - Tensor(s_n[idx])) ** 2).mean()
        loss.backward()
        opt.step()
        if checkpoint_every and step % checkpoint_every == 0:
            history.append((full_loss(), B.data.copy(), b_i.data.copy()))
    final_loss = full_loss()
    history.append((final_loss, B.data.copy(), b_i.data.copy()))

    def idm_predict(x_pair):
        return np.asarray(x_pair, F32) @ B.data + b_i.data

    return idm_predict, final_loss, history


def state_dependence_gap(a_tilde, a, s):
    """Extra R^2 gained by adding the state when regressing the recovered
    action from the raw action; zero iff the recovery ignores the state."""
    n = len(a)
    tr, te = slice(0, n // 2), slice(n // 2, n)
    fit_a = fit_linear(a[tr], a_tilde[tr])
    fit_as = fit_linear(np.hstack([a, s])[tr], a_tilde[tr])
    r2_a = r2_score(a_tilde[te], fit_a(a[te]))
    r2_as = r2_score(a_tilde[te], fit_as(np.hstack([a, s])[te]))
    return r2_as - r2_a, r2_a, r2_as


def idm_lemma_check(spec=None, seed=0, steps=3000):
    """Numerical check that the jointly trained inverse model recovers the
    raw action up to an invertible reparameterization, independent of state."""
    spec = spec or make_linear_dgp()
    idm, final_loss, _ = train_linear_idm_fdm(spec, steps=steps, seed=seed)
    x_t, x_n, a, s_t = _collect_transitions(spec, 100, spec.T, seed + 1)
    a_tilde = idm(np.hstack([x_t, x_n]))
    n = len(a)
    tr, te = slice(0, n // 2), slice(n // 2, n)
    fwd = fit_linear(a[tr], a_tilde[tr])
    inv = fit_linear(a_tilde[tr], a[tr])
    r2_fwd = r2_score(a_tilde[te], fwd(a[te]))
    r2_inv = r2_score(a[te], inv(a_tilde[te]))
    gap, _, _ = state_dependence_gap(a_tilde, a, s_t)
    # negative control: with the pairing broken, no linear map should explain
    # the recovered action from the raw one
    perm = stream(seed + 2, "lemma-shuffle").permutation(n)
    shuf = fit_linear(a[perm][tr], a_tilde[tr])
    r2_shuffled = r2_score(a_tilde[te], shuf(a[perm][te]))
    report = {
        "final_loss": final_loss,
        "premise_met": final_loss < 1e-3,
        "r2_forward": r2_fwd,
        "r2_inverse": r2_inv,
        "r2_shuffled": r2_shuffled,
        "state_dependence_gap": abs(gap),
    }
    if not report["premise_met"]:
        report["warning"] = "joint training did not reach the near-optimum premise"
    return report


# ---- pushforward / transfer check ----

def pushforward_and_transfer_check(z, u, e_labels, seed=0, mlp_steps=800):
    """Fit per-embodiment maps u -> z and z -> u, compare z | e laws
    pairwise by energy distance, and score the cross-embodiment alignment
    map (compose one embodiment's inverse with another's forward)."""
    z = np.asarray(z, F32)
    u = np.asarray(u, F32)
    e_labels = np.asarray(e_labels)
    embodiments = sorted(set(int(v) for v in e_labels))
    fits, invs, fit_err, roundtrip_err, holdout = {}, {}, {}, {}, {}
    for e in embodiments:
        mask = e_labels == e
        ue, ze = u[mask], z[mask]
        n = len(ue)
        tr, te = slice(0, n // 2), slice(n // 2, n)
        fits[e] = fit_mlp(ue[tr], ze[tr], steps=mlp_steps, seed=seed + e)
        invs[e] = fit_mlp(ze[tr], ue[tr], steps=mlp_steps, seed=seed + 100 + e)
        fit_err[e] = float(((fits[e](ue[te]) - ze[te]) ** 2).mean())
        roundtrip_err[e] = float(((invs[e](fits[e](ue[te])) - ue[te]) ** 2).mean())
        holdout[e] = (ue[te], ze[te])
    pair_stats, pair_pvalues = {}, {}
    align_err = {}
    for i, e1 in enumerate(embodiments):
        for e2 in embodiments[i + 1:]:
            z1, z2 = holdout[e1][1], holdout[e2][1]
            m = min(len(z1), len(z2), 300)
            p, stat = energy_permutation_test(z1[:m], z2[:m], seed=seed)
            pair_stats[(e1, e2)] = stat
            pair_pvalues[(e1, e2)] = p
            u1, zz1 = holdout[e1]
            transported = fits[e2](invs[e1](zz1))
            reference = fits[e2](u1)
            align_err[(e1, e2)] = float(((transported - reference) ** 2).mean()
                                        / max(np.var(z2), 1e-9))
    return {
        "fit_err": fit_err,
        "roundtrip_err": roundtrip_err,
        "energy_stats": pair_stats,
        "energy_pvalues": pair_pvalues,
        "alignment_err": align_err,
        "max_energy_stat": max(pair_stats.values()),
        "min_energy_pvalue": min(pair_pvalues.values()),
    }
