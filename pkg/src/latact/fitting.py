"""Small regression/probe utilities shared by evaluation and theory checks."""

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy
from .nn import Mlp, MlpSpec
from .optim import AdamW
from .rng import stream

F32 = np.float32


def r2_score(y_true, y_pred, weighting="uniform"):
    """Coefficient of determination averaged over output dims.

    `weighting="variance"` weights each dim by its target variance, so
    near-constant dims (for example posterior dims shrunk onto the prior)
    do not dominate the average.
    """
    y_true = np.asarray(y_true, np.float64)
    y_pred = np.asarray(y_pred, np.float64)
    sse = ((y_true - y_pred) ** 2).sum(axis=0)
    sst = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    per_dim = 1.0 - sse / np.maximum(sst, 1e-12)
    if weighting == "variance":
        w = np.maximum(sst, 1e-12)
        return float((per_dim * w).sum() / w.sum())
    if weighting != "uniform":
        raise ValueError(f"unknown weighting {weighting!r}")
    return float(np.mean(per_dim))


def fit_linear(x, y):
    """Least-squares affine fit; returns predict(x)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    xb = np.hstack([x, np.ones((len(x), 1))])
    coef, *_ = np.linalg.lstsq(xb, y, rcond=None)

    def predict(q):
        q = np.asarray(q, np.float64)
        return np.hstack([q, np.ones((len(q), 1))]) @ coef

    return predict


def fit_mlp(x, y, hidden=(32, 32), steps=800, lr=1e-2, seed=0, batch=256):
    """Train a small MLP regressor with AdamW; returns predict(x)."""
    x = np.asarray(x, F32)
    y = np.asarray(y, F32)
    rng = stream(seed, "fit-mlp")
    mlp = Mlp(MlpSpec([x.shape[1], *hidden, y.shape[1]]), rng)
    opt = AdamW(mlp.params(), lr=lr)
    n = len(x)
    for _ in range(steps):
        idx = rng.integers(0, n, min(batch, n))
        opt.zero_grad()
        pred = mlp(Tensor(x[idx]))
        loss = ((pred - Tensor(y[idx])) ** 2).mean()
        loss.backward()
        opt.step()

    def predict(q):
        return mlp(Tensor(np.asarray(q, F32))).data

    return predict


def fit_logistic_probe(z, labels, n_classes, steps=600, lr=5e-2, seed=0):
    """Multinomial logistic probe; returns (predict_logits, final mean CE)."""
    z = np.asarray(z, F32)
    labels = np.asarray(labels)
    rng = stream(seed, "fit-probe")
    w = Tensor(rng.normal(0, 0.01, (z.shape[1], n_classes)).astype(F32), requires_grad=True)
    b = Tensor(np.zeros(n_classes, F32), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, lr=lr)
    n = len(z)
    for _ in range(steps):
        idx = rng.integers(0, n, min(512, n))
        opt.zero_grad()
        ce = softmax_cross_entropy(Tensor(z[idx]) @ w + b, labels[idx])
        ce.backward()
        opt.step()

    def predict_logits(q):
        return np.asarray(q, F32) @ w.data + b.data

    final_ce = float(softmax_cross_entropy(Tensor(z) @ w + b, labels).data)
    return predict_logits, final_ce


def energy_distance(x, y):
    """Energy distance between two samples (parameter-free two-sample stat)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)

    def mean_dist(a, b):
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        return d.mean()

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def energy_permutation_test(x, y, n_perm=200, seed=0):
    """p-value for H0: same distribution, via label permutation."""
    rng = stream(seed, "energy-perm")
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    obs = energy_distance(x, y)
    pooled = np.vstack([x, y])
    n = len(x)
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(len(pooled))
        stat = energy_distance(pooled[perm[:n]], pooled[perm[n:]])
        if stat >= obs:
            hits += 1
    return (hits + 1) / (n_perm + 1), obs
