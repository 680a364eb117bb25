"""Synthetic multi-embodiment data-generating processes.

Each embodiment realizes a shared low-dimensional command u through its own
injective linear map; dynamics mix the state and apply the action through a
(optionally state-dependent) gain; observations are a squashed linear render
of the state with a per-embodiment nuisance block. A tiny 16x16 frame
renderer makes image metrics computable.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .rng import stream

F32 = np.float32


@dataclass
class DGPSpec:
    """Full description of one synthetic data-generating process."""

    d_u: int = 2
    d_a: int = 5
    d_s: int = 4
    d_x: int = 12
    n_embodiments: int = 4
    T: int = 17
    nuisance_dim: int = 3
    gain_field: bool = True        # g(s) = 1 + 0.5 tanh(s_1)
    squash: bool = True            # tanh after the render projection
    action_squash: bool = False    # optional monotone squashing after Q_e u + b_e
    mixing: str = "mix"            # "mix" or "identity" state-mixing map
    goal_sign: float = 1.0         # transfer task mirrors this
    lighting_scale: float = 0.1    # per-episode offset on the nuisance block
    frame_size: int = 16
    param_seed: int = 0            # seed for drawing the fixed maps below

    def __post_init__(self):
        if self.d_a < self.d_u:
            raise ValueError("raw action dim must be >= unified action dim")
        if self.nuisance_dim > self.d_x:
            raise ValueError("nuisance block larger than observation")
        self._draw_params()

    def _draw_params(self):
        rng = stream(self.param_seed, "dgp-params")
        self.Q = []   # per-embodiment realization maps, d_a x d_u
        self.b = []   # per-embodiment offsets
        for e in range(self.n_embodiments):
            self.Q.append(_injective_matrix(rng, self.d_a, self.d_u))
            self.b.append(rng.uniform(-0.3, 0.3, self.d_a).astype(F32))
        self.W_dyn = rng.normal(0, 1.0, (self.d_s, self.d_a)).astype(F32)
        # scale so one step moves the state by O(0.3)
        self.W_dyn *= F32(0.3 / max(np.linalg.norm(self.W_dyn @ q, 2) for q in self.Q))
        self.A_mix = rng.normal(0, 0.5, (self.d_s, self.d_s)).astype(F32)
        self.goal = (self.goal_sign * rng.uniform(-0.15, 0.15, self.d_s)).astype(F32)
        d_state_obs = self.d_x - self.nuisance_dim
        self.P = _injective_matrix(rng, d_state_obs, self.d_s)
        # nuisance codes: well separated sign patterns in [-0.8, 0.8]
        codes = []
        for e in range(self.n_embodiments):
            bits = [(e >> k) & 1 for k in range(self.nuisance_dim)]
            codes.append(np.array([0.8 if b else -0.8 for b in bits], F32))
        self.nuisance_codes = codes

    def spec_hash(self):
        import hashlib

        payload = {k: v for k, v in asdict(self).items()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def embodiments(self):
        return list(range(self.n_embodiments))


def _injective_matrix(rng, rows, cols, min_sv=0.5, max_sv=1.2):
    """Random rows x cols matrix with singular values in [min_sv, max_sv]."""
    assert rows >= cols
    a = rng.normal(size=(rows, cols))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    svals = rng.uniform(min_sv, max_sv, cols)
    return (u * svals) @ vt


@dataclass
class Trajectory:
    """One episode with synthetic-only side channels (u, s)."""

    x: np.ndarray          # (T, d_x) observations
    a: np.ndarray          # (T-1, d_a) raw actions
    e: int                 # embodiment id
    u: np.ndarray          # (T-1, d_u) ground-truth unified actions
    s: np.ndarray          # (T, d_s) states
    lighting: float = 0.0
    clipped: bool = False  # any frame-render clamp occurred

    def __post_init__(self):
        T = self.x.shape[0]
        assert self.a.shape[0] == T - 1 and self.u.shape[0] == T - 1 and self.s.shape[0] == T


def sample_unified_action(rng, spec):
    """u ~ Uniform[-1, 1]^d_u, independent of embodiment."""
    return rng.uniform(-1.0, 1.0, spec.d_u).astype(F32)


def realize_action(u, e, spec):
    """a = Q_e u + b_e, optionally squashed; injective in u for fixed e."""
    if e not in spec.embodiments:
        raise ValueError(f"unknown embodiment {e}")
    a = spec.Q[e] @ np.asarray(u, F32) + spec.b[e]
    if spec.action_squash:
        a = np.tanh(a)
    return a.astype(F32)


def recover_unified_action(a, e, spec):
    """Invert realize_action via the pseudo-inverse of the full-rank Q_e."""
    a = np.asarray(a, F32)
    if spec.action_squash:
        a = np.arctanh(np.clip(a, -0.999999, 0.999999))
    return (np.linalg.pinv(spec.Q[e]) @ (a - spec.b[e])).astype(F32)


def _mix(s, spec):
    if spec.mixing == "identity":
        return s
    return 0.9 * s + 0.2 * np.tanh(spec.A_mix @ s) + spec.goal


def gain(s, spec):
    return 1.0 + 0.5 * np.tanh(s[0]) if spec.gain_field else 1.0


def step_dynamics(s, a, spec):
    """s' = m(s) + g(s) * (W_dyn a)."""
    s = np.asarray(s, F32)
    return (_mix(s, spec) + F32(gain(s, spec)) * (spec.W_dyn @ np.asarray(a, F32))).astype(F32)


def render(s, e, spec, lighting=0.0):
    """x = squash(P s) on the state block; nuisance block = n_e + lighting."""
    s = np.asarray(s, F32)
    proj = spec.P @ s
    state_obs = np.tanh(proj) if spec.squash else proj
    x = np.empty(spec.d_x, F32)
    x[: spec.d_x - spec.nuisance_dim] = state_obs
    x[spec.d_x - spec.nuisance_dim:] = spec.nuisance_codes[e] + F32(lighting)
    return x


def obs_state_block(x, spec):
    return np.asarray(x)[..., : x.shape[-1] - spec.nuisance_dim]


def obs_nuisance_block(x, spec):
    return np.asarray(x)[..., x.shape[-1] - spec.nuisance_dim:]


def decode_state(x, spec):
    """Recover the state from an observation's state block (pseudo-inverse)."""
    block = obs_state_block(x, spec)
    if spec.squash:
        block = np.arctanh(np.clip(block, -0.999999, 0.999999))
    return (block @ np.linalg.pinv(spec.P).T).astype(F32)


# ---- frames ----

_GLYPH_PIX = [(0, 0), (0, 1), (1, 0)]  # top-left corner pixels, one per nuisance dim


def frame_from_obs(x, spec):
    """Rasterize an observation: agent blob from the decoded state, glyph
    pixels from the nuisance block. Pure function of x. Returns (frame, clipped)."""
    n = spec.frame_size
    frame = np.zeros((n, n), F32)
    s = decode_state(x, spec)
    clipped = False
    pos = []
    for coord in s[:2]:
        p = (coord + 1.5) / 3.0 * (n - 2)
        if p < 0 or p > n - 2:
            clipped = True
            p = min(max(p, 0), n - 2)
        pos.append(int(round(p)))
    frame[pos[1]:pos[1] + 2, pos[0]:pos[0] + 2] = 1.0
    nuis = obs_nuisance_block(x, spec)
    for k, (i, j) in enumerate(_GLYPH_PIX[: spec.nuisance_dim]):
        frame[i, j] = np.clip(0.5 + 0.5 * nuis[k], 0.0, 1.0)
    return frame, clipped


def render_frame(s, e, spec):
    """H x W grayscale frame for a state and embodiment; deterministic."""
    frame, _ = frame_from_obs(render(s, e, spec), spec)
    return frame


def generate_episode(seed, e, T, spec, index=0):
    """Deterministic episode: same (seed, e, T, spec, index) -> same bits."""
    if T < 2:
        raise ValueError("T must be >= 2")
    rng = stream(seed, f"episode:{e}:{index}")
    lighting = float(rng.uniform(-spec.lighting_scale, spec.lighting_scale))
    s = np.empty((T, spec.d_s), F32)
    x = np.empty((T, spec.d_x), F32)
    u = np.empty((T - 1, spec.d_u), F32)
    a = np.empty((T - 1, spec.d_a), F32)
    s[0] = rng.normal(0, 0.5, spec.d_s)
    clipped = False
    for t in range(T - 1):
        u[t] = sample_unified_action(rng, spec)
        a[t] = realize_action(u[t], e, spec)
        s[t + 1] = step_dynamics(s[t], a[t], spec)
    for t in range(T):
        x[t] = render(s[t], e, spec, lighting)
        _, c = frame_from_obs(x[t], spec)
        clipped = clipped or c
    return Trajectory(x=x, a=a, e=e, u=u, s=s, lighting=lighting, clipped=clipped)


@dataclass
class Dataset:
    spec: DGPSpec
    episodes: list
    target_e: int

    def by_embodiment(self, e):
        return [ep for ep in self.episodes if ep.e == e]


def generate_dataset(seed, spec, target_e=0, m_target=10, source_count=300, T=None):
    """Low-data target + plentiful sources; episodes ordered by (e, index)."""
    T = T or spec.T
    episodes = []
    for e in spec.embodiments:
        count = m_target if e == target_e else source_count
        for i in range(count):
            episodes.append(generate_episode(seed, e, T, spec, index=i))
    return Dataset(spec=spec, episodes=episodes, target_e=target_e)


# ---- dataset file I/O ----

def save_dataset(path, dataset):
    """Header (spec hash, counts, dims) + per-episode tensor records."""
    spec = dataset.spec
    counts = [len(dataset.by_embodiment(e)) for e in spec.embodiments]
    header = {
        "spec_hash": spec.spec_hash(),
        "spec": asdict(spec),
        "counts": counts,
        "dims": [spec.d_u, spec.d_a, spec.d_s, spec.d_x],
        "target_e": dataset.target_e,
        "n_episodes": len(dataset.episodes),
    }
    with open(path, "wb") as fh:
        hb = json.dumps(header, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for i, ep in enumerate(dataset.episodes):
            meta = np.array([ep.e, ep.lighting, 1.0 if ep.clipped else 0.0], F32)
            for name, arr in (("x", ep.x), ("a", ep.a), ("u", ep.u), ("s", ep.s), ("meta", meta)):
                _write_tensor(fh, f"ep{i:05d}.{name}", arr)


def _write_tensor(fh, name, arr):
    arr = np.asarray(arr, F32)
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes())


def _read_tensor(fh):
    raw = fh.read(2)
    if not raw:
        return None, None
    (nlen,) = struct.unpack("<H", raw)
    name = fh.read(nlen).decode()
    (rank,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    n = int(np.prod(shape)) if shape else 1
    vals = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
    return name, vals.astype(F32)


def load_dataset(path):
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        spec = DGPSpec(**header["spec"])
        if spec.spec_hash() != header["spec_hash"]:
            raise ValueError("dataset header hash mismatch")
        records = {}
        while True:
            name, vals = _read_tensor(fh)
            if name is None:
                break
            records[name] = vals
    episodes = []
    for i in range(header["n_episodes"]):
        p = f"ep{i:05d}"
        meta = records[f"{p}.meta"]
        episodes.append(Trajectory(
            x=records[f"{p}.x"], a=records[f"{p}.a"], u=records[f"{p}.u"],
            s=records[f"{p}.s"], e=int(meta[0]), lighting=float(meta[1]),
            clipped=bool(meta[2] > 0.5)))
    return Dataset(spec=spec, episodes=episodes, target_e=header["target_e"])


def transfer_spec(spec):
    """Same process with the goal offset mirrored (task shift analogue)."""
    kw = asdict(spec)
    kw["goal_sign"] = -spec.goal_sign
    return DGPSpec(**kw)


# ---- von Mises-Fisher sampling ----

def vmf_sample(center, kappa, n, rng):
    """n i.i.d. unit vectors from vMF(center, kappa); Wood-style rejection
    for the radial component, uniform tangential component."""
    center = np.asarray(center, np.float64)
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if abs(np.linalg.norm(center) - 1.0) > 1e-6:
        raise ValueError("center must be unit norm")
    d = center.shape[0]
    if kappa == 0:
        v = rng.normal(size=(n, d))
        return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(F32)
    ws = _vmf_radial(kappa, d, n, rng)
    # tangential directions orthogonal to center
    v = rng.normal(size=(n, d))
    v -= np.outer(v @ center, center)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = ws[:, None] * center[None, :] + np.sqrt(1.0 - ws[:, None] ** 2) * v
    return out.astype(F32)


def _vmf_radial(kappa, d, n, rng):
    dim = d - 1
    b = dim / (np.sqrt(4.0 * kappa**2 + dim**2) + 2 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dim * np.log(1 - x0**2)
    out = np.empty(n)
    filled = 0
    while filled < n:
        todo = n - filled
        z = rng.beta(dim / 2.0, dim / 2.0, size=todo)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=todo)
        ok = kappa * w + dim * np.log(1.0 - x0 * w) - c >= np.log(u)
        k = int(ok.sum())
        out[filled:filled + k] = w[ok]
        filled += k
    return out
