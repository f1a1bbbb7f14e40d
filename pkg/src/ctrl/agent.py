"""Double deep-Q tuning of the four bilateral filter strengths.

Two tiny convolutional Q-networks (2D for the sinogram domain, 3D for the
volume domain) pick discrete multiplicative adjustments of their domain's
(sigma_s, sigma_i) pair. Training runs the reconstruction environment end to
end: each sinogram-agent step refilters the raw sinogram and reconstructs,
each volume-agent step refilters the cached reconstruction, and the step
reward is the change of the composite quality target, so episode returns
telescope to final-minus-initial quality.

Everything is plain numpy with explicit forward/backward passes (hidden
activations are tanh, which keeps finite-difference gradient checks exact to
truncation order), a uniform replay buffer, a periodically synced target
network, and SGD with momentum. All randomness flows from one seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import metrics
from .core import Sinogram, Volume
from .filters import FilterParams, bilateral_3d, bilateral_sinogram_views
from .rebin import default_parallel_grid, rebin_to_parallel, resolve_ffs
from .recon import (ReconConfig, preweight, ramp_filter,
                    reconstruct_parallel)

N_ACTIONS = 5
SIGMA_STEP = 1.25
# action index -> (which sigma, multiplier): 0/1 scale sigma_s, 2/3 scale
# sigma_i, 4 keeps
ACTION_EFFECTS = ((0, SIGMA_STEP), (0, 1.0 / SIGMA_STEP),
                  (1, SIGMA_STEP), (1, 1.0 / SIGMA_STEP), (None, 1.0))


# ---------------------------------------------------------------------------
# tiny conv nets with hand-written backprop


def _conv_forward(x, w, b, stride):
    """N-d convolution, 'valid' padding. x: (B, Cin, *sp), w: (Cout, Cin, *k)."""
    nd = w.ndim - 2
    win = sliding_window_view(x, w.shape[2:], axis=tuple(range(2, 2 + nd)))
    slicer = (slice(None), slice(None)) + (slice(None, None, stride),) * nd
    win = win[slicer]
    if nd == 2:
        out = np.einsum("bcijuv,ocuv->boij", win, w)
    else:
        out = np.einsum("bcijkuvw,ocuvw->boijk", win, w)
    out += b.reshape((1, -1) + (1,) * nd)
    return out, win


def _conv_backward(dy, win, w, x_shape, stride):
    nd = w.ndim - 2
    if nd == 2:
        dw = np.einsum("boij,bcijuv->ocuv", dy, win)
    else:
        dw = np.einsum("boijk,bcijkuvw->ocuvw", dy, win)
    db = dy.sum(axis=(0,) + tuple(range(2, 2 + nd)))
    dx = np.zeros(x_shape)
    out_sp = dy.shape[2:]
    for offs in np.ndindex(*w.shape[2:]):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride)
                   for o, n in zip(offs, out_sp))
        wk = w[(slice(None), slice(None)) + offs]          # (Cout, Cin)
        dx[(slice(None), slice(None)) + sl] += np.einsum(
            "bo...,oc->bc...", dy, wk)
    return dx, dw, db


@dataclass
class ConvNet:
    """conv(8) -> tanh -> conv(16) -> tanh -> fc(128) -> tanh -> head.

    ``nd`` selects 3x3 (nd=2) or 3x3x3 (nd=3) kernels; both convs use
    stride 2. Parameters live in a flat dict so they can be copied, compared
    and finite-difference checked uniformly.
    """

    nd: int
    in_shape: tuple[int, ...]
    n_out: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    CH1 = 8
    CH2 = 16
    FC = 128

    @classmethod
    def create(cls, nd: int, in_shape: tuple[int, ...], n_out: int,
               rng: np.random.Generator, ch1: int | None = None,
               ch2: int | None = None, fc: int | None = None) -> "ConvNet":
        net = cls(nd=nd, in_shape=tuple(in_shape), n_out=n_out)
        ch1 = ch1 or cls.CH1
        ch2 = ch2 or cls.CH2
        fc = fc or cls.FC
        k = (3,) * nd
        sp1 = tuple((n - 3) // 2 + 1 for n in in_shape)
        sp2 = tuple((n - 3) // 2 + 1 for n in sp1)
        flat = ch2 * int(np.prod(sp2))
        p = net.params
        p["w1"] = rng.normal(0.0, 1.0 / math.sqrt(3 ** nd),
                             size=(ch1, 1) + k)
        p["b1"] = np.zeros(ch1)
        p["w2"] = rng.normal(0.0, 1.0 / math.sqrt(ch1 * 3 ** nd),
                             size=(ch2, ch1) + k)
        p["b2"] = np.zeros(ch2)
        p["w3"] = rng.normal(0.0, 1.0 / math.sqrt(flat), size=(fc, flat))
        p["b3"] = np.zeros(fc)
        # zero output head: initial values/predictions start at zero and the
        # head grows only as the data demands
        p["w4"] = np.zeros((n_out, fc))
        p["b4"] = np.zeros(n_out)
        return net

    def randomize_head(self, rng: np.random.Generator):
        """Gaussian head weights; used by gradient checks that need every
        layer in general position."""
        fc = self.params["w4"].shape[1]
        self.params["w4"] = rng.normal(0.0, 1.0 / math.sqrt(fc),
                                       size=self.params["w4"].shape)
        self.params["b4"] = rng.normal(0.0, 0.1,
                                       size=self.params["b4"].shape)

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ConvNet":
        dup = ConvNet(nd=self.nd, in_shape=self.in_shape, n_out=self.n_out)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup

    def forward(self, x: np.ndarray):
        """Batched forward pass; x is (B, *in_shape). Returns (q, cache)."""
        if x.shape[1:] != self.in_shape:
            raise ValueError(
                f"observation shape {x.shape[1:]} != {self.in_shape}")
        p = self.params
        x = x[:, None]                                   # add channel axis
        z1, win1 = _conv_forward(x, p["w1"], p["b1"], 2)
        a1 = np.tanh(z1)
        z2, win2 = _conv_forward(a1, p["w2"], p["b2"], 2)
        a2 = np.tanh(z2)
        flat = a2.reshape(a2.shape[0], -1)
        z3 = flat @ p["w3"].T + p["b3"]
        a3 = np.tanh(z3)
        q = a3 @ p["w4"].T + p["b4"]
        cache = (x, win1, a1, win2, a2, flat, a3)
        return q, cache

    def backward(self, cache, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(dq * q) w.r.t. every parameter."""
        p = self.params
        x, win1, a1, win2, a2, flat, a3 = cache
        g = {}
        g["w4"] = dq.T @ a3
        g["b4"] = dq.sum(axis=0)
        da3 = dq @ p["w4"]
        dz3 = da3 * (1.0 - a3 * a3)
        g["w3"] = dz3.T @ flat
        g["b3"] = dz3.sum(axis=0)
        dflat = dz3 @ p["w3"]
        da2 = dflat.reshape(a2.shape)
        dz2 = da2 * (1.0 - a2 * a2)
        da1, g["w2"], g["b2"] = _conv_backward(dz2, win2, p["w2"],
                                               a1.shape, 2)
        dz1 = da1 * (1.0 - a1 * a1)
        _, g["w1"], g["b1"] = _conv_backward(dz1, win1, p["w1"], x.shape, 2)
        return g


def qnet_forward(net: ConvNet, obs: np.ndarray) -> np.ndarray:
    """Action values for a single observation."""
    q, _ = net.forward(np.asarray(obs, dtype=np.float64)[None])
    return q[0]


def qnet_backward(net: ConvNet, obs: np.ndarray, action: int,
                  td_target: float) -> dict[str, np.ndarray]:
    """Gradient of (td_target - Q(obs, action))^2 w.r.t. all weights."""
    if not np.isfinite(td_target):
        raise ValueError("td_target must be finite")
    q, cache = net.forward(np.asarray(obs, dtype=np.float64)[None])
    dq = np.zeros_like(q)
    dq[0, action] = -2.0 * (td_target - q[0, action])
    return net.backward(cache, dq)


def double_dqn_target(online: ConvNet, target: ConvNet, r: float,
                      next_obs: np.ndarray, discount: float,
                      terminal: bool) -> float:
    """Bootstrap target: online net picks the action, target net scores it."""
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must be in [0, 1)")
    if terminal:
        return float(r)
    a = int(np.argmax(qnet_forward(online, next_obs)))
    return float(r + discount * qnet_forward(target, next_obs)[a])


# ---------------------------------------------------------------------------
# replay buffer and optimizer


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if not 0 <= self.action < N_ACTIONS:
            raise ValueError("action out of range")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def push(self, t: Transition):
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(0, len(self._items), size=batch)
        return [self._items[i] for i in idx]


class MomentumSGD:
    def __init__(self, lr: float = 1e-3, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self._vel: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]):
        for k, g in grads.items():
            v = self._vel.get(k)
            if v is None:
                v = np.zeros_like(g)
            v = self.momentum * v - self.lr * g
            self._vel[k] = v
            params[k] += v


# ---------------------------------------------------------------------------
# observations


def resize_nd(arr: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    """Separable linear resample onto a fixed grid (any dimensionality)."""
    out = np.asarray(arr, dtype=np.float64)
    for axis, n_out in enumerate(out_shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        pos = np.linspace(0.0, n_in - 1.0, n_out)
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
        f = pos - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, lo + 1, axis=axis)
        shape = [1] * out.ndim
        shape[axis] = n_out
        f = f.reshape(shape)
        out = a * (1.0 - f) + b * f
    return out


def standardize(obs: np.ndarray) -> np.ndarray:
    m = obs.mean()
    s = obs.std()
    return (obs - m) / (s + 1e-6)


SINO_OBS_SHAPE = (32, 32)
VOL_OBS_SHAPE = (16, 16, 16)


def sinogram_observation(data: np.ndarray) -> np.ndarray:
    """Central-view plane resampled to 32x32 and standardized."""
    view = data[data.shape[0] // 2]
    return standardize(resize_nd(view, SINO_OBS_SHAPE))


def volume_observation(data: np.ndarray) -> np.ndarray:
    """Whole volume resampled to 16^3 and standardized."""
    return standardize(resize_nd(data, VOL_OBS_SHAPE))


# ---------------------------------------------------------------------------
# the filter-tuning environment


@dataclass
class TrainConfig:
    """Environment and optimizer settings for a training run."""

    sino: Sinogram                      # noisy native acquisition
    gt: Volume                          # ground-truth phantom volume
    shape: tuple[int, int, int] = (64, 64, 64)
    voxel_size: float = 1.0
    # unapodized ramp: noise suppression is the learnable filters' job
    recon: ReconConfig = field(default_factory=ReconConfig)
    init_params: FilterParams = field(default_factory=FilterParams)
    steps_per_episode: int = 8
    batch_size: int = 32
    buffer_capacity: int = 10_000
    target_sync: int = 100
    updates_per_step: int = 4       # replay ratio: env steps are expensive
    lr: float = 1e-3
    momentum: float = 0.9
    discount: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.6
    loss_guard: float = 1e6


class FilterTuningEnv:
    """One-iteration denoising chain whose four sigmas are the state.

    Keeps the reconstruction of the currently filtered sinogram cached so
    volume-domain actions only redo the cheap volume filter.
    """

    SINO_AGENT = 0
    VOL_AGENT = 1

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.raw = resolve_ffs(cfg.sino)
        self.grid = default_parallel_grid(self.raw.geom)
        self.gt = cfg.gt
        self.params = cfg.init_params.clamped()
        self._recon_vol: Volume | None = None
        self._filtered_sino: np.ndarray | None = None
        self._volume: Volume | None = None
        self.roi: np.ndarray | None = None
        self.t_value = 0.0
        self.reset()

    def _reconstruct(self, sino_data: np.ndarray) -> Volume:
        sino = self.raw.with_data(sino_data)
        par = rebin_to_parallel(sino, self.grid)
        filt = ramp_filter(preweight(par), self.cfg.recon.ramp_window)
        return reconstruct_parallel(filt, self.cfg.recon, self.cfg.shape,
                                    self.cfg.voxel_size)

    def _refresh(self, sino_changed: bool):
        if sino_changed or self._recon_vol is None:
            self._filtered_sino = bilateral_sinogram_views(
                self.raw.data, self.params.sino_sigma_s,
                self.params.sino_sigma_i)
            self._recon_vol = self._reconstruct(self._filtered_sino)
            if self.roi is None:
                self.roi = self._recon_vol.coverage.copy()
        self._volume = bilateral_3d(self._recon_vol,
                                    self.params.vol_sigma_s,
                                    self.params.vol_sigma_i)
        self.t_value = metrics.reward(self._volume.data, self.gt.data,
                                      self.roi)

    def reset(self) -> None:
        self.params = self.cfg.init_params.clamped()
        self._recon_vol = None
        self._refresh(sino_changed=True)

    def observe(self, agent_idx: int) -> np.ndarray:
        if agent_idx == self.SINO_AGENT:
            return sinogram_observation(self._filtered_sino)
        return volume_observation(self._volume.data)

    def apply_action(self, agent_idx: int, action: int) -> float:
        """Adjust one sigma, rerun the affected chain, return the reward
        (change in the quality target)."""
        which, mult = ACTION_EFFECTS[action]
        t_prev = self.t_value
        if which is None:
            return 0.0
        p = self.params.as_dict()
        if agent_idx == self.SINO_AGENT:
            key = "sino_sigma_s" if which == 0 else "sino_sigma_i"
        else:
            key = "vol_sigma_s" if which == 0 else "vol_sigma_i"
        p[key] *= mult
        self.params = FilterParams(**p).clamped()
        self._refresh(sino_changed=(agent_idx == self.SINO_AGENT))
        return self.t_value - t_prev

    @property
    def volume(self) -> Volume:
        return self._volume


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: FilterParams
    log: list[dict]
    training_param_count: int
    initial_reward: float
    final_reward: float


def _epsilon(step: int, total: int, cfg: TrainConfig) -> float:
    ramp = max(1, int(cfg.eps_fraction * total))
    if step >= ramp:
        return cfg.eps_end
    f = step / ramp
    return cfg.eps_start + f * (cfg.eps_end - cfg.eps_start)


def _learn_step(net: ConvNet, target_net: ConvNet, buf: ReplayBuffer,
                opt: MomentumSGD, cfg: TrainConfig,
                rng: np.random.Generator) -> float | None:
    if len(buf) < cfg.batch_size:
        return None
    batch = buf.sample(cfg.batch_size, rng)
    next_states = np.stack([t.next_state for t in batch])
    q_next_online, _ = net.forward(next_states)
    q_next_target, _ = target_net.forward(next_states)
    best = np.argmax(q_next_online, axis=1)
    boot = q_next_target[np.arange(len(batch)), best]
    td = np.array([
        t.reward if t.terminal else t.reward + cfg.discount * boot[i]
        for i, t in enumerate(batch)])
    states = np.stack([t.state for t in batch])
    q, cache = net.forward(states)
    actions = np.array([t.action for t in batch])
    picked = q[np.arange(len(batch)), actions]
    err = picked - td
    loss = float(np.mean(err * err))
    dq = np.zeros_like(q)
    dq[np.arange(len(batch)), actions] = 2.0 * err / len(batch)
    grads = net.backward(cache, dq)
    opt.step(net.params, grads)
    return loss


def train(episodes: int, cfg: TrainConfig, seed: int) -> TrainResult:
    """Joint double-DQN training of the sinogram and volume agents.

    The two agents alternate turns within each episode; sigmas reset to the
    configured initial values at every episode start, and the final
    parameters come from a greedy rollout with the trained policies.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    env = FilterTuningEnv(cfg)
    initial_reward = env.t_value
    nets = [ConvNet.create(2, SINO_OBS_SHAPE, N_ACTIONS, rng),
            ConvNet.create(3, VOL_OBS_SHAPE, N_ACTIONS, rng)]
    count = sum(n.param_count() for n in nets)
    if episodes <= 0:
        return TrainResult(cfg.init_params.clamped(), [], count,
                           initial_reward, initial_reward)
    targets = [n.copy() for n in nets]
    buffers = [ReplayBuffer(cfg.buffer_capacity) for _ in nets]
    opts = [MomentumSGD(cfg.lr, cfg.momentum) for _ in nets]
    updates = [0, 0]
    total_steps = episodes * cfg.steps_per_episode
    step_count = 0
    log = []
    for ep in range(episodes):
        env.reset()
        ep_return = 0.0
        losses = []
        for st in range(cfg.steps_per_episode):
            idx = st % 2
            obs = env.observe(idx)
            if rng.random() < _epsilon(step_count, total_steps, cfg):
                action = int(rng.integers(N_ACTIONS))
            else:
                action = int(np.argmax(qnet_forward(nets[idx], obs)))
            r = env.apply_action(idx, action)
            next_obs = env.observe(idx)
            terminal = st >= cfg.steps_per_episode - 2   # each agent's last
            buffers[idx].push(Transition(obs, action, r, next_obs, terminal))
            ep_return += r
            for _ in range(cfg.updates_per_step):
                loss = _learn_step(nets[idx], targets[idx], buffers[idx],
                                   opts[idx], cfg, rng)
                if loss is None:
                    break
                losses.append(loss)
                if loss > cfg.loss_guard:
                    raise RuntimeError(
                        f"training diverged: loss {loss:.3e} at episode "
                        f"{ep}, step {st}")
                updates[idx] += 1
                if updates[idx] % cfg.target_sync == 0:
                    targets[idx] = nets[idx].copy()
            step_count += 1
        log.append({"episode": ep, "return": ep_return,
                    "loss": float(np.mean(losses)) if losses else math.nan,
                    **env.params.as_dict()})
    # greedy rollout with the trained policies
    env.reset()
    for st in range(cfg.steps_per_episode):
        idx = st % 2
        action = int(np.argmax(qnet_forward(nets[idx], env.observe(idx))))
        env.apply_action(idx, action)
    return TrainResult(env.params, log, count, initial_reward, env.t_value)


# ---------------------------------------------------------------------------
# reward regressor


def reward_observation(volume_data: np.ndarray) -> np.ndarray:
    """Central axial slice resampled to 32x32 and standardized."""
    return standardize(resize_nd(volume_data[volume_data.shape[0] // 2],
                                 SINO_OBS_SHAPE))


def train_reward_net(dataset: list[tuple[np.ndarray, float]], seed: int = 0,
                     epochs: int = 200, lr: float = 1e-3,
                     weight_decay: float = 1e-3,
                     val_fraction: float = 0.2) -> tuple[ConvNet, float]:
    """Fit the small CNN regressor that predicts the quality target.

    ``dataset`` pairs 32x32 observations (see :func:`reward_observation`)
    with their true target values; at least 100 samples are required. A
    light ridge penalty on the weights (biases excluded) keeps the tiny net
    from memorizing noise on small datasets. Returns the net and the
    validation MSE.
    """
    if len(dataset) < 100:
        raise ValueError("need at least 100 labelled samples")
    rng = np.random.default_rng(seed)
    x = np.stack([np.asarray(d[0], dtype=np.float64) for d in dataset])
    y = np.array([d[1] for d in dataset], dtype=np.float64)
    order = rng.permutation(len(y))
    n_val = max(1, int(val_fraction * len(y)))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    net = ConvNet.create(2, SINO_OBS_SHAPE, 1, rng)
    net.params["b4"][:] = y[tr_idx].mean()     # start at the mean predictor
    opt = MomentumSGD(lr, 0.9)
    batch = 32
    for _ in range(epochs):
        perm = rng.permutation(tr_idx)
        for i in range(0, len(perm), batch):
            sel = perm[i:i + batch]
            pred, cache = net.forward(x[sel])
            err = pred[:, 0] - y[sel]
            dq = (2.0 * err / len(sel))[:, None]
            grads = net.backward(cache, dq)
            if weight_decay:
                for k in grads:
                    if k.startswith("w"):
                        grads[k] += weight_decay * net.params[k]
            opt.step(net.params, grads)
    pred_val, _ = net.forward(x[val_idx])
    val_mse = float(np.mean((pred_val[:, 0] - y[val_idx]) ** 2))
    return net, val_mse


# ---------------------------------------------------------------------------
# parameter export


def export_params(params: FilterParams, path: str,
                  training_param_count: int | None = None) -> dict:
    """Write the four inference scalars as ``name=value`` lines.

    Returns a count report; the file always holds exactly 4 values (that is
    the entire inference-time parameter budget of the method).
    """
    items = params.as_dict()
    assert len(items) == 4
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v!r}\n")
    report = {"inference_param_count": 4}
    if training_param_count is not None:
        report["training_param_count"] = int(training_param_count)
    return report


def load_params(path: str) -> FilterParams:
    vals = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            k, v = line.split("=", 1)
            vals[k] = float(v)
    return FilterParams(**vals)
