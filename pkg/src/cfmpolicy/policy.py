"""Point-cloud-conditioned flow policy: observation stacking, training on
demonstrations (consistency or plain CFM objective), chunked receding-horizon
action generation and the top-5 checkpoint evaluation protocol."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import flowmatch as fm
from .numcore import AdamW, ContractError, Mlp, Rng, check_finite
from .perception import CloudEncoder, Normalizer, fps
from .simenv import EpisodeRecord, Observation, TaskSpec, run_episode

SAMPLERS = ("onestep", "segments", "euler")


def parse_sampler(name: str) -> tuple[str, int]:
    """``"onestep"``, ``"segments"`` or ``"euler-N"`` -> (kind, steps)."""
    if name == "onestep":
        return "onestep", 1
    if name == "segments":
        return "segments", 0
    if name.startswith("euler-"):
        n = int(name.split("-", 1)[1])
        if n < 1:
            raise ValueError("euler needs at least one step")
        return "euler", n
    raise ValueError(f"unknown sampler {name!r}")


@dataclass
class PolicyConfig:
    obs_horizon: int = 2
    pred_horizon: int = 8
    exec_horizon: int = 4
    schedule: fm.SegmentSchedule = field(
        default_factory=lambda: fm.SegmentSchedule(K=2, delta_t=0.05, alpha=0.01))
    objective: str = "consistency"  # or "cfm"
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 128
    ema_decay: float = 0.95
    epochs: int = 3000
    n_demos: int = 10
    eval_every: int = 200
    eval_episodes: int = 20
    hidden: tuple = (256, 256, 256)
    n_points: int = 32
    visual_dim: int = 64
    sampler: str = "onestep"
    use_ema: bool = True
    # frame the cloud and state are expressed in before encoding, see to_frame
    frame: str = "ee"
    # rotate each training window by a random angle about the base axis
    # (only meaningful in the world frame)
    augment_rotation: bool = False
    # reflect each training window across the x-axis with probability 1/2
    augment_mirror: bool = True

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = fm.SegmentSchedule(**self.schedule)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.obs_horizon != 2:
            raise ValueError("only an observation horizon of 2 is supported")
        if not 1 <= self.exec_horizon <= self.pred_horizon:
            raise ValueError("need 1 <= exec_horizon <= pred_horizon")
        if self.objective not in ("consistency", "cfm"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if min(self.batch_size, self.epochs, self.eval_every, self.eval_episodes, self.n_points) < 1:
            raise ValueError("sizes and counts must be positive")
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        parse_sampler(self.sampler)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["schedule"] = self.schedule.to_dict()
        d["hidden"] = list(self.hidden)
        return d


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class PolicyModel:
    """Cloud encoder + velocity field over flattened action chunks.

    Condition layout: ``[visual(frame0), visual(frame1), state(frame0), state(frame1)]``
    with frame1 the most recent.
    """

    def __init__(self, state_dim: int, pred_horizon: int = 8, act_dim: int = 2,
                 hidden=(256, 256, 256), visual_dim: int = 64, rng: Rng | None = None,
                 encoder: CloudEncoder | None = None, field: fm.VelocityNet | None = None):
        self.state_dim = int(state_dim)
        self.act_dim = int(act_dim)
        self.pred_horizon = int(pred_horizon)
        self.encoder = encoder or CloudEncoder(rng, out_dim=visual_dim)
        cond_dim = 2 * (self.encoder.out_dim + self.state_dim)
        self.field = field or fm.VelocityNet(self.pred_horizon * self.act_dim, cond_dim, hidden, rng)

    @property
    def x_dim(self) -> int:
        return self.field.x_dim

    def mlps(self) -> list[Mlp]:
        return self.encoder.mlps() + [self.field.mlp]

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.field.params()

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.state_dim, self.pred_horizon, self.act_dim,
                           encoder=self.encoder.copy(), field=self.field.copy())

    def condition(self, clouds, states):
        """clouds ``(B, 2, n, 3)``, normalized states ``(B, 2, S)`` -> ``(B, C)``."""
        vis, cache = self.encoder.forward(clouds)
        b = vis.shape[0]
        cond = np.concatenate([vis.reshape(b, -1), np.asarray(states).reshape(b, -1)], axis=1)
        return cond, cache

    def condition_backward(self, cache, g_cond):
        b = g_cond.shape[0]
        n_vis = 2 * self.encoder.out_dim
        return self.encoder.backward(cache, g_cond[:, :n_vis].reshape(b, 2, -1))


@dataclass
class EvalReport:
    checkpoints: list = field(default_factory=list)  # (epoch, success %)
    nfe: int | None = None
    time_ms_mean: float | None = None
    time_ms_std: float | None = None

    @property
    def rates(self) -> list[float]:
        return [r for _, r in self.checkpoints]

    @property
    def final_score(self) -> float | None:
        return top_k_mean(self.rates, 5)


def top_k_mean(rates: Sequence[float], k: int = 5) -> float | None:
    """Mean of the ``k`` largest values; None with fewer than ``k`` values."""
    if len(rates) < k:
        return None
    return float(np.mean(np.sort(np.asarray(rates, dtype=np.float64))[::-1][:k]))


@dataclass
class TrainedPolicy:
    model: PolicyModel
    ema: fm.EmaParams
    state_norm: Normalizer
    action_norm: Normalizer
    cfg: PolicyConfig
    epoch: int = 0
    opt_state: object = None
    report: EvalReport = field(default_factory=EvalReport)
    losses: list = field(default_factory=list)  # mean loss per epoch

    def inference_model(self) -> PolicyModel:
        return self.ema.model if self.cfg.use_ema else self.model


# --------------------------------------------------------------------------
# conditioning and data windows
# --------------------------------------------------------------------------


FRAMES = ("ee", "link", "world")


def rotate_scene(clouds, states, phi):
    """Rotate clouds ``(B, ..., n, 3)`` and arm states ``(B, ..., 6)`` by ``phi`` (B,)
    about the base axis.

    Joint-velocity actions are unchanged by such a rotation: it only adds
    ``phi`` to the first joint angle and turns the targets with it.
    """
    phi = np.asarray(phi, dtype=np.float64)
    c, s = np.cos(phi), np.sin(phi)
    cc = c.reshape(-1, *([1] * (clouds.ndim - 2)))
    sc = s.reshape(-1, *([1] * (clouds.ndim - 2)))
    out_c = clouds.copy()
    out_c[..., 0] = cc * clouds[..., 0] - sc * clouds[..., 1]
    out_c[..., 1] = sc * clouds[..., 0] + cc * clouds[..., 1]
    cs = c.reshape(-1, *([1] * (states.ndim - 2)))
    ss = s.reshape(-1, *([1] * (states.ndim - 2)))
    out_s = states.copy()
    for i, j in ((0, 1), (4, 5)):
        out_s[..., i] = cs * states[..., i] - ss * states[..., j]
        out_s[..., j] = ss * states[..., i] + cs * states[..., j]
    return out_c, out_s


MIRROR_SIGNS = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])


def mirror_scene(clouds, states):
    """Reflect across the x-axis. Both joint angles change sign, and so do
    the joint-velocity actions that go with the reflected scene."""
    out_c = clouds.copy()
    out_c[..., 1] *= -1.0
    return out_c, states * MIRROR_SIGNS


def to_frame(frame: str, clouds, states):
    """Express stacked frames ``(B, 2, n, 3)`` / ``(B, 2, 6)`` in the policy frame.

    Both frames are turned about the base by the same angle, taken from the
    newest frame: ``"ee"`` puts its end effector on the +x axis, ``"link"``
    puts its first link there, ``"world"`` leaves everything alone. The task
    is symmetric under such turns, so the first two remove a nuisance
    variable the demonstrations would otherwise have to cover.
    """
    if frame == "world":
        return clouds, states
    if frame == "link":
        phi = np.arctan2(states[:, -1, 1], states[:, -1, 0])
    else:
        phi = np.arctan2(states[:, -1, 5], states[:, -1, 4])
    return rotate_scene(clouds, states, -phi)


def build_condition(model: PolicyModel, history: Sequence[Observation],
                    state_norm: Normalizer, n_points: int = 32, frame: str = "ee") -> np.ndarray:
    """Condition vector ``(1, C)`` from the two most recent observations."""
    if len(history) != 2:
        raise ContractError("expected exactly two observation frames")
    clouds = np.stack([o.cloud[fps(o.cloud, n_points)] for o in history])[None]
    states = np.stack([o.state for o in history])[None]
    clouds, states = to_frame(frame, clouds, states)
    return model.condition(clouds, state_norm.normalize(states))[0]


@dataclass
class WindowSet:
    clouds: np.ndarray  # (W, 2, n, 3) downsampled, policy frame
    states: np.ndarray  # (W, 2, S) policy frame, not normalized
    chunks: np.ndarray  # (W, Hp * 2) normalized, time-major


def make_windows(demos: Sequence[EpisodeRecord], cfg: PolicyConfig,
                 action_norm: Normalizer) -> WindowSet:
    """One window per demo step; chunks past the demo end repeat the last action."""
    clouds, states, chunks = [], [], []
    for d in demos:
        L = len(d)
        if L == 0:
            continue
        down = np.stack([c[fps(c, cfg.n_points)] for c in d.clouds])
        a_norm = action_norm.normalize(d.actions)
        pad = np.concatenate([a_norm, np.repeat(a_norm[-1:], cfg.pred_horizon, axis=0)])
        for s in range(L):
            prev = max(s - 1, 0)
            clouds.append(down[[prev, s]])
            states.append(d.states[[prev, s]])
            chunks.append(pad[s:s + cfg.pred_horizon].reshape(-1))
    if not chunks:
        raise ContractError("demonstrations contain no steps")
    clouds, states = to_frame(cfg.frame, np.array(clouds), np.array(states))
    return WindowSet(clouds, states, np.array(chunks))


def fit_state_normalizer(windows: WindowSet, rotations: bool, mirror: bool = False) -> Normalizer:
    """Fit on window states, plus whatever copies augmentation can produce."""
    states = windows.states
    if mirror:
        states = np.concatenate([states, states * MIRROR_SIGNS])
    if rotations:
        phi = np.linspace(-np.pi, np.pi, 72, endpoint=False)
        dummy = np.zeros(states.shape[:2] + (1, 3))
        states = np.concatenate(
            [rotate_scene(dummy, states, np.full(len(states), p))[1] for p in phi])
    return Normalizer.fit(states)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def policy_loss(model: PolicyModel, target: PolicyModel, cfg: PolicyConfig, batch: WindowSet,
                x0, t, seg=None, target_cond=None):
    """Loss and gradients (ordered like ``model.params()``) for one batch.

    The target branch reads the live condition unless ``target_cond`` is
    given; either way no gradient flows through it.
    """
    cond, enc_cache = model.condition(batch.clouds, batch.states)
    if cfg.objective == "cfm":
        loss, fgrads, g_cond = fm.cfm_loss(model.field, x0, batch.chunks, t, cond)
    else:
        loss, fgrads, g_cond = fm.consistency_fm_loss(
            model.field, target.field, cfg.schedule, x0, batch.chunks, t, seg, cond,
            cond if target_cond is None else target_cond)
    egrads = model.condition_backward(enc_cache, g_cond)
    return loss, egrads + fgrads


def sample_times(cfg: PolicyConfig, rng: Rng, n: int):
    if cfg.objective == "cfm":
        eps = cfg.schedule.epsilon
        return rng.uniform(eps, 1.0 - eps, n), None
    return cfg.schedule.sample(rng, n)


def init_policy(demos: Sequence[EpisodeRecord], cfg: PolicyConfig, rng: Rng) -> TrainedPolicy:
    if not demos:
        raise ContractError("no demonstrations")
    actions = np.concatenate([d.actions for d in demos])
    if cfg.augment_mirror:
        # symmetric bounds so a reflected chunk is just the negated chunk
        bound = np.abs(actions).max(axis=0)
        action_norm = Normalizer(-bound, bound)
    else:
        action_norm = Normalizer.fit(actions)
    windows = make_windows(demos, cfg, action_norm)
    model = PolicyModel(windows.states.shape[-1], cfg.pred_horizon, actions.shape[1],
                        cfg.hidden, cfg.visual_dim, rng)
    return TrainedPolicy(model, fm.EmaParams(model, cfg.ema_decay),
                         fit_state_normalizer(windows, cfg.augment_rotation, cfg.augment_mirror),
                         action_norm, cfg)


def train_policy(demos: Sequence[EpisodeRecord], cfg: PolicyConfig, seed: int,
                 epochs: int | None = None, policy: TrainedPolicy | None = None,
                 on_checkpoint: Callable[[TrainedPolicy], None] | None = None,
                 log: Callable[[str], None] | None = None) -> TrainedPolicy:
    """Train (or continue training) a policy.

    All randomness is drawn from ``Rng(seed)``: the initial weights from
    child 0 and each epoch from its own child stream, so a resumed run
    reproduces an uninterrupted one. ``on_checkpoint`` fires every
    ``cfg.eval_every`` epochs.
    """
    root = Rng(seed)
    if policy is None:
        policy = init_policy(demos, cfg, root.child(0))
    windows = make_windows(demos, cfg, policy.action_norm)
    model, ema = policy.model, policy.ema
    opt = AdamW(model.mlps(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if policy.opt_state is not None:
        opt.state = policy.opt_state
    policy.opt_state = opt.state
    n = windows.chunks.shape[0]
    stop = cfg.epochs if epochs is None else epochs
    while policy.epoch < stop:
        rng = root.child(1 + policy.epoch)
        perm = rng.permutation(n)
        total = 0.0
        for k in range(0, n, cfg.batch_size):
            idx = perm[k:k + cfg.batch_size]
            clouds, states = windows.clouds[idx], windows.states[idx]
            chunks = windows.chunks[idx]
            if cfg.augment_rotation:
                clouds, states = rotate_scene(clouds, states, rng.uniform(-np.pi, np.pi, len(idx)))
            if cfg.augment_mirror:
                flip = rng.uniform(size=len(idx)) < 0.5
                mc, ms = mirror_scene(clouds[flip], states[flip])
                clouds, states, chunks = clouds.copy(), states.copy(), chunks.copy()
                clouds[flip], states[flip], chunks[flip] = mc, ms, -chunks[flip]
            batch = WindowSet(clouds, policy.state_norm.normalize(states), chunks)
            x0 = rng.normal(batch.chunks.shape)
            t, seg = sample_times(cfg, rng, len(idx))
            loss, grads = policy_loss(model, ema.model, cfg, batch, x0, t, seg)
            check_finite(loss, "training loss")
            opt.step(grads)
            ema.update(model)
            total += loss * len(idx)
        policy.epoch += 1
        policy.losses.append(total / n)
        if log is not None and policy.epoch % 100 == 0:
            log(f"epoch {policy.epoch} loss {policy.losses[-1]:.6f}")
        if on_checkpoint is not None and policy.epoch % cfg.eval_every == 0:
            on_checkpoint(policy)
    return policy


# --------------------------------------------------------------------------
# acting and evaluation
# --------------------------------------------------------------------------


def act(policy: TrainedPolicy, history: Sequence[Observation], rng: Rng,
        sampler: str | None = None, model: PolicyModel | None = None):
    """Sample an action chunk; returns ``(actions (H_a, 2), nfe)``."""
    cfg = policy.cfg
    kind, n = parse_sampler(sampler or cfg.sampler)
    model = model or policy.inference_model()
    cond = build_condition(model, history, policy.state_norm, cfg.n_points, cfg.frame)
    x0 = rng.normal((1, model.x_dim))
    field = fm.CountingField(model.field)
    if kind == "onestep":
        x = fm.sample_onestep(field, x0, cond)
    elif kind == "segments":
        x = fm.sample_segments(field, x0, cond, cfg.schedule.K)
    else:
        x = fm.sample_euler(field, x0, cond, n)
    chunk = policy.action_norm.denormalize(x.reshape(cfg.pred_horizon, -1))
    return chunk[:cfg.exec_horizon], field.calls


def policy_fn(policy: TrainedPolicy, rng: Rng, sampler: str | None = None,
              timings: list | None = None, nfe: list | None = None):
    """Adapter for :func:`simenv.run_episode`."""
    def fn(history):
        t0 = time.perf_counter()
        actions, calls = act(policy, history, rng, sampler)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        if nfe is not None:
            nfe.append(calls)
        return actions
    return fn


def evaluate(policy_or_fn, task: TaskSpec, n_episodes: int = 20, seed: int = 0,
             sampler: str | None = None) -> dict:
    """Success percentage over ``n_episodes`` seeded episodes.

    Accepts a :class:`TrainedPolicy` or a bare ``history -> chunk`` callable.
    Episode ``i`` resets from ``Rng(seed).child(i)``; policy noise comes from
    a separate stream so the set of start states is sampler-independent.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    root = Rng(seed)
    timings: list = []
    nfe: list = []
    records = []
    for i in range(n_episodes):
        if isinstance(policy_or_fn, TrainedPolicy):
            fn = policy_fn(policy_or_fn, root.child(10_000_000 + i), sampler, timings, nfe)
        else:
            fn = policy_or_fn
        records.append(run_episode(fn, task, root.child(i)))
    wins = sum(r.success for r in records)
    out = {"success": 100.0 * wins / n_episodes, "episodes": records,
           "nfe": int(nfe[0]) if nfe else None}
    if timings:
        out["time_ms_mean"] = 1e3 * float(np.mean(timings))
        out["time_ms_std"] = 1e3 * float(np.std(timings))
    return out


def time_inference(policy: TrainedPolicy, task: TaskSpec, sampler: str, n_calls: int = 200,
                   warmup: int = 20, seed: int = 0) -> dict:
    """Wall time of :func:`act` (conditioning + sampling + denormalization)."""
    from .simenv import env_reset, observe

    rng = Rng(seed)
    state = env_reset(task, rng.child(0))
    obs = observe(task, state)
    history = [obs, obs]
    noise = rng.child(1)
    times = []
    calls = 0
    for k in range(warmup + n_calls):
        t0 = time.perf_counter()
        _, calls = act(policy, history, noise, sampler)
        dt = time.perf_counter() - t0
        if k >= warmup:
            times.append(dt)
    times = np.array(times) * 1e3
    return {"nfe": calls, "time_ms_mean": float(times.mean()), "time_ms_std": float(times.std()),
            "time_ms_median": float(np.median(times))}


def time_sampler(policy: TrainedPolicy, task: TaskSpec, sampler: str, n_calls: int = 200,
                 warmup: int = 20, seed: int = 0) -> dict:
    """Wall time of the sampler alone on a fixed, precomputed condition."""
    from .simenv import env_reset, observe

    cfg = policy.cfg
    kind, n = parse_sampler(sampler)
    model = policy.inference_model()
    rng = Rng(seed)
    obs = observe(task, env_reset(task, rng.child(0)))
    cond = build_condition(model, [obs, obs], policy.state_norm, cfg.n_points, cfg.frame)
    x0 = rng.child(1).normal((1, model.x_dim))
    field = fm.CountingField(model.field)
    times = []
    for k in range(warmup + n_calls):
        field.reset()
        t0 = time.perf_counter()
        if kind == "onestep":
            fm.sample_onestep(field, x0, cond)
        elif kind == "segments":
            fm.sample_segments(field, x0, cond, cfg.schedule.K)
        else:
            fm.sample_euler(field, x0, cond, n)
        dt = time.perf_counter() - t0
        if k >= warmup:
            times.append(dt)
    times = np.array(times) * 1e3
    return {"nfe": field.calls, "time_ms_mean": float(times.mean()),
            "time_ms_std": float(times.std()), "time_ms_median": float(np.median(times))}
