"""Double dueling DRQN agent: epsilon-greedy acting, episode-aware sequence
replay, double-Q targets and the curriculum training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import N_ACTIONS, CurriculumScheduler, NavEnv, Observation, Outcome, curriculum_update
from .neural import network as net
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.optim import AdamState, adam_step
from .world import CameraSpec, ScenarioConfig, generate_scenario

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "level", "epsilon", "loss", "eval_sr", "eval_er", "eval_rt", "eval_aavc")


class NotReady(RuntimeError):
    """The replay buffer cannot supply the requested batch yet."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-3
    gamma: float = 0.97
    batch_size: int = 1024
    unroll: int = 3
    eps_init: float = 1.0
    eps_final: float = 0.1
    eps_horizon: int = 100_000
    target_sync: int = 2000
    episode_length: int = 200
    buffer_size: int = 200_000
    warmup: int = 5000
    train_every: int = 1
    total_steps: int = 1_000_000
    curriculum: bool = True
    curriculum_window: int = 100
    promote_threshold: float = 0.8
    eval_every: int = 10_000
    eval_episodes: int = 50
    eval_level: int | None = None
    checkpoint_every: int = 50_000

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.eps_final > self.eps_init:
            raise ValueError("eps_final must not exceed eps_init")
        if self.unroll < 1:
            raise ValueError("unroll must be at least 1")


def epsilon_at(step: int, cfg: TrainerConfig) -> float:
    """Linear decay from ``eps_init`` to ``eps_final`` over ``eps_horizon`` steps."""
    if step >= cfg.eps_horizon:
        return cfg.eps_final
    return cfg.eps_init + (cfg.eps_final - cfg.eps_init) * step / cfg.eps_horizon


def select_action(q, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


# ---------------------------------------------------------------------------
# Replay


class SequenceReplayBuffer:
    """FIFO ring of transitions that samples episode-contiguous windows.

    Only the newest costmap frame of each observation is stored (plus the
    newest frame of the successor observation); frame stacks are rebuilt at
    sample time from neighbouring transitions of the same episode.
    """

    def __init__(self, capacity: int, frame_shape: tuple, frame_dtype=np.uint8):
        self.capacity = int(capacity)
        self.frame_shape = tuple(frame_shape)
        # np.zeros maps pages lazily, so a large capacity costs only what is used
        self.obs_frame = np.zeros((self.capacity, *self.frame_shape), dtype=frame_dtype)
        self.next_frame = np.zeros((self.capacity, *self.frame_shape), dtype=frame_dtype)
        self.vec = np.zeros((self.capacity, 4), dtype=np.float32)
        self.next_vec = np.zeros((self.capacity, 4), dtype=np.float32)
        self.action = np.zeros(self.capacity, dtype=np.int16)
        self.reward = np.zeros(self.capacity, dtype=np.float32)
        self.terminal = np.zeros(self.capacity, dtype=bool)
        self.episode_id = np.full(self.capacity, -1, dtype=np.int64)
        self.step_id = np.zeros(self.capacity, dtype=np.int64)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, obs_frame, vec, action, reward, next_frame, next_vec, terminal, episode_id, step_id):
        i = self._next
        if self.size and self.step_id[(i - 1) % self.capacity] + 1 != step_id and step_id != 0:
            if self.episode_id[(i - 1) % self.capacity] == episode_id:
                raise ValueError("step ids must be contiguous within an episode")
        self.obs_frame[i] = obs_frame
        self.next_frame[i] = next_frame
        self.vec[i] = vec
        self.next_vec[i] = next_vec
        self.action[i] = action
        self.reward[i] = reward
        self.terminal[i] = terminal
        self.episode_id[i] = episode_id
        self.step_id[i] = step_id
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _phys(self, logical):
        oldest = (self._next - self.size) % self.capacity
        return (oldest + logical) % self.capacity

    def eligible_starts(self, unroll: int, history: int = 2) -> np.ndarray:
        """Logical indices (0 = oldest) where ``unroll`` transitions of one
        episode follow, with the ``history`` older frames still in the buffer."""
        n = self.size - unroll + 1
        if n <= 0:
            return np.zeros(0, dtype=np.int64)
        logical = np.arange(self.size)
        ep = self.episode_id[self._phys(logical)]
        step = self.step_id[self._phys(logical)]
        starts = np.arange(n)
        ok = np.ones(n, dtype=bool)
        for k in range(1, unroll):
            ok &= ep[starts + k] == ep[starts]
        ok &= starts - np.minimum(step[starts], history) >= 0
        return starts[ok]

    def sample(self, batch: int, unroll: int, rng: np.random.Generator, frames: int = 3) -> dict:
        """Sample ``batch`` windows of ``unroll`` transitions.

        Returns ``frames`` (unroll + 1, batch, frames, *frame_shape) holding the
        stacked observations o_0..o_unroll, ``vecs`` (unroll + 1, batch, 4),
        and ``actions``/``rewards``/``terminals``/``episode_ids`` of shape
        (unroll, batch).
        """
        starts = self.eligible_starts(unroll, history=frames - 1)
        if len(starts) < batch:
            raise NotReady(f"{len(starts)} eligible sequences, need {batch}")
        st = starts[rng.integers(len(starts), size=batch)]
        s = self.step_id[self._phys(st)]
        t_len = unroll
        # image index j (relative to the episode) for observation k, slot f
        k = np.arange(t_len + 1)[:, None, None]
        f = np.arange(frames)[None, :, None]
        j = np.maximum(s[None, None, :] + k - (frames - 1) + f, 0)
        from_next = j == s[None, None, :] + t_len
        src_obs = self._phys(st[None, None, :] + np.minimum(j, s[None, None, :] + t_len - 1) - s[None, None, :])
        src_next = self._phys(st + t_len - 1)
        stacked = np.where(from_next[..., None], 1, 0)  # placeholder for shape checks
        del stacked
        out = self.obs_frame[src_obs]
        if from_next.any():
            kk, ff, bb = np.nonzero(from_next)
            out[kk, ff, bb] = self.next_frame[src_next[bb]]
        # (T+1, frames, B, ...) -> (T+1, B, frames, ...)
        out = np.ascontiguousarray(np.swapaxes(out, 1, 2))
        pos = self._phys(st[None, :] + np.arange(t_len)[:, None])
        vecs = np.concatenate([self.vec[pos], self.next_vec[pos[-1]][None]], axis=0)
        return dict(frames=out, vecs=vecs, actions=self.action[pos].astype(np.int64), rewards=self.reward[pos],
                    terminals=self.terminal[pos], episode_ids=self.episode_id[pos], starts=st)


def sample_sequences(buf: SequenceReplayBuffer, batch: int, unroll: int = 3, rng=None, frames: int = 3) -> dict:
    rng = rng if rng is not None else np.random.default_rng()
    return buf.sample(batch, unroll, rng, frames)


# ---------------------------------------------------------------------------
# Targets and updates


def double_q_values(rewards, terminals, q_online_next, q_target_next, gamma: float) -> np.ndarray:
    """``r + gamma * Q_target(o', argmax_a Q_online(o', a))``, no bootstrap on terminals."""
    a_star = np.argmax(q_online_next, axis=-1)
    boot = np.take_along_axis(q_target_next, a_star[..., None], axis=-1)[..., 0]
    return np.asarray(rewards, dtype=np.float64) + np.where(terminals, 0.0, gamma * boot)


def _obs_inputs(batch, arch):
    frames = batch["frames"][:, :, -arch.frames:]
    return frames, batch["vecs"]


def double_q_target(batch: dict, online: dict, target: dict, arch, gamma: float = 0.97) -> np.ndarray:
    """Regression target for the final transition of each sampled window.

    Both networks start from a zero recurrent state and are warmed on the
    window's observations before evaluating the successor observation.
    """
    frames, vecs = _obs_inputs(batch, arch)
    t_len, n = batch["actions"].shape
    dtype = online["conv1/W"].dtype
    _, state, _ = net.forward(online, arch, frames[:t_len], vecs[:t_len], net.zero_state(arch, n, dtype))
    q_on = net.forward(online, arch, frames[t_len:], vecs[t_len:], state)[0][0]
    q_tg = net.forward(target, arch, frames, vecs, net.zero_state(arch, n, target["conv1/W"].dtype))[0][t_len]
    return double_q_values(batch["rewards"][-1], batch["terminals"][-1], q_on, q_tg, gamma)


def q_loss_and_grads(online: dict, target: dict, arch, batch: dict, gamma: float):
    """MSE on the last step of each window, with gradients through the unroll."""
    frames, vecs = _obs_inputs(batch, arch)
    t_len, n = batch["actions"].shape
    dtype = online["conv1/W"].dtype
    q, state, cache = net.forward(online, arch, frames[:t_len], vecs[:t_len], net.zero_state(arch, n, dtype),
                                  keep_cache=True)
    q_on_next = net.forward(online, arch, frames[t_len:], vecs[t_len:], state)[0][0]
    q_tg_next = net.forward(target, arch, frames, vecs, net.zero_state(arch, n, dtype))[0][t_len]
    y = double_q_values(batch["rewards"][-1], batch["terminals"][-1], q_on_next, q_tg_next, gamma)
    a = batch["actions"][-1]
    pred = q[-1, np.arange(n), a].astype(np.float64)
    err = pred - y
    loss = float(np.mean(err * err))
    dq = np.zeros_like(q)
    dq[-1, np.arange(n), a] = (2.0 / n) * err
    return loss, net.backward(online, arch, cache, dq)


# ---------------------------------------------------------------------------
# Estimator


def world_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1, dtype=np.uint32)[0])


class GreedyPolicy:
    """Recurrent greedy (or epsilon-greedy) policy over a parameter snapshot."""

    def __init__(self, params: dict, arch, epsilon: float = 0.0, rng=None):
        self.params = params
        self.arch = arch
        self.epsilon = epsilon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.reset()

    def reset(self):
        self.state = net.zero_state(self.arch, 1, self.params["conv1/W"].dtype)

    def q_values(self, obs: Observation) -> np.ndarray:
        frames = net.prepare_frames(self.arch, obs.maps[-self.arch.frames:])
        q, self.state, _ = net.forward(self.params, self.arch, frames[None, None], obs.vector()[None, None],
                                       self.state)
        return q[0, 0]

    def __call__(self, obs: Observation) -> int:
        return select_action(self.q_values(obs), self.epsilon, self.rng)


def _resolve_arch(arch):
    if isinstance(arch, net.ArchConfig):
        return arch
    if arch == "tiny":
        return net.ArchConfig.tiny()
    if arch in ("paper", "full", None):
        return net.ArchConfig.paper()
    raise ValueError(f"unknown architecture preset {arch!r}")


class DRQNAgent(BaseEstimator):
    """Double dueling DRQN trained on curriculum-scheduled random scenarios.

    ``fit`` runs the whole training loop; ``predict`` maps an observation
    sequence (one episode) to greedy action indices.
    """

    def __init__(self, config: TrainerConfig = TrainerConfig(), arch="tiny",
                 scenario: ScenarioConfig = ScenarioConfig(), camera: CameraSpec = CameraSpec(),
                 seed: int = 0, out_dir=None, env_kwargs: dict | None = None):
        self.config = config
        self.arch = arch
        self.scenario = scenario
        self.camera = camera
        self.seed = seed
        self.out_dir = out_dir
        self.env_kwargs = env_kwargs

    # -- setup -------------------------------------------------------------
    def _setup(self):
        self.arch_ = _resolve_arch(self.arch)
        self.params_ = net.init_params(self.arch_, seed=self.seed)
        self.target_params_ = net.copy_params(self.params_)
        self.adam_ = AdamState()
        self.n_updates_ = 0
        self.rng_ = np.random.default_rng(self.seed)
        frame_shape = net.prepare_frames(self.arch_, np.zeros((60, 60), np.uint8)).shape
        self.buffer_ = SequenceReplayBuffer(self.config.buffer_size, frame_shape)
        max_level = self.scenario.max_level
        start = 0 if self.config.curriculum else max_level
        self.scheduler_ = CurriculumScheduler(start, max_level, self.config.curriculum_window,
                                              self.config.promote_threshold)
        self.log_ = []

    def make_env(self, **kw) -> NavEnv:
        opts = dict(self.env_kwargs or {})
        opts.update(kw)
        return NavEnv(self.camera, max_steps=self.config.episode_length, **opts)

    # -- learning ------------------------------------------------------------
    def train_step(self, batch: dict) -> float:
        loss, grads = q_loss_and_grads(self.params_, self.target_params_, self.arch_, batch, self.config.gamma)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"non-finite loss/gradient at update {self.n_updates_}")
        self.params_, self.adam_ = adam_step(self.params_, grads, self.adam_, lr=self.config.lr)
        self.n_updates_ += 1
        if self.n_updates_ % self.config.target_sync == 0:
            self.sync_target()
        return loss

    def sync_target(self):
        self.target_params_ = net.copy_params(self.params_)
        return self

    def policy(self, epsilon: float = 0.0, rng=None) -> GreedyPolicy:
        check_is_fitted(self, "params_")
        return GreedyPolicy(self.params_, self.arch_, epsilon, rng if rng is not None else self.rng_)

    def evaluate(self, episodes: int, level: int | None = None, base_seed: int = 10**6, kind="random"):
        from .metrics import compute_metrics, run_episodes

        level = self.scenario.max_level if level is None else level
        logs = run_episodes(self.policy(0.0), kind, episodes, base_seed, level=level,
                            scenario=self.scenario, env=self.make_env())
        return compute_metrics(logs)

    def fit(self, X=None, y=None, log_path=None, progress=None):
        """Train for ``config.total_steps`` environment steps.

        ``X``/``y`` are ignored (the agent generates its own experience).
        Returns ``self``.
        """
        self._setup()
        cfg = self.config
        out = Path(self.out_dir) if self.out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        env = self.make_env()
        policy = GreedyPolicy(self.params_, self.arch_, rng=self.rng_)
        step, episode = 0, 0
        losses = []
        eval_level = cfg.eval_level if cfg.eval_level is not None else self.scenario.max_level
        t0 = time.perf_counter()
        while step < cfg.total_steps:
            world = generate_scenario("random", self.scheduler_.level, world_seed(self.seed, episode), self.scenario)
            obs = env.reset(world)
            policy.params = self.params_
            policy.reset()
            frame = net.prepare_frames(self.arch_, obs.maps[-1])
            status = env.status
            while not status.done and step < cfg.total_steps:
                policy.params = self.params_
                policy.epsilon = epsilon_at(step, cfg)
                action = policy(obs)
                next_obs, reward, status = env.step(action)
                next_frame = net.prepare_frames(self.arch_, next_obs.maps[-1])
                terminal = status.outcome in (Outcome.SUCCESS, Outcome.COLLISION)
                self.buffer_.push(frame, obs.vector(), action, reward.total, next_frame, next_obs.vector(),
                                  terminal, episode, status.steps - 1)
                obs, frame = next_obs, next_frame
                step += 1
                if step >= cfg.warmup and step % cfg.train_every == 0:
                    try:
                        batch = self.buffer_.sample(cfg.batch_size, cfg.unroll, self.rng_, self.arch_.frames)
                    except NotReady:
                        batch = None
                    if batch is not None:
                        losses.append(self.train_step(batch))
                if step % cfg.eval_every == 0:
                    rep = self.evaluate(cfg.eval_episodes, eval_level)
                    row = (step, self.scheduler_.level, epsilon_at(step, cfg),
                           float(np.mean(losses)) if losses else float("nan"),
                           rep.sr, rep.er, rep.rt, rep.aavc)
                    losses = []
                    self.log_.append(row)
                    log.info("step %d level %d eps %.3f loss %.3f SR %.3f ER %.1f (%.0fs)", row[0], row[1], row[2],
                             row[3], row[4], row[5], time.perf_counter() - t0)
                    if progress is not None:
                        progress(row)
                    if log_path is not None:
                        write_train_log(log_path, self.log_)
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out / f"ckpt_{step}.bin", self.params_, self.adam_)
            if status.done:
                self.scheduler_ = curriculum_update(self.scheduler_, status)
                episode += 1
        self.episodes_ = episode
        self.steps_ = step
        if out is not None:
            save_checkpoint(out / "ckpt_final.bin", self.params_, self.adam_)
        return self

    # -- inference -----------------------------------------------------------
    def predict(self, observations) -> np.ndarray:
        """Greedy actions for a sequence of observations from one episode."""
        pol = self.policy(0.0)
        return np.array([pol(o) for o in observations], dtype=np.int64)

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, getattr(self, "adam_", None))

    def load(self, path):
        params, adam = load_checkpoint(path)
        self.arch_ = _resolve_arch(self.arch)
        net.check_params(params, self.arch_)
        self.params_ = params
        self.target_params_ = net.copy_params(params)
        self.adam_ = adam or AdamState()
        self.rng_ = np.random.default_rng(self.seed)
        return self


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "NA"
    return f"{v:.6f}"


def write_train_log(path, rows) -> None:
    lines = [",".join(LOG_FIELDS)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_train_log(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        vals = line.split(",")
        rows.append(tuple(None if v == "NA" else (int(v) if i < 2 else float(v)) for i, v in enumerate(vals)))
    return rows
