from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drqn_nav.agent import (DRQNAgent, NotReady, SequenceReplayBuffer, TrainerConfig, TrainingDiverged,
                            double_q_target, double_q_values, epsilon_at, q_loss_and_grads, read_train_log,
                            sample_sequences, select_action, write_train_log)
from drqn_nav.neural import network as net
from drqn_nav.world import CameraSpec, ScenarioConfig

TINY = net.ArchConfig.tiny(channels=(4, 4, 4), proj=4, hidden=8, fc=8)
FRAME = net.prepare_frames(TINY, np.zeros((60, 60), np.uint8)).shape


def fill(buf, episode_lengths, frame_fn=None, start_ep=0):
    for e, length in enumerate(episode_lengths, start=start_ep):
        for s in range(length):
            f = np.full(buf.frame_shape, (e * 10 + s) % 256, np.uint8) if frame_fn is None else frame_fn(e, s)
            nf = np.full(buf.frame_shape, (e * 10 + s + 1) % 256, np.uint8)
            buf.push(f, np.full(4, s, np.float32), s % 28, float(s), nf, np.full(4, s + 1, np.float32),
                     s == length - 1, e, s)


# -- exploration -------------------------------------------------------------------------


def test_epsilon_schedule():
    cfg = TrainerConfig(eps_horizon=1000)
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(1000, cfg) == pytest.approx(0.1)
    assert epsilon_at(10**6, cfg) == pytest.approx(0.1)
    assert epsilon_at(500, cfg) == pytest.approx(0.55)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_epsilon_non_increasing(a, b):
    cfg = TrainerConfig(eps_horizon=20_000)
    lo, hi = sorted((a, b))
    assert epsilon_at(lo, cfg) >= epsilon_at(hi, cfg)


def test_select_action_greedy_and_ties():
    rng = np.random.default_rng(0)
    q = np.zeros(28)
    q[5] = 1.0
    assert select_action(q, 0.0, rng) == 5
    assert select_action(np.zeros(28), 0.0, rng) == 0
    with pytest.raises(ValueError):
        select_action(q, 1.5, rng)


def test_select_action_uniform_when_fully_random():
    rng = np.random.default_rng(1)
    n = 100_000
    counts = np.bincount([select_action(np.zeros(28), 1.0, rng) for _ in range(n)], minlength=28)
    p = 1 / 28
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_trainer_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(gamma=1.5)
    with pytest.raises(ValueError):
        TrainerConfig(eps_init=0.1, eps_final=0.5)
    with pytest.raises(ValueError):
        TrainerConfig(unroll=0)


# -- replay -----------------------------------------------------------------------------------


def test_eligible_starts_single_episode():
    buf = SequenceReplayBuffer(100, FRAME)
    fill(buf, [5])
    assert list(buf.eligible_starts(3)) == [0, 1, 2]


def test_eligible_starts_short_episodes():
    buf = SequenceReplayBuffer(100, FRAME)
    fill(buf, [2, 3])
    assert len(buf.eligible_starts(3)) == 1


def test_not_ready_signal():
    buf = SequenceReplayBuffer(100, FRAME)
    fill(buf, [2, 2])
    with pytest.raises(NotReady):
        sample_sequences(buf, 4, 3, np.random.default_rng(0))


def test_fifo_capacity():
    buf = SequenceReplayBuffer(10, FRAME)
    fill(buf, [7, 7])
    assert len(buf) == 10
    # oldest remaining transition is episode 0 step 4
    assert buf.episode_id[buf._phys(0)] == 0 and buf.step_id[buf._phys(0)] == 4
    # the tail of episode 0 is too short for a window
    assert list(buf.eligible_starts(3)) == [3, 4, 5, 6, 7]
    # a window needs its two older frames still stored
    buf = SequenceReplayBuffer(6, FRAME)
    fill(buf, [9])
    assert list(buf.eligible_starts(3)) == [2, 3]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 8), min_size=1, max_size=12), st.integers(5, 40), st.integers(0, 1000))
def test_samples_never_cross_episodes(lengths, capacity, seed):
    buf = SequenceReplayBuffer(capacity, FRAME)
    fill(buf, lengths)
    assert len(buf) <= capacity
    batch = len(buf.eligible_starts(3))
    if batch == 0:
        return
    b = buf.sample(batch, 3, np.random.default_rng(seed))
    ids = b["episode_ids"]
    assert np.all(ids == ids[0])
    # frame stacks: oldest -> newest, clamped to the first frame of the episode
    for n in range(batch):
        e = ids[0, n]
        s0 = buf.step_id[buf._phys(b["starts"][n])]
        for k in range(4):
            for f in range(3):
                j = max(s0 + k - 2 + f, 0)
                assert b["frames"][k, n, f].flat[0] == (e * 10 + j) % 256
        assert np.array_equal(b["vecs"][:, n, 0], s0 + np.arange(4))


# -- targets -------------------------------------------------------------------------------------


def test_double_q_values_examples():
    q_on = np.zeros((1, 28))
    q_on[0, 1] = 3.0
    q_on[0, 0] = 2.0
    q_tg = np.zeros((1, 28))
    q_tg[0, 1] = 4.0
    q_tg[0, 0] = 100.0
    assert double_q_values([15.0], [False], q_on, q_tg, 0.97)[0] == pytest.approx(18.88)
    assert double_q_values([-500.0], [True], q_on, q_tg, 0.97)[0] == -500.0


@given(st.integers(0, 10_000))
def test_double_q_reduces_to_max_when_networks_equal(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((16, 28))
    r = rng.standard_normal(16)
    term = rng.random(16) < 0.3
    y = double_q_values(r, term, q, q, 0.97)
    assert np.array_equal(y, r + np.where(term, 0.0, 0.97 * q.max(axis=1)))


def _batch(seed=0, n=6):
    buf = SequenceReplayBuffer(200, FRAME)
    rng = np.random.default_rng(seed)
    fill(buf, [6, 9, 7], frame_fn=lambda e, s: rng.integers(0, 256, FRAME).astype(np.uint8))
    return buf.sample(n, 3, np.random.default_rng(seed))


def test_double_q_target_matches_value_form():
    p = net.init_params(TINY, 0)
    b = _batch()
    y = double_q_target(b, p, p, TINY, 0.97)
    frames, vecs = b["frames"], b["vecs"]
    q_all = net.forward(p, TINY, frames, vecs, net.zero_state(TINY, 6))[0]
    ref = b["rewards"][-1] + np.where(b["terminals"][-1], 0.0, 0.97 * q_all[3].max(axis=1))
    assert np.allclose(y, ref, rtol=1e-5)


# -- training --------------------------------------------------------------------------------------


def small_agent(**kw):
    cfg = TrainerConfig(batch_size=8, warmup=40, total_steps=120, eps_horizon=100, target_sync=5, eval_every=60,
                        eval_episodes=2, checkpoint_every=60, buffer_size=100, episode_length=30, **kw)
    scen = ScenarioConfig(arena=4.0, obstacle_counts=(0, 1), goal_distances=(1.5, 2.0))
    return DRQNAgent(cfg, TINY, scen, CameraSpec(n_h=16, n_v=12), seed=3)


def test_perfect_fit_gives_zero_loss_and_no_update():
    agent = small_agent()
    agent._setup()
    b = _batch()
    loss, grads = q_loss_and_grads(agent.params_, agent.target_params_, TINY, b, 0.97)
    # shift rewards so the target equals the current prediction
    y0 = double_q_target(b, agent.params_, agent.target_params_, TINY, 0.97)
    q = net.forward(agent.params_, TINY, b["frames"][:3], b["vecs"][:3], net.zero_state(TINY, 6))[0]
    pred = q[-1, np.arange(6), b["actions"][-1]]
    b["rewards"] = b["rewards"].astype(np.float64)
    b["rewards"][-1] += pred - y0
    before = net.copy_params(agent.params_)
    loss = agent.train_step(b)
    assert loss == pytest.approx(0.0, abs=1e-6)
    for k in before:
        assert np.allclose(agent.params_[k], before[k], atol=1e-7)


def test_toy_regression_loss_monotone():
    from drqn_nav.neural.layers import fully_connected, fully_connected_backward
    from drqn_nav.neural.optim import AdamState, adam_step

    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 5))
    y = x @ np.array([1.0, -2.0, 0.5, 3.0, 0.0]) + 0.7
    params, state = {"W": np.zeros((1, 5)), "b": np.zeros(1)}, AdamState()
    losses = []
    for _ in range(100):
        err = fully_connected(x, params["W"], params["b"])[:, 0] - y
        losses.append(np.mean(err ** 2))
        _, dw, db = fully_connected_backward((2 / len(y) * err)[:, None], x, params["W"])
        params, state = adam_step(params, {"W": dw, "b": db}, state, lr=1e-2)
    assert np.all(np.diff(losses) < 0)


def test_loss_decreases_on_fixed_batch():
    agent = small_agent(lr=1e-3)
    agent.set_params(config=replace(agent.config, target_sync=10**6))
    agent._setup()
    b = _batch(1)
    losses = [agent.train_step(b) for _ in range(100)]
    assert np.mean(losses[-10:]) < 0.2 * np.mean(losses[:10])


def test_sync_target_is_deep_copy():
    agent = small_agent()
    agent._setup()
    agent.sync_target()
    b = _batch(2)
    for k in agent.params_:
        assert np.array_equal(agent.params_[k], agent.target_params_[k])
    snap = net.copy_params(agent.target_params_)
    agent.train_step(b)
    assert all(np.array_equal(snap[k], agent.target_params_[k]) for k in snap)


def test_sync_period():
    agent = small_agent()
    agent._setup()
    b = _batch(3)
    syncs = []
    for i in range(1, 12):
        agent.train_step(b)
        syncs.append(all(np.array_equal(agent.params_[k], agent.target_params_[k]) for k in agent.params_))
    assert [i + 1 for i, s in enumerate(syncs) if s] == [5, 10]


def test_non_finite_loss_aborts():
    agent = small_agent()
    agent._setup()
    b = _batch(4)
    b["rewards"] = np.full_like(b["rewards"], np.nan)
    with pytest.raises(TrainingDiverged):
        agent.train_step(b)


def test_smoke_run_is_deterministic(tmp_path):
    a = small_agent()
    a.set_params(out_dir=tmp_path / "a")
    a.fit(log_path=tmp_path / "a.csv")
    b = small_agent()
    b.set_params(out_dir=tmp_path / "b")
    b.fit(log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a" / "ckpt_final.bin").read_bytes() == (tmp_path / "b" / "ckpt_final.bin").read_bytes()
    assert (tmp_path / "a" / "ckpt_60.bin").exists()
    rows = read_train_log(tmp_path / "a.csv")
    assert [r[0] for r in rows] == [60, 120]
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == \
        "step,level,epsilon,loss,eval_sr,eval_er,eval_rt,eval_aavc"
    assert len(a.buffer_) <= 100


def test_estimator_api(tmp_path):
    agent = small_agent()
    params = agent.get_params()
    assert set(params) == {"config", "arch", "scenario", "camera", "seed", "out_dir", "env_kwargs"}
    agent.fit()
    agent.save(tmp_path / "m.bin")
    other = small_agent().load(tmp_path / "m.bin")
    from drqn_nav.env import NavEnv
    from drqn_nav.world import generate_scenario
    env = agent.make_env()
    obs = [env.reset(generate_scenario("random", 1, 0, agent.scenario))]
    for _ in range(3):
        o, _, st_ = env.step(14)
        obs.append(o)
    assert np.array_equal(agent.predict(obs), other.predict(obs))


def test_train_log_round_trip(tmp_path):
    rows = [(10, 0, 0.5, 12.5, 0.25, -100.0, None, 0.1)]
    write_train_log(tmp_path / "l.csv", rows)
    back = read_train_log(tmp_path / "l.csv")
    assert back[0][0] == 10 and back[0][6] is None
    assert "NA" in (tmp_path / "l.csv").read_text()
