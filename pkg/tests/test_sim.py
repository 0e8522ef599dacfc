import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import constant_bw, still_fov, uniform_manifest
from pcstream.errors import ConfigError, EpisodeFinished
from pcstream.qoe import qoe_score
from pcstream.sim import LOG_COLUMNS, PlayerConfig, StreamingEnv, feature_length, state_vector, write_episode_log
from pcstream.traces import BandwidthModel, ComputeBudget, FovModel, generate_synthetic_bandwidth, generate_synthetic_fov


def one_tile_env(uncomp, mbps=8.0, chunks=4, **cfg):
    m = uniform_manifest(chunks=chunks, levels=1, comp=uncomp // 4, uncomp=uncomp)
    config = PlayerConfig(random_start=False, **cfg)
    return StreamingEnv(m, constant_bw(mbps), still_fov(), ComputeBudget(1e9), config)


def test_fresh_reset():
    env = one_tile_env(200_000)
    s = env.reset(0)
    assert s.buffer_ms == 0.0 and s.last_level is None and s.chunks_remaining == 4
    assert env.predicted_visible == (0,)


@pytest.mark.parametrize("buffer_ms, uncomp, want_buffer, want_rebuffer", [
    (1000.0, 200_000, 1130.0, 0.0),   # 200 ms download
    (100.0, 400_000, 330.0, 0.3),     # 400 ms download
])
def test_buffer_recurrence(buffer_ms, uncomp, want_buffer, want_rebuffer):
    env = one_tile_env(uncomp)
    env.reset(0)
    env.buffer_ms, env.playing = buffer_ms, True
    _, out = env.step(1)  # level 1 uncompressed: no decode
    assert out.decode_s == 0.0
    assert env.buffer_ms == pytest.approx(want_buffer, abs=1e-9)
    assert out.outcome.rebuffer == pytest.approx(want_rebuffer, abs=1e-12)


def test_full_buffer_clamps_and_idles():
    env = one_tile_env(1000, mbps=1e6)
    env.reset(0)
    env.buffer_ms, env.playing = 5000.0, True
    _, out = env.step(1)
    assert env.buffer_ms == 5000.0
    assert out.idle_s == pytest.approx(0.33 - out.download_s, abs=1e-9)


def test_decode_time_and_penalty():
    m = uniform_manifest(chunks=2, levels=1, comp=1000, uncomp=4000, decode=3.0)
    env = StreamingEnv(m, constant_bw(1e6), still_fov(), ComputeBudget(2.0),
                       PlayerConfig(random_start=False))
    env.reset(0)
    # budget from predicted bandwidth is generous in bytes, compute 2 < cost 3: greedy flips
    _, out = env.step(0)
    assert out.plan.flipped == (0,) and out.decode_s == 0.0
    env2 = StreamingEnv(m, constant_bw(1e6), still_fov(), ComputeBudget(4.0), PlayerConfig(random_start=False))
    env2.reset(0)
    _, out = env2.step(0)
    assert out.decode_s == pytest.approx(3.0 / 4.0 * 0.33)
    # compute-feasible plans decode within one chunk, so no decode penalty
    assert out.outcome.decode_penalty == 0.0


def test_startup_is_not_rebuffer():
    env = one_tile_env(400_000, startup_threshold_ms=660.0)
    env.reset(0)
    _, a = env.step(1)
    _, b = env.step(1)
    assert a.outcome.rebuffer == 0.0 and b.outcome.rebuffer == 0.0
    assert env.startup_s == pytest.approx(a.download_s + a.decode_s + b.download_s + b.decode_s)
    assert env.playing


def make_env(seed, chunks=12, levels=3, mbps=60.0, vol=0.8, compute=6.0, cap=5000.0):
    m = uniform_manifest(2, 2, 2, chunks=chunks, levels=levels, comp=20_000, uncomp=80_000, decode=0.6)
    bw = generate_synthetic_bandwidth(seed, BandwidthModel(mean_mbps=mbps, volatility=vol, switch_prob=0.05), 60.0)
    fov = generate_synthetic_fov(seed, FovModel(start=(-2.0, 1.0, 1.0, 0, 0, 0), angle_step=10.0), 60.0)
    return StreamingEnv(m, bw, fov, ComputeBudget(compute),
                        PlayerConfig(buffer_capacity_ms=cap, seed=seed))


@given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 400.0), st.sampled_from([330.0, 1000.0, 5000.0]))
def test_conservation_and_bounds(seed, mbps, cap):
    env = make_env(seed % 1000, mbps=mbps, cap=cap)
    rng = np.random.default_rng(seed)
    s = env.reset(seed)
    while not env.done:
        s, out = env.step(int(rng.integers(env.n_actions)))
        assert 0.0 <= s.buffer_ms <= cap
        assert out.outcome.rebuffer >= 0 and out.download_s >= 0
    lhs = env.wall_clock_s
    rhs = env.played_s + env.rebuffer_s + env.startup_s
    assert abs(lhs - rhs) <= 1e-6


def test_reset_is_deterministic():
    env = make_env(3)
    a = env.reset(42)
    seq_a = [env.step(i % env.n_actions)[1].reward for i in range(12)]
    b = env.reset(42)
    seq_b = [env.step(i % env.n_actions)[1].reward for i in range(12)]
    assert a == b and seq_a == seq_b


def test_step_after_end_raises():
    env = one_tile_env(1000, chunks=1)
    env.reset(0)
    env.step(0)
    assert env.done
    with pytest.raises(EpisodeFinished):
        env.step(0)
    with pytest.raises(EpisodeFinished):
        env.predicted_quality()


def test_short_trace_rejected():
    m = uniform_manifest(chunks=10)
    with pytest.raises(ConfigError):
        StreamingEnv(m, constant_bw(10.0, duration=2.0), still_fov(), ComputeBudget(1.0))
    with pytest.raises(ConfigError):
        StreamingEnv(m, constant_bw(10.0), still_fov(duration=2.0), ComputeBudget(1.0))


def test_player_config_validation():
    with pytest.raises(ConfigError):
        PlayerConfig(buffer_capacity_ms=100.0)
    with pytest.raises(ConfigError):
        PlayerConfig(fov_predictor="oracle")


def test_state_vector_layout():
    m = uniform_manifest(levels=5)
    env = StreamingEnv(m, constant_bw(50.0), still_fov(), ComputeBudget(100.0), PlayerConfig(random_start=False))
    s = env.reset(0)
    v = state_vector(s)
    assert v.size == feature_length(10) == 35
    assert np.all(v[:12] == 0.0)
    assert v[-1] == 1.0
    env.buffer_ms = 5000.0
    s, _ = env.step(3)
    v = state_vector(s)
    assert v[-3] == 1.0
    assert v[12 + 10 + 3] == 1.0 and v[12 + 10:12 + 20].sum() == 1.0
    assert v[11] > 0


def test_reward_is_qoe_and_log_matches():
    env = make_env(5)
    env.reset(1)
    total = 0.0
    while not env.done:
        _, out = env.step(2)
        assert out.reward == qoe_score(out.outcome, out.weights)
        total += out.reward
    assert len(env.log) == 12 and list(env.log[0]) == LOG_COLUMNS
    assert math.isclose(sum(r["qoe"] for r in env.log), total)


def test_fast_link_never_rebuffers():
    env = make_env(7, mbps=1e6, vol=0.0, compute=1e9)
    env.reset(0)
    while not env.done:
        _, out = env.step(env.n_actions - 1)
        assert out.outcome.rebuffer == 0.0


def test_predicted_quality_shape():
    env = make_env(2)
    env.reset(0)
    q, w = env.predicted_quality()
    assert q.shape == (env.n_actions,)
    np.testing.assert_array_equal(q[:3], q[3:])
    assert np.all(np.diff(q[:3]) > 0)


def test_episode_log_csv(tmp_path):
    env = make_env(4)
    env.reset(0)
    while not env.done:
        env.step(0)
    p = tmp_path / "log.csv"
    write_episode_log(env.log, p, "spec_hash=abc")
    lines = p.read_text().splitlines()
    assert lines[0] == "# spec_hash=abc" and lines[1] == ",".join(LOG_COLUMNS)
    assert len(lines) == 14


def test_quality_floor_raises_low_actions():
    m = uniform_manifest(chunks=3, levels=3)
    env = StreamingEnv(m, constant_bw(1e3), still_fov(), ComputeBudget(1e9),
                       PlayerConfig(random_start=False, quality_floor=2))
    env.reset(0)
    s, out = env.step(0)       # level 1 compressed -> level 2 compressed
    assert out.outcome.level == 2 and s.last_level == 1
    s, out = env.step(m.levels)  # level 1 uncompressed -> level 2 uncompressed
    assert out.outcome.level == 2 and s.last_level == m.levels + 1
    assert out.outcome.level_change == float(m.levels)
    _, out = env.step(2)       # above the floor: untouched
    assert out.outcome.level == 3


def test_quality_floor_validation():
    with pytest.raises(ConfigError):
        PlayerConfig(quality_floor=0)
    with pytest.raises(ConfigError):
        StreamingEnv(uniform_manifest(levels=2), constant_bw(10), still_fov(), ComputeBudget(1),
                     PlayerConfig(quality_floor=3))
