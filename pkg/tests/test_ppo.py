import math

import numpy as np
import pytest

from qdplan import mlp
from qdplan.ppo import (
    ActorCritic,
    Adam,
    GoalEnvBatch,
    PpoConfig,
    RunningNorm,
    TrainingDivergedError,
    compute_gae,
    fold_normalization,
    gaussian_logp,
    ppo_loss_and_grad,
    ppo_update,
    sample_goal,
    sample_goal_tries,
    train,
)
from qdplan.policy import PolicyHandle, act
from qdplan.world import MazeSpec, builtin_maze

# upper 1% points of the chi-square distribution
CHI2_99 = {9: 21.666, 11: 24.725}


# --- goal sampling -------------------------------------------------------------

def test_sample_goal_uniform_on_disk(open_maze):
    rng = np.random.default_rng(0)
    center, R, n = (16.0, 16.0), 5.0, 100_000
    pts = np.array([sample_goal(center, R, open_maze, rng) for _ in range(n)])
    dx, dy = pts[:, 0] - center[0], pts[:, 1] - center[1]
    r2 = (dx * dx + dy * dy) / R**2
    assert r2.max() <= 1.0
    # uniform on the disk <=> r^2 and angle are independent uniforms
    radial = np.histogram(r2, bins=10, range=(0, 1))[0]
    angular = np.histogram(np.arctan2(dy, dx), bins=12, range=(-math.pi, math.pi))[0]
    for counts, df in ((radial, 9), (angular, 11)):
        expected = n / len(counts)
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < CHI2_99[df]


def test_sample_goal_no_rejections_far_from_walls():
    maze = builtin_maze("trap2d")
    rng = np.random.default_rng(1)
    for _ in range(500):
        goal, rejections = sample_goal_tries((25.0, 25.0), 3.0, maze, rng)
        assert rejections == 0 and math.dist(goal, (25.0, 25.0)) <= 3.0


def test_sample_goal_enclosed_falls_back():
    walls = ((0, 0, 10, 4.9), (0, 5.1, 10, 10), (0, 4.9, 4.9, 5.1), (5.1, 4.9, 10, 5.1))
    maze = MazeSpec(10.0, 10.0, walls, (5.0, 5.0, 0.0), "box")
    goal, tries = sample_goal_tries((5.0, 5.0), 3.0, maze, np.random.default_rng(0), max_tries=1000)
    # the free pocket is tiny, so rejection sampling almost surely exhausts its tries
    assert tries == 1000 and goal == (5.0, 5.0)


def test_sample_goal_rejects_bad_radius(open_maze):
    with pytest.raises(ValueError):
        sample_goal((1, 1), 0.0, open_maze, np.random.default_rng(0))


# --- GAE -------------------------------------------------------------------------

def gae_oracle(r, v, done, gamma, lam):
    T = len(r)
    adv = np.zeros(T)
    for t in range(T):
        total, w = 0.0, 1.0
        for k in range(t, T):
            live = 1.0 - done[k]
            delta = r[k] + gamma * v[k + 1] * live - v[k]
            total += w * delta
            if done[k]:
                break
            w *= gamma * lam
        adv[t] = total
    return adv, adv + v[:T]


def test_gae_single_step():
    adv, ret = compute_gae([1.0], [0.0, 0.0], [1.0], 1.0, 1.0)
    assert adv[0] == 1.0 and ret[0] == 1.0


def test_gae_gamma_zero_is_td_residual():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=6), rng.normal(size=7)
    adv, _ = compute_gae(r, v, np.zeros(6), 0.0, 0.95)
    assert np.array_equal(adv, r - v[:6])


@pytest.mark.parametrize("seed", range(20))
def test_gae_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    T = 5 if seed < 5 else int(rng.integers(1, 33))
    r, v = rng.normal(size=T), rng.normal(size=T + 1)
    done = (rng.random(T) < 0.2).astype(float)
    gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
    adv, ret = compute_gae(r, v, done, gamma, lam)
    oa, orr = gae_oracle(r, v, done, gamma, lam)
    assert np.max(np.abs(adv - oa)) <= 1e-10
    assert np.max(np.abs(ret - orr)) <= 1e-10


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(3)
    r, v, d = rng.normal(size=(9, 3)), rng.normal(size=(10, 3)), (rng.random((9, 3)) < 0.3).astype(float)
    adv, _ = compute_gae(r, v, d, 0.99, 0.95)
    for k in range(3):
        assert np.allclose(adv[:, k], compute_gae(r[:, k], v[:, k], d[:, k], 0.99, 0.95)[0], atol=1e-12)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0, 0.0], [0.0, 0.0], 0.9, 0.9)


# --- loss and gradient ---------------------------------------------------------------

def tiny_batch(ac, theta, rng, n=8, spread=0.05):
    pi, log_std, _ = ac.split(theta)
    obs = rng.normal(size=(n, 7))
    mean, _ = mlp.forward(pi, ac.pi_shapes, obs)
    u = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    logp = gaussian_logp(u, mean, log_std)
    return {"obs": obs, "u": u, "logp_old": logp + rng.normal(scale=spread, size=n),
            "adv": rng.normal(size=n), "ret": rng.normal(size=n)}


@pytest.mark.parametrize("spread,clip", [(0.05, 0.2), (0.6, 0.2), (0.3, 1e9)])
def test_gradient_matches_finite_differences(spread, clip):
    ac = ActorCritic(7, (4,))
    rng = np.random.default_rng(42)
    theta = ac.init(rng) + rng.normal(scale=0.3, size=ac.size)
    batch = tiny_batch(ac, theta, rng, spread=spread)
    f = lambda th: ppo_loss_and_grad(th, ac, batch, clip, 0.5, 0.01)[0]
    _, grad, _ = ppo_loss_and_grad(theta, ac, batch, clip, 0.5, 0.01)
    h = 1e-6
    fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(ac.size)])
    rel = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
    assert rel.max() <= 1e-4


def test_zero_advantage_has_no_policy_gradient():
    ac = ActorCritic(7, (4,))
    rng = np.random.default_rng(0)
    theta = ac.init(rng)
    batch = tiny_batch(ac, theta, rng)
    batch["adv"] = np.zeros(8)
    _, grad, stats = ppo_loss_and_grad(theta, ac, batch, 0.2, 0.0, 0.0)
    assert np.all(grad[: ac.n_pi + 2] == 0.0)
    assert stats["pg_loss"] == 0.0


def test_infinite_clip_is_plain_importance_objective():
    ac = ActorCritic(7, (4,))
    rng = np.random.default_rng(1)
    theta = ac.init(rng)
    batch = tiny_batch(ac, theta, rng, spread=1.0)
    pi, log_std, _ = ac.split(theta)
    mean, _ = mlp.forward(pi, ac.pi_shapes, batch["obs"])
    ratio = np.exp(gaussian_logp(batch["u"], mean, log_std) - batch["logp_old"])
    _, _, stats = ppo_loss_and_grad(theta, ac, batch, np.inf, 0.5, 0.0)
    assert stats["pg_loss"] == pytest.approx(-np.mean(ratio * batch["adv"]), rel=1e-12)


def test_nonfinite_loss_aborts():
    ac = ActorCritic(7, (4,))
    rng = np.random.default_rng(0)
    theta = ac.init(rng)
    batch = tiny_batch(ac, theta, rng, n=16)
    batch["ret"][3] = np.nan
    cfg = PpoConfig(n_envs=1, steps_per_rollout=16, total_steps=16, minibatches=2)
    with pytest.raises(TrainingDivergedError):
        ppo_update(theta, ac, batch, cfg, Adam(ac.size, 1e-3), rng)


def test_update_keeps_params_finite_and_moves():
    ac = ActorCritic(7, (8,))
    rng = np.random.default_rng(5)
    theta = ac.init(rng)
    batch = tiny_batch(ac, theta, rng, n=64)
    cfg = PpoConfig(n_envs=1, steps_per_rollout=64, total_steps=64)
    new, stats = ppo_update(theta, ac, batch, cfg, Adam(ac.size, 1e-3), rng)
    assert np.all(np.isfinite(new)) and not np.array_equal(new, theta)
    assert set(stats) == {"pg_loss", "v_loss", "entropy", "approx_kl", "clip_frac"}


# --- config, env, training loop ---------------------------------------------------------

def test_config_invariants():
    for kw in ({"gamma": 0.0}, {"gamma": 1.5}, {"gae_lambda": -0.1}, {"clip_eps": 0.0}, {"goal_radius": 0.0},
               {"goal_mode": "other"}, {"total_steps": 10}):
        with pytest.raises(ValueError):
            PpoConfig(**kw)


def test_env_observation_has_no_maze_features():
    maze = builtin_maze("trap2d")
    env = GoalEnvBatch(4, maze, PpoConfig(), np.random.default_rng(0))
    o = env.obs()
    assert o.shape == (4, 7)
    assert np.allclose(o[:, :2], env.goal - env.pos)


def test_one_batch_gives_one_update(open_maze):
    cfg = PpoConfig(n_envs=4, steps_per_rollout=64, total_steps=256, hidden=(16, 16))
    _, log = train(cfg, open_maze)
    assert len(log) == 1 and log.rows[0].steps == 256


def test_training_is_deterministic(open_maze, tmp_path):
    cfg = PpoConfig(n_envs=4, steps_per_rollout=128, total_steps=2048, hidden=(16, 16), seed=3)
    p1, l1 = train(cfg, open_maze)
    p2, l2 = train(cfg, open_maze)
    assert np.array_equal(p1.params.flat_weights, p2.params.flat_weights)
    assert l1.write_csv(tmp_path / "a.csv").read_bytes() == l2.write_csv(tmp_path / "b.csv").read_bytes()
    steps = l1.column("steps")
    assert np.all(np.diff(steps) > 0)


def test_resample_mode_and_checkpoints(open_maze, tmp_path):
    cfg = PpoConfig(n_envs=4, steps_per_rollout=32, total_steps=1024, hidden=(16,), goal_mode="resample",
                    checkpoint_every=4, normalize_obs=True)
    _, log = train(cfg, open_maze, checkpoint_dir=tmp_path)
    assert len(log) == 8
    assert sorted(p.name for p in tmp_path.glob("*.gcpol")) == ["checkpoint_00004.gcpol", "checkpoint_00008.gcpol"]


def test_fold_normalization_is_equivalent():
    ac = ActorCritic(7, (6,))
    rng = np.random.default_rng(9)
    theta = ac.init(rng) + rng.normal(scale=0.2, size=ac.size)
    norm = RunningNorm(7)
    norm.update(rng.normal(loc=3.0, scale=2.0, size=(100, 7)))
    raw = rng.normal(size=(5, 7))
    params = ac.policy_params(theta)
    folded = fold_normalization(params, norm)
    want = np.tanh(mlp.forward(params.net_weights, params.layer_shapes, norm(raw))[0])
    for k in range(5):
        got = act(PolicyHandle.neural(folded), raw[k])
        assert got == pytest.approx(want[k], abs=1e-12)


def test_default_training_reaches_goals(trained_runs):
    _, log = trained_runs(0)
    rate = log.column("success_rate")
    rate = rate[np.isfinite(rate)]
    k = max(1, len(rate) // 10)
    assert rate[-k:].mean() >= 0.8
