import numpy as np
import pytest

from qdplan.baseline import (
    MeConfig,
    evaluate_candidate,
    evaluate_candidates,
    iterations_for_budget,
    load_elites,
    me_step,
    random_params,
    run_map_elites,
    save_elites,
)
from qdplan.policy import PolicyParams
from qdplan.world import DEFAULT_REWARD, builtin_maze, initial_state, reward_lower_bound

SMALL = dict(batch_size=16, init_pop=16, episode_len=60, hidden=(16, 16))


def test_config_validation():
    for kw in ({"sigma": 0.0}, {"batch_size": 0}, {"iterations": -1}, {"episode_len": 0}):
        with pytest.raises(ValueError):
            MeConfig(**kw)


def test_zero_weights_stay_at_start(open_maze):
    cfg = MeConfig()
    params = PolicyParams(np.zeros_like(random_params(cfg.shapes, np.random.default_rng(0))), cfg.shapes)
    obj, desc = evaluate_candidate(params, open_maze, 250)
    assert desc == initial_state(open_maze).position
    assert obj == pytest.approx(250 * DEFAULT_REWARD.c_alive * DEFAULT_REWARD.r_alive)


def test_objective_bounds_and_determinism():
    maze = builtin_maze("trap2d")
    cfg = MeConfig()
    rng = np.random.default_rng(3)
    flats = np.stack([random_params(cfg.shapes, rng, 2.0) for _ in range(20)])
    objs, descs = evaluate_candidates(flats, cfg.shapes, maze, 250)
    hi = 250 * DEFAULT_REWARD.c_alive * DEFAULT_REWARD.r_alive
    lo = 250 * reward_lower_bound(DEFAULT_REWARD, maze)
    assert np.all(np.isfinite(objs)) and np.all(objs <= hi) and np.all(objs >= lo)
    for k in range(20):
        assert maze.is_free(*descs[k])
        obj, desc = evaluate_candidate(PolicyParams(flats[k], cfg.shapes), maze, 250)
        assert obj == objs[k] and desc == tuple(descs[k])


def test_iterations_zero_is_init_population(open_maze):
    cfg = MeConfig(iterations=0, **SMALL)
    run = run_map_elites(open_maze, cfg, (32, 32))
    assert len(run.archive) >= 1 and len(run.log) == 1
    assert run.total_rollouts == 16 and run.total_steps == 16 * 60


def test_tiny_sigma_leaves_archive_unchanged(open_maze):
    run = run_map_elites(open_maze, MeConfig(iterations=0, sigma=1e-300, **SMALL), (32, 32))
    before = run.archive.items()
    me_step(run, np.random.default_rng(0), open_maze)
    assert run.archive.items() == before


def test_me_step_needs_elites(open_maze):
    run = run_map_elites(open_maze, MeConfig(iterations=0, **SMALL), (32, 32))
    run.archive._cells.clear()
    with pytest.raises(ValueError):
        me_step(run, np.random.default_rng(0), open_maze)


def test_budget_helper():
    cfg = MeConfig(batch_size=64, init_pop=64, episode_len=250)
    assert iterations_for_budget(64 * 250, cfg) == 0
    assert iterations_for_budget(64 * 250 * 11 + 100, cfg) == 10
    assert iterations_for_budget(0, cfg) == 0


def test_open_maze_two_hundred_iterations(open_maze):
    cfg = MeConfig(iterations=200, seed=1)
    run = run_map_elites(open_maze, cfg, (32, 32))
    cov = [r.coverage for r in run.log]
    qd = [r.qd_score_offset for r in run.log]
    assert len(run.log) == 201
    assert all(b >= a for a, b in zip(cov, cov[1:])) and cov[-1] > cov[0]
    assert all(b >= a for a, b in zip(qd, qd[1:]))
    assert run.total_steps == 200 * 64 * 250 + 64 * 250 == run.log[-1].sim_steps
    assert run.total_rollouts == 200 * 64 + 64
    # every elite re-evaluates to its archived record
    for cell, e in run.archive.items()[::25]:
        obj, desc = evaluate_candidate(run.policy(e.occupant_id), open_maze, 250)
        assert obj == e.objective and desc == e.achieved and run.archive.cell_of(desc) == cell


def test_doubling_iterations_extends_the_run():
    maze = builtin_maze("trap2d")
    short = run_map_elites(maze, MeConfig(iterations=10, **SMALL), (16, 16))
    long = run_map_elites(maze, MeConfig(iterations=20, **SMALL), (16, 16))
    assert long.log[:11] == short.log
    assert long.log[-1].qd_score_offset >= short.log[-1].qd_score_offset


def test_elites_round_trip_and_log(tmp_path):
    maze = builtin_maze("trap2d")
    run = run_map_elites(maze, MeConfig(iterations=3, **SMALL), (16, 16))
    assert set(run.params) == {e.occupant_id for e in run.archive.elites()}
    loaded, shapes = load_elites(save_elites(run, tmp_path / "elites.npz"))
    assert shapes == run.config.shapes and set(loaded) == set(run.params)
    for oid, p in loaded.items():
        assert np.array_equal(p.flat_weights, run.params[oid])
    text = run.write_log_csv(tmp_path / "log.csv").read_text().splitlines()
    assert text[0].startswith("iteration,evaluations,sim_steps") and len(text) == 5


def test_threads_do_not_change_results():
    maze = builtin_maze("trap2d")
    a = run_map_elites(maze, MeConfig(iterations=3, **SMALL), (16, 16), threads=1)
    b = run_map_elites(maze, MeConfig(iterations=3, **SMALL), (16, 16), threads=3)
    assert a.archive.items() == b.archive.items()
