import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenejoint.metrics import (
    METHODS,
    EvalInput,
    MetricsConfig,
    assemble_combined_joint,
    assemble_scene_joint,
    assemble_straight_marginal,
    avg_min_fde,
    collision_rate,
    detect_collision,
    displacement_errors,
    enumerate_joint_worlds,
    evaluate_method,
    first_collision,
    per_agent_min_metrics,
)

CFG = MetricsConfig()


def endpoint_fixture(errors):
    """pred [A, K, 1, 2] whose endpoint error for agent a, mode k is errors[a][k]; gt at the origin."""
    e = np.asarray(errors, dtype=np.float64)
    pred = np.zeros(e.shape + (1, 2))
    pred[..., 0, 0] = e
    return pred, np.zeros((e.shape[0], 1, 2))


def reversed_loop_collision(world, dist_safe):
    """Independent oracle: loops run backwards, pairs compared with squared distances."""
    n, t_len = world.shape[:2]
    for t in reversed(range(t_len)):
        for j in reversed(range(n)):
            for i in reversed(range(j)):
                dx, dy = world[i, t] - world[j, t]
                if dx * dx + dy * dy < dist_safe * dist_safe:
                    return True
    return False


def test_config_rejects_nonpositive():
    with pytest.raises(ValueError):
        MetricsConfig(dist_safe=0)
    with pytest.raises(ValueError):
        MetricsConfig(miss_threshold=-1)


def test_perfect_prediction():
    gt = np.random.default_rng(0).normal(size=(3, 5, 2))
    pred = np.repeat(gt[:, None], 6, axis=1)
    m = per_agent_min_metrics(pred, gt, CFG)
    np.testing.assert_array_equal(m.min_ade, 0)
    np.testing.assert_array_equal(m.min_fde, 0)
    assert not m.missed.any()
    assert avg_min_fde(pred, gt) == (0.0, 0)


def test_constant_offset_single_mode():
    gt = np.zeros((1, 4, 2))
    pred = np.full((1, 1, 4, 2), [3.0, 0.0])
    m = per_agent_min_metrics(pred, gt, CFG)
    assert m.min_ade[0] == pytest.approx(3.0) and m.min_fde[0] == pytest.approx(3.0) and m.missed[0]


def test_per_agent_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, k, t = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 9)
        pred, gt = rng.normal(size=(a, k, t, 2)) * 3, rng.normal(size=(a, t, 2)) * 3
        m = per_agent_min_metrics(pred, gt, CFG)
        for i in range(a):
            ades = [np.mean([math.dist(pred[i, kk, s], gt[i, s]) for s in range(t)]) for kk in range(k)]
            fdes = [math.dist(pred[i, kk, -1], gt[i, -1]) for kk in range(k)]
            assert m.min_ade[i] == pytest.approx(min(ades), abs=1e-12)
            assert m.min_fde[i] == pytest.approx(min(fdes), abs=1e-12)
            assert m.missed[i] == (min(fdes) > 2.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        per_agent_min_metrics(np.zeros((2, 3, 4, 2)), np.zeros((2, 5, 2)), CFG)


def test_endpoint_is_last_valid_step():
    gt = np.zeros((1, 3, 2))
    pred = np.zeros((1, 1, 3, 2))
    pred[0, 0, 1] = (4.0, 0.0)
    pred[0, 0, 2] = (9.0, 0.0)
    valid = np.array([[True, True, False]])
    ade, fde = displacement_errors(pred, gt, valid)
    assert fde[0, 0] == 4.0 and ade[0, 0] == 2.0


def test_avg_min_fde_fixture():
    pred, gt = endpoint_fixture([[1, 3], [5, 1]])
    assert avg_min_fde(pred, gt) == (2.0, 1)


def test_avg_min_fde_tie_goes_to_lowest_mode():
    pred, gt = endpoint_fixture([[2, 1], [1, 2]])
    assert avg_min_fde(pred, gt)[1] == 0


def test_avg_min_fde_no_agents():
    with pytest.raises(ValueError):
        avg_min_fde(np.zeros((0, 2, 3, 2)), np.zeros((0, 3, 2)))


def test_straight_marginal_fixture():
    pred, gt = endpoint_fixture([[1, 3], [5, 1]])
    world, k = assemble_straight_marginal(pred, gt, 0)
    assert k == 0
    assert np.hypot(*world[:, -1].T).mean() == pytest.approx(3.0)
    with pytest.raises(IndexError):
        assemble_straight_marginal(pred, gt, 2)


def test_single_mode_worlds_coincide():
    rng = np.random.default_rng(2)
    pred, gt = rng.normal(size=(3, 1, 4, 2)), rng.normal(size=(3, 4, 2))
    for w in (assemble_straight_marginal(pred, gt, 1)[0], assemble_scene_joint(pred, gt)[0], assemble_combined_joint(pred, gt)[0]):
        np.testing.assert_array_equal(w, pred[:, 0])


def test_combined_joint_fixture():
    pred, gt = endpoint_fixture([[1, 3], [5, 1]])
    world, choice = assemble_combined_joint(pred, gt)
    assert list(choice) == [0, 1]
    assert np.hypot(*world[:, -1].T).mean() == pytest.approx(1.0)


def test_enumeration_matches_argmin_and_counts():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, k = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        fde = rng.uniform(0, 10, size=(a, k))
        res = enumerate_joint_worlds(fde)
        assert res.evaluated == k**a
        assert res.choice == tuple(np.argmin(fde, axis=1))
        assert res.mean_fde == pytest.approx(fde.min(axis=1).mean(), abs=1e-12)


def test_enumeration_refused_beyond_six_agents():
    with pytest.raises(ValueError):
        enumerate_joint_worlds(np.zeros((7, 2)))
    assert enumerate_joint_worlds(np.zeros((6, 2))).evaluated == 64


def test_collision_fixtures():
    t = np.arange(10, dtype=float)
    one = np.stack([t, 0 * t], -1)[None]
    assert not detect_collision(one, CFG)
    parallel = np.stack([np.stack([t, 0 * t], -1), np.stack([t, 0 * t + 10], -1)])
    assert not detect_collision(parallel, CFG)
    meet = np.stack([np.stack([t, 0 * t], -1), np.stack([t[::-1], 0 * t], -1)])
    assert detect_collision(meet, CFG)
    assert first_collision(meet, 2.0)[0] == 4


def test_collision_uses_strict_threshold():
    world = np.array([[[0.0, 0.0]], [[2.0, 0.0]]])
    assert not detect_collision(world, 2.0)
    assert detect_collision(world, 2.0 + 1e-9)


def test_collision_matches_reversed_oracle_on_random_worlds():
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(1000):
        a, t = int(rng.integers(1, 9)), int(rng.integers(1, 61))
        world = rng.uniform(-15, 15, size=(a, t, 2))
        got = detect_collision(world, CFG)
        assert got == reversed_loop_collision(world, 2.0)
        hits += got
    assert 0 < hits < 1000


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_collision_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    world = rng.uniform(-10, 10, size=(int(rng.integers(2, 6)), 5, 2))
    base = detect_collision(world, CFG)
    assert detect_collision(world[rng.permutation(len(world))], CFG) == base
    th = rng.uniform(-np.pi, np.pi)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moved = world @ rot.T + rng.uniform(-100, 100, 2)
    # rounding can only matter for pairs sitting exactly on the threshold
    d = np.hypot(*(world[:, None] - world[None]).transpose(3, 0, 1, 2))
    if np.all(np.abs(d - 2.0) > 1e-9):
        assert detect_collision(moved, CFG) == base


def test_collision_rate_counts():
    hit = np.array([[[0.0, 0.0]], [[0.5, 0.0]]])
    miss = np.array([[[0.0, 0.0]], [[50.0, 0.0]]])
    assert collision_rate([miss] * 3, CFG) == 0
    assert collision_rate([hit] * 2, CFG) == 1
    assert collision_rate([miss, hit, miss, miss], CFG) == 0.25
    with pytest.raises(ValueError):
        collision_rate([], CFG)


def random_items(rng, n, identical_modes=False):
    items = []
    for i in range(n):
        a, k, t = int(rng.integers(1, 6)), 6, int(rng.integers(2, 10))
        pred = rng.normal(size=(a, k, t, 2)) * 5
        if identical_modes:
            pred[:] = pred[:, :1]
        gt = rng.normal(size=(a, t, 2)) * 5
        valid = rng.random((a, t)) < 0.8
        valid[:, -1] |= ~valid.any(axis=1)
        items.append(EvalInput(f"s{i:04d}", pred, gt, valid, int(rng.integers(a))))
    return items


def test_ordering_chain_per_scene():
    rng = np.random.default_rng(5)
    items = random_items(rng, 1000)
    reps = {m: evaluate_method(items, m, CFG) for m in METHODS}
    for c, s, m in zip(reps["combined_joint"].rows, reps["scene_joint"].rows, reps["straight_marginal"].rows):
        assert c.avg_min_fde <= s.avg_min_fde + 1e-9 <= m.avg_min_fde + 2e-9
    agg = {m: r.aggregates["avg_min_fde"] for m, r in reps.items()}
    assert agg["combined_joint"] <= agg["scene_joint"] + 1e-9 <= agg["straight_marginal"] + 2e-9


def test_scene_joint_row_equals_avg_min_fde():
    rng = np.random.default_rng(6)
    for it in random_items(rng, 50):
        row = evaluate_method([it], "scene_joint", CFG).rows[0]
        value, k = avg_min_fde(it.pred, it.gt, it.valid)
        assert row.avg_min_fde == pytest.approx(value, abs=1e-12) and row.best_world_index == k


def test_identical_modes_give_identical_reports():
    items = random_items(np.random.default_rng(7), 30, identical_modes=True)
    reps = [evaluate_method(items, m, CFG) for m in METHODS]
    for r in reps[1:]:
        assert r.aggregates == reps[0].aggregates
        assert [x.collided for x in r.rows] == [x.collided for x in reps[0].rows]


def test_report_shape_and_order_invariance():
    items = random_items(np.random.default_rng(8), 40)
    rep = evaluate_method(items, "scene_joint", CFG)
    assert len(rep.rows) == 40
    assert [r.scenario_id for r in rep.rows] == sorted(r.scenario_id for r in rep.rows)
    shuffled = evaluate_method(items[::-1], "scene_joint", CFG)
    assert shuffled.aggregates == rep.aggregates and shuffled.rows == rep.rows
    for r in rep.rows:
        assert r.avg_min_fde >= 0 and 0 <= r.best_world_index < 6


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate_method([], "scene_joint", CFG)
    with pytest.raises(ValueError):
        evaluate_method(random_items(np.random.default_rng(9), 1), "oracle", CFG)


def test_avg_min_fde_at_least_mean_of_min_fde():
    rng = np.random.default_rng(10)
    for _ in range(200):
        pred, gt = rng.normal(size=(4, 6, 3, 2)), rng.normal(size=(4, 3, 2))
        m = per_agent_min_metrics(pred, gt, CFG)
        assert avg_min_fde(pred, gt)[0] >= m.min_fde.mean() - 1e-12
