from collections import Counter

import numpy as np
import pytest

from scenejoint.metrics import detect_collision
from scenejoint.scene_data import save_scene, validate_scene
from scenejoint.synthetic import (
    SCENARIO_KINDS,
    GenConfig,
    GenConfigError,
    generate_scene,
    generate_synthetic_dataset,
    parse_mix,
    scenario_kind,
)

DESK = dict(H=10, T=15)


@pytest.fixture(scope="module")
def thousand():
    return generate_synthetic_dataset(GenConfig(num_scenes=1000, **DESK), seed=11)


def test_deterministic_bytes():
    cfg = GenConfig(num_scenes=20, **DESK)
    a = [save_scene(s) for s in generate_synthetic_dataset(cfg, 5)]
    b = [save_scene(s) for s in generate_synthetic_dataset(cfg, 5)]
    assert a == b
    c = [save_scene(s) for s in generate_synthetic_dataset(cfg, 6)]
    assert a != c


def test_scene_independent_of_dataset_size():
    # per-scene seeds: scene i is the same whether generated alone or in a batch
    cfg = GenConfig(num_scenes=8, **DESK)
    batch = generate_synthetic_dataset(cfg, 9)
    assert save_scene(generate_scene(cfg, 9, 5)) == save_scene(batch[5])


def test_each_kind_at_least_100_of_1000(thousand):
    counts = Counter(scenario_kind(s) for s in thousand)
    assert set(counts) == set(SCENARIO_KINDS)
    assert min(counts.values()) >= 100


def test_generated_scenes_valid_and_collision_free(thousand):
    for s in thousand:
        assert validate_scene(s) == []
        gt, valid = s.gt_future()
        assert valid.all()
        assert not detect_collision(gt, 2.0), s.scenario_id


def test_agent_count_range(thousand):
    n = [s.num_agents for s in thousand]
    assert min(n) >= 2 and max(n) <= 8


def test_two_agent_crossings_keep_clear():
    cfg = GenConfig(num_scenes=40, agents_min=2, agents_max=2, mix={"cross": 1.0}, **DESK)
    for s in generate_synthetic_dataset(cfg, 2):
        gt, _ = s.gt_future()
        assert np.hypot(*(gt[0] - gt[1]).T).min() > cfg.dist_safe


def test_futures_have_bounded_acceleration(thousand):
    dt = 0.1
    worst = 0.0
    for s in thousand:
        for a in s.agents:
            # futures are noise-free; histories carry position noise
            p = a.future[:, :2]
            acc = np.hypot(*np.diff(p, 2, axis=0).T) / dt**2
            worst = max(worst, acc.max())
    assert worst <= 5.0 + 1e-3


def test_focal_is_scored_vehicle(thousand):
    for s in thousand:
        f = s.agents[s.focal_index()]
        assert f.is_scored and f.kind.value == "vehicle"


def test_lanes_present(thousand):
    assert all(s.num_lanes >= 2 for s in thousand)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mix={}),
        dict(mix={"roundabout": 1.0}),
        dict(mix={"cross": 0.0}),
        dict(num_scenes=0),
        dict(agents_min=1),
        dict(agents_min=5, agents_max=3),
        dict(H=0),
        dict(T=-1),
        dict(hz=0),
    ],
)
def test_config_errors(kwargs):
    with pytest.raises(GenConfigError):
        GenConfig(**kwargs)


def test_parse_mix():
    assert parse_mix("straight,cross") == {"straight": 1.0, "cross": 1.0}
    assert parse_mix("cross=3, merge=0.5") == {"cross": 3.0, "merge": 0.5}
