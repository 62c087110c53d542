import xml.etree.ElementTree as ET

import numpy as np
import pytest

from scenejoint.metrics import detect_collision, first_collision
from scenejoint.model import ModelConfig, SceneModel, ScenePrediction, model_forward, softmax_np
from scenejoint.scene_data import AgentTrack, Scene
from scenejoint.synthetic import GenConfig, generate_synthetic_dataset
from scenejoint.viz import FOCAL_COLOR, LANE_COLOR, OTHER_COLOR, viz_svg

NS = "{http://www.w3.org/2000/svg}"


def parse(svg: bytes):
    return ET.fromstring(svg)


def by_class(root, cls):
    return [e for e in root.iter() if e.get("class") == cls]


def two_agent_scene():
    def track(id_, y):
        hist = np.array([[t, y, 1.0, 0.0, 1.0] for t in range(4)], dtype=float)
        fut = np.array([[4.0 + t, y, 1.0] for t in range(5)])
        return AgentTrack(id_, "vehicle", True, id_ == "a0", hist, fut)

    return Scene("pair", 10.0, 4, 5, (track("a0", 0.0), track("a1", 6.0)), (), "a0")


def prediction(traj):
    logits = np.zeros(traj.shape[1])
    return ScenePrediction(traj, logits, softmax_np(logits), ("a0", "a1"))


def converging_prediction():
    # mode 0 brings the agents together at t=2 and keeps them close; mode 1 stays apart
    t = np.arange(5, dtype=float)
    traj = np.zeros((2, 2, 5, 2))
    traj[0, :, :, 0] = traj[1, :, :, 0] = 4 + t
    traj[1, 0, :, 1] = np.maximum(6.0 - 3.0 * t, 0.5)
    traj[1, 1, :, 1] = 6.0
    return traj


def test_empty_lane_scene_is_valid_svg():
    root = parse(viz_svg(two_agent_scene()))
    assert root.tag == NS + "svg"
    assert len(by_class(root, "agent")) == 2
    assert by_class(root, "lane") == [] and by_class(root, "mode") == []


def test_colors_follow_roles():
    s = generate_synthetic_dataset(GenConfig(num_scenes=1, H=10, T=15), seed=2)[0]
    root = parse(viz_svg(s))
    fills = {e.get("data-id"): e.get("fill") for e in by_class(root, "agent")}
    for a in s.agents:
        assert fills[a.id] == (FOCAL_COLOR if a.is_focal else OTHER_COLOR)
    assert all(e.get("stroke") == LANE_COLOR for e in by_class(root, "lane"))


def test_view_box_covers_scene_plus_margin():
    root = parse(viz_svg(two_agent_scene()))
    x, y, w, h = map(float, root.get("viewBox").split())
    assert (x, x + w) == (-10.0, 18.0)
    assert (-y - h, -y) == (-10.0, 16.0)


def test_byte_identical_output():
    s = generate_synthetic_dataset(GenConfig(num_scenes=1, H=10, T=15), seed=3)[0]
    m = SceneModel(ModelConfig(), seed=1)
    p = model_forward(s, m)
    assert viz_svg(s, p, 2) == viz_svg(s, model_forward(s, m), 2)


def test_one_gradient_polyline_per_agent_and_mode():
    s = two_agent_scene()
    root = parse(viz_svg(s, prediction(converging_prediction())))
    assert len(by_class(root, "mode")) == 4
    assert len(list(root.iter(NS + "linearGradient"))) == 4


def test_collision_circle_matches_detector():
    s, traj = two_agent_scene(), converging_prediction()
    for k in range(2):
        world = traj[:, k]
        circles = by_class(parse(viz_svg(s, prediction(traj), k)), "collision")
        assert len(circles) == int(detect_collision(world, 2.0))
        if circles:
            t, i, j = first_collision(world, 2.0)
            cx, cy = (world[i, t] + world[j, t]) / 2
            assert int(circles[0].get("data-t")) == t
            assert float(circles[0].get("cx")) == pytest.approx(cx, abs=0.006)
            assert float(circles[0].get("cy")) == pytest.approx(-cy, abs=0.006)


def test_collision_circle_on_random_worlds():
    rng = np.random.default_rng(4)
    s = two_agent_scene()
    hits = 0
    for _ in range(40):
        traj = rng.uniform(-5, 12, size=(2, 3, 5, 2))
        k = int(rng.integers(3))
        n = len(by_class(parse(viz_svg(s, prediction(traj), k)), "collision"))
        assert n == int(detect_collision(traj[:, k], 2.0))
        hits += n
    assert hits > 0


def test_bad_world_index():
    with pytest.raises(IndexError):
        viz_svg(two_agent_scene(), prediction(converging_prediction()), 5)
