import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfsynth.scene import (DesiredField, Point3, Scene, SceneParseError, SceneValidationError,
                           build_experiment_scene, grid_points, parse_scene, experiment_scene_config,
                           ring_square, serialize_scene)


def test_experiment_scene_sizes(experiment_scene):
    assert experiment_scene.num_loudspeakers == 32
    assert experiment_scene.num_control_points == 1152
    assert experiment_scene.eval_points.shape == (25, 3)


def test_experiment_scene_heights(experiment_scene):
    assert set(experiment_scene.loudspeakers[:, 2]) == {0.1, -0.1}
    assert np.count_nonzero(experiment_scene.loudspeakers[:, 2] == 0.1) == 16


def test_experiment_scene_control_extent(experiment_scene):
    cp = experiment_scene.control_points
    # cell-centered 24-point axis: extremes at +/-(0.5 - 1/48), cell pitch 1/24
    assert np.ptp(cp[:, 0]) + 1 / 24 == pytest.approx(1.0, abs=1e-12)
    assert np.ptp(cp[:, 1]) + 1 / 24 == pytest.approx(1.0, abs=1e-12)
    assert sorted(set(cp[:, 2])) == [-0.02, 0.02]
    assert len(np.unique(cp[:, 0])) == 24


def test_experiment_loudspeakers_on_square_border(experiment_scene):
    xy = experiment_scene.loudspeakers[:, :2]
    assert np.allclose(np.max(np.abs(xy), axis=1), 1.0)
    # 16 per ring at 0.5 m spacing along the 8 m perimeter
    ring = xy[:16]
    steps = np.linalg.norm(np.roll(ring, -1, axis=0) - ring, axis=1)
    assert np.allclose(steps, 0.5)


@pytest.mark.parametrize("flip", [np.array([-1, 1, 1]), np.array([1, -1, 1])])
def test_experiment_loudspeakers_reflection_symmetric(experiment_scene, flip):
    ls = experiment_scene.loudspeakers
    mirrored = ls * flip
    key = lambda a: sorted(map(tuple, np.round(a, 12)))  # noqa: E731
    assert key(mirrored) == key(ls)


def test_ring_square_half_step_offset_avoids_corners():
    ls = ring_square(2.0, 16, [0.0], offset=0.5)
    assert not np.any(np.all(np.isclose(np.abs(ls[:, :2]), 1.0), axis=1))
    assert np.allclose(sorted(ls[:4, 0]), [-0.75, -0.25, 0.25, 0.75])


def test_grid_points_conventions():
    pts = grid_points([0, 0, 0], [1, 2, 1], [2, 1, 3], [True, True, False])
    assert pts.shape == (6, 3)
    assert sorted(set(pts[:, 0])) == [0.25, 0.75]
    assert set(pts[:, 1]) == {1.0}
    assert sorted(set(pts[:, 2])) == [0.0, 0.5, 1.0]


MINIMAL = """
format: 1
loudspeakers: [[1.0, 0.0, 0.0]]
control_points: [[0.0, 0.0, 0.0]]
desired: {position: [3.0, 0.0, 0.0]}
"""


def test_parse_minimal():
    s = parse_scene(MINIMAL)
    assert s.num_loudspeakers == 1 and s.num_control_points == 1
    assert s.speed_of_sound == 343.0
    assert s.desired.gain == 1.0
    assert len(s.eval_points) == 0


def test_parse_coincident_speaker_rejected():
    text = MINIMAL.replace("[[1.0, 0.0, 0.0]]", "[[0.0, 0.0, 0.0]]")
    with pytest.raises(SceneValidationError, match="loudspeaker 0 / control point 0"):
        parse_scene(text)


def test_parse_generated_experiment_config_equals_builder():
    assert parse_scene(experiment_scene_config()) == build_experiment_scene()


def test_parse_error_has_line():
    with pytest.raises(SceneParseError, match="line"):
        parse_scene("format: 1\nloudspeakers: [[1, 2\n")


@pytest.mark.parametrize("text, where", [
    (MINIMAL.replace("format: 1", "format: 2"), "format"),
    (MINIMAL.replace("[3.0, 0.0, 0.0]", "[3.0, 0.0]"), "desired.position"),
    (MINIMAL.replace("[[0.0, 0.0, 0.0]]", "{grid: {origin: [0, 0, 0], extent: [1, 1, 1]}}"),
     "control_points.grid"),
    (MINIMAL + "bogus: 1\n", "bogus"),
    (MINIMAL.replace("[[1.0, 0.0, 0.0]]", "[[1.0, 'a', 0.0]]"), r"loudspeakers\[0\]\[1\]"),
])
def test_parse_schema_errors_name_field(text, where):
    with pytest.raises(SceneParseError, match=where):
        parse_scene(text)


def test_desired_inside_hull_rejected():
    with pytest.raises(SceneValidationError, match="convex hull"):
        Scene([[2, 0, 0]], [[-1, -1, 0], [1, -1, 0], [0, 1, 0]], DesiredField(Point3(0, 0, 0)))


def test_desired_in_plane_outside_flat_hull_ok():
    s = Scene([[2, 0, 1]], [[-1, -1, 0], [1, -1, 0], [0, 1, 0]], DesiredField(Point3(5, 0, 0)))
    assert s.num_control_points == 3


def test_desired_on_collinear_segment_rejected():
    with pytest.raises(SceneValidationError):
        Scene([[2, 2, 0]], [[0, 0, 0], [1, 0, 0]], DesiredField(Point3(0.5, 0, 0)))


def test_scene_is_immutable(experiment_scene):
    with pytest.raises(ValueError):
        experiment_scene.loudspeakers[0, 0] = 5.0


coord = st.floats(min_value=-5, max_value=5, allow_nan=False, allow_infinity=False)
point = st.tuples(coord, coord, coord)


@settings(max_examples=50, deadline=None)
@given(st.lists(point, min_size=1, max_size=5), st.lists(point, min_size=1, max_size=5),
       st.floats(min_value=0.1, max_value=10), st.floats(min_value=200, max_value=400))
def test_serialize_parse_roundtrip(speakers, controls, gain, c):
    far = Point3(20.0, 20.0, 20.0)
    try:
        scene = Scene(speakers, controls, DesiredField(far, gain), eval_points=controls[:1],
                      speed_of_sound=c)
    except SceneValidationError:
        return
    assert parse_scene(serialize_scene(scene)) == scene
