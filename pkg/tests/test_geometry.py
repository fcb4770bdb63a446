import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handqa.geometry import (
    FINGER_CHAINS,
    TOPOLOGY,
    BBox,
    DegenerateNormalError,
    GeometryError,
    HandSkeleton,
    UndefinedAngleError,
    expand_and_clamp_bbox,
    palm_orientation,
    passes_size_filter,
    pip_flexion_angles,
)


def straight_hand():
    """Flat hand in the XY plane, fingers along -y."""
    j = np.zeros((21, 3))
    j[0] = (0.5, 0.9, 0.0)
    bases = {"thumb": 0.30, "index": 0.40, "middle": 0.48, "ring": 0.56, "pinky": 0.64}
    for finger, x in bases.items():
        for k, idx in enumerate(FINGER_CHAINS[finger]):
            j[idx] = (x, 0.7 - 0.08 * k, 0.0)
    return HandSkeleton(j)


def test_topology_is_a_tree_rooted_at_wrist():
    a = TOPOLOGY.adjacency()
    assert len(TOPOLOGY.edges) == 20
    assert np.array_equal(a, a.T)
    # connected: 20 steps of reachability from the wrist cover every joint
    seen = np.zeros(21, bool)
    seen[0] = True
    for _ in range(21):
        seen = seen | (a[seen].sum(axis=0) > 0)
    assert seen.all()


def test_normalized_adjacency_matches_dense_formula():
    a = TOPOLOGY.adjacency() + np.eye(21)
    d = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
    np.testing.assert_allclose(TOPOLOGY.normalized_adjacency(), d @ a @ d, rtol=0, atol=1e-15)


def test_straight_fingers_are_180_degrees():
    angles = pip_flexion_angles(straight_hand())
    assert set(angles) == set(FINGER_CHAINS)
    for a in angles.values():
        assert a == pytest.approx(180.0, abs=1e-9)


def test_right_angle_at_pip():
    j = straight_hand().joints.copy()
    # bend the index at its PIP (6): move DIP sideways
    j[7] = j[6] + np.array([0.08, 0.0, 0.0])
    j[8] = j[7] + np.array([0.08, 0.0, 0.0])
    assert pip_flexion_angles(HandSkeleton(j))["index"] == pytest.approx(90.0, abs=1e-9)


def test_thumb_uses_interphalangeal_joint():
    j = straight_hand().joints.copy()
    # bending at joint 2 (MCP) alone leaves the thumb's reported angle straight
    j[3] = j[2] + np.array([0.08, 0.0, 0.0])
    j[4] = j[3] + np.array([0.08, 0.0, 0.0])
    assert pip_flexion_angles(HandSkeleton(j))["thumb"] == pytest.approx(180.0, abs=1e-9)
    j[4] = j[3] + np.array([0.0, 0.08, 0.0])
    assert pip_flexion_angles(HandSkeleton(j))["thumb"] == pytest.approx(90.0, abs=1e-9)


def test_zero_length_bone_is_reported():
    j = straight_hand().joints.copy()
    j[7] = j[6]
    with pytest.raises(UndefinedAngleError) as e:
        pip_flexion_angles(HandSkeleton(j))
    assert e.value.finger == "index"


def test_flat_palm_faces_camera_axis():
    a = palm_orientation(straight_hand())
    assert a == pytest.approx(0.0, abs=1e-9) or a == pytest.approx(180.0, abs=1e-9)


def test_palm_tilted_about_x_axis():
    j = straight_hand().joints.copy()
    c = j[0].copy()
    t = math.radians(30.0)
    R = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    j = (j - c) @ R.T + c
    a = palm_orientation(HandSkeleton(j))
    assert min(a, 180 - a) == pytest.approx(30.0, abs=1e-9)


def test_collinear_palm_is_degenerate():
    j = straight_hand().joints.copy()
    j[5] = j[0] + np.array([0.0, -0.1, 0.0])
    j[17] = j[0] + np.array([0.0, -0.2, 0.0])
    with pytest.raises(DegenerateNormalError):
        palm_orientation(HandSkeleton(j))


coords = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(coords, min_size=63, max_size=63), st.floats(min_value=0, max_value=2 * math.pi))
def test_angles_in_range_and_palm_invariant_to_z_rotation(values, theta):
    j = np.array(values).reshape(21, 3)
    try:
        angles = pip_flexion_angles(HandSkeleton(j))
        palm = palm_orientation(HandSkeleton(j))
    except GeometryError:
        return
    assert all(0.0 <= a <= 180.0 for a in angles.values())
    assert 0.0 <= palm <= 180.0
    c, s = math.cos(theta), math.sin(theta)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    center = np.array([0.5, 0.5, 0.0])
    rotated = (j - center) @ Rz.T + center
    if np.linalg.norm(np.cross(j[5] - j[0], j[17] - j[0])) < 1e-6:
        return
    assert palm_orientation(HandSkeleton(rotated)) == pytest.approx(palm, abs=1e-9)


def test_skeleton_validation():
    with pytest.raises(GeometryError):
        HandSkeleton(np.zeros((20, 3)))
    bad = np.zeros((21, 3))
    bad[3, 1] = np.nan
    with pytest.raises(GeometryError):
        HandSkeleton(bad)
    far = np.zeros((21, 3))
    far[0, 0] = 2.0
    with pytest.raises(GeometryError):
        HandSkeleton(far)
    with pytest.raises(GeometryError):
        HandSkeleton(np.zeros((21, 3)), handedness="both")


def test_skeleton_joints_are_read_only():
    s = straight_hand()
    with pytest.raises(ValueError):
        s.joints[0, 0] = 1.0


def test_bbox_expansion():
    box = expand_and_clamp_bbox(BBox(100, 100, 200, 200, 1000, 1000))
    assert (box.x0, box.y0, box.x1, box.y1) == (90, 90, 210, 210)


def test_bbox_expansion_clamps_to_frame():
    box = expand_and_clamp_bbox(BBox(0, 950, 100, 1000, 1000, 1000))
    assert (box.x0, box.y0, box.x1, box.y1) == (0, 945, 110, 1000)


def test_bbox_rejects_shrinking_and_bad_boxes():
    with pytest.raises(GeometryError):
        expand_and_clamp_bbox(BBox(0, 0, 10, 10, 20, 20), factor=0.5)
    with pytest.raises(GeometryError):
        BBox(10, 0, 5, 10, 20, 20)


def test_size_filter_threshold():
    assert passes_size_filter(BBox(0, 0, 80, 80, 100, 100))
    assert not passes_size_filter(BBox(0, 0, 79, 200, 300, 300))
    assert not passes_size_filter(BBox(0, 0, 200, 79, 300, 300))


def test_bbox_expansion_small_frame_example():
    box = expand_and_clamp_bbox(BBox(10, 10, 50, 50, 100, 100), factor=1.2)
    assert (box.x0, box.y0, box.x1, box.y1) == (6, 6, 54, 54)
