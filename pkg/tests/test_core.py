import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajxfer.core import (
    POI,
    GeoPoint,
    InputPoint,
    MaskKind,
    ModalityMask,
    ModelConfig,
    RoadSegment,
    TaskInstance,
    Trajectory,
    temporal_features,
    validate_trajectory,
)
from trajxfer.errors import (
    EmptyTrajectory,
    MissingTarget,
    NegativeDelta,
    NoAnchor,
    NonMonotonicTime,
    OutOfRangeCoordinate,
)

from conftest import line_traj


def test_validate_accepts_monotone():
    t = Trajectory.from_rows("a", [(104.0, 30.0, 1), (104.0, 30.0, 2), (104.0, 30.0, 3)])
    assert validate_trajectory(t) is t


def test_validate_rejects_decreasing_time():
    t = Trajectory.from_rows("a", [(104.0, 30.0, 5), (104.0, 30.0, 4)])
    with pytest.raises(NonMonotonicTime):
        validate_trajectory(t)


def test_validate_rejects_lat_91():
    t = Trajectory.from_rows("a", [(104.0, 91.0, 5)])
    with pytest.raises(OutOfRangeCoordinate):
        validate_trajectory(t)


def test_validate_rejects_empty_and_negative_time():
    with pytest.raises(EmptyTrajectory):
        validate_trajectory(Trajectory("e", ()))
    with pytest.raises(NonMonotonicTime):
        validate_trajectory(Trajectory.from_rows("n", [(0.0, 0.0, -1)]))


def test_equal_timestamps_allowed():
    t = Trajectory.from_rows("dup", [(1.0, 1.0, 7), (1.0, 1.0, 7)])
    assert validate_trajectory(t) is t


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=20))
def test_validate_idempotent(ts):
    t = Trajectory.from_rows("h", [(10.0, 20.0, v) for v in sorted(ts)])
    once = validate_trajectory(t)
    assert validate_trajectory(once) == t


def test_geopoint_coerces_to_builtin_float():
    import numpy as np

    p = GeoPoint(np.float64(1.5), np.float32(2.0))
    assert type(p.lng) is float and type(p.lat) is float


def test_poi_and_road_require_description():
    with pytest.raises(ValueError):
        POI(GeoPoint(0, 0), "")
    with pytest.raises(ValueError):
        RoadSegment(GeoPoint(0, 0), "")


def test_temporal_features_calendar():
    monday = 4 * 86400  # 1970-01-05T00:00:00Z
    assert temporal_features(monday, monday) == (0.0, 0.0, 0.0, 0.0)
    assert temporal_features(0, 0)[0] == 3.0  # epoch was a Thursday
    assert temporal_features(monday + 3600, monday)[3] == 60.0
    assert temporal_features(monday + 3 * 3600 + 25 * 60 + 30, monday) == (0.0, 3.0, 25.0, 205.5)


def test_temporal_features_negative_delta():
    with pytest.raises(NegativeDelta):
        temporal_features(10, 11)


def test_mask_kind_flags():
    assert MaskKind.SPATIAL.spatial and not MaskKind.SPATIAL.temporal
    assert MaskKind.TEMPORAL.temporal and not MaskKind.TEMPORAL.spatial
    assert MaskKind.FULL.spatial and MaskKind.FULL.temporal
    assert not (MaskKind.NONE.spatial or MaskKind.NONE.temporal)


def test_mask_length_must_match():
    t = line_traj(4)
    with pytest.raises(ValueError):
        ModalityMask.for_trajectory(t, [MaskKind.NONE] * 3)
    assert len(ModalityMask.for_trajectory(t, [0, 1, 2, 3])) == 4


def test_task_instance_targets_follow_mask():
    t = line_traj(4)
    inst = TaskInstance.from_trajectory(t, [MaskKind.NONE, MaskKind.SPATIAL, MaskKind.TEMPORAL, MaskKind.FULL])
    assert inst.input_points[1].loc is None and inst.input_points[1].t is not None
    assert inst.input_points[2].t is None and inst.input_points[2].loc is not None
    assert [x is not None for x in inst.target_locs] == [False, True, False, True]
    assert [x is not None for x in inst.target_times] == [False, False, True, True]
    assert inst.spatial_targets[1] == pytest.approx((1e-4, 0.0))
    assert inst.temporal_targets[3][3] == pytest.approx(18 / 60)
    assert inst.unmask_all() == t


def test_task_instance_anchor_is_first_visible_location():
    t = line_traj(4)
    inst = TaskInstance.from_trajectory(t, [MaskKind.FULL, MaskKind.SPATIAL, MaskKind.TEMPORAL, MaskKind.NONE])
    assert inst.anchor_index == 2
    assert inst.anchor == t.points[2].loc
    assert inst.spatial_targets[0] == pytest.approx((-2e-4, 0.0))


def test_task_instance_rejects_missing_target_and_no_anchor():
    t = line_traj(3)
    inst = TaskInstance.from_trajectory(t, [MaskKind.NONE, MaskKind.SPATIAL, MaskKind.NONE])
    with pytest.raises(MissingTarget):
        inst.with_targets(target_locs=[None, None, None])
    with pytest.raises(NoAnchor):
        TaskInstance.from_trajectory(t, [MaskKind.SPATIAL, MaskKind.FULL, MaskKind.SPATIAL])
    with pytest.raises(ValueError):
        dataclasses.replace(inst, input_points=(InputPoint(None, 1),) * 3)


def test_model_config_invariants():
    ModelConfig()
    with pytest.raises(ValueError):
        ModelConfig(top_k=9, n_experts=8)
    with pytest.raises(ValueError):
        ModelConfig(d=12, n_heads=4)  # d_h = 3 is odd
    with pytest.raises(ValueError):
        ModelConfig(dtype="float16")
    cfg = ModelConfig(d=64)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.head_dim == 16 and cfg.ff_dim == 256
