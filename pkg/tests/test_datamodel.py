import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import datasets, make_record, random_dataset, records
from drivecorr.datamodel import (
    Action,
    Dataset,
    DatasetError,
    DatasetHeader,
    ObservationMeta,
    PredictionRecord,
    WaypointPlan,
    derive_executed_action,
    load_dataset,
    record_from_obj,
    record_to_obj,
    save_dataset,
)
from drivecorr.textio import ParseError, dumps, fmt_float, iter_lines, write_lines


def write_raw(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


HEADER = '{"header": {"K": 4}}'


def line(rid, steer=0.1, samples=None):
    samples = samples or [[steer, 0.5, 0.0]] * 4
    return dumps(
        {"record_id": rid, "gt_steer": steer, "gt_throttle": 0.5, "gt_brake": 0.0, "speed": 3.0, "command": 0, "samples": samples}
    )


# -- textio -------------------------------------------------------------------------------


def test_fmt_float_nine_significant_digits():
    assert fmt_float(1 / 3) == "0.333333333"
    assert fmt_float(2.0) == "2"
    assert fmt_float(-1.5e-12) == "-1.5e-12"
    with pytest.raises(ValueError):
        fmt_float(float("nan"))


def test_dumps_is_canonical_json():
    assert dumps({"b": 1, "a": [0.1, None, True, "x"]}) == '{"b": 1, "a": [0.1, null, true, "x"]}'
    assert dumps(np.float64(0.25)) == "0.25"
    assert dumps((1, 2)) == "[1, 2]"
    with pytest.raises(ValueError):
        dumps([float("inf")])
    with pytest.raises(TypeError):
        dumps(object())


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_format_is_a_fixed_point_after_one_round(x):
    once = float(fmt_float(x))
    assert fmt_float(once) == fmt_float(x)


def test_iter_lines_reports_line_numbers(tmp_path):
    p = write_raw(tmp_path / "f.jsonl", ['{"a": 1}', "", "{not json"])
    with pytest.raises(ParseError) as ei:
        list(iter_lines(p))
    assert ei.value.line_no == 3 and ":3:" in str(ei.value)


def test_iter_lines_rejects_non_objects(tmp_path):
    p = write_raw(tmp_path / "f.jsonl", ["[1, 2]"])
    with pytest.raises(ParseError, match="key/value"):
        list(iter_lines(p))


def test_write_lines_round_trip(tmp_path):
    objs = [{"x": 1.25, "y": [1, 2]}, {"z": "s"}]
    write_lines(tmp_path / "o.jsonl", objs)
    assert [o for _, o in iter_lines(tmp_path / "o.jsonl")] == objs


# -- types ---------------------------------------------------------------------------------


@pytest.mark.parametrize("bad", [(1.5, 0, 0), (-1.01, 0, 0), (0, 1.2, 0), (0, 0, -0.1), (math.nan, 0, 0), (0, math.inf, 0)])
def test_action_rejects_out_of_range_or_non_finite(bad):
    with pytest.raises(DatasetError):
        Action(*bad)


def test_action_clamped_and_longitudinal():
    a = Action.clamped(2.0, -1.0, 0.3)
    assert a == Action(1.0, 0.0, 0.3)
    assert a.longitudinal == pytest.approx(-0.3)


def test_waypoint_plan_requires_finite_non_empty():
    with pytest.raises(DatasetError):
        WaypointPlan(((0.0, math.nan),))
    with pytest.raises(DatasetError):
        WaypointPlan(())
    with pytest.raises(DatasetError):
        WaypointPlan(((1e308, 1e308), (1e308, 0.0), (0.0, math.inf)))
    assert len(WaypointPlan(((1e308, 1e308), (1e308, 0.0)))) == 2


@pytest.mark.parametrize("speed,command", [(-1.0, 0), (math.inf, 0), (1.0, 4), (1.0, -1), (1.0, True), (1.0, 1.0)])
def test_observation_meta_validation(speed, command):
    with pytest.raises(DatasetError):
        ObservationMeta(speed, command)


def test_derive_executed_action_examples():
    assert derive_executed_action([Action(0.2, 0.5, 0.0)] * 3) == Action(0.2, 0.5, 0.0)
    assert derive_executed_action([Action(-1, 0, 0), Action(1, 0, 0)]) == Action(0.0, 0.0, 0.0)
    got = derive_executed_action([Action(0.1, 0.2, 0), Action(0.3, 0.4, 0), Action(0.5, 0.6, 0)])
    assert got.as_tuple() == pytest.approx((0.3, 0.4, 0.0), abs=1e-15)
    with pytest.raises(DatasetError):
        derive_executed_action([])


@given(records())
def test_derived_executed_action_is_the_sample_mean(r):
    mean = np.mean([a.as_tuple() for a in r.samples_action], axis=0)
    assert np.allclose(r.executed_action.as_tuple(), mean, atol=1e-9, rtol=0)


def test_waypoints_presence_must_match():
    with pytest.raises(DatasetError, match="sample_waypoints"):
        PredictionRecord("r", Action(0, 0, 0), ObservationMeta(1, 0), (Action(0, 0, 0),), gt_waypoints=WaypointPlan(((1, 0),)))
    with pytest.raises(DatasetError):
        make_record(samples=[(0, 0, 0)] * 2, gt_wp=[(1, 0)], sample_wp=[[(1, 0)]])
    with pytest.raises(DatasetError):
        make_record(gt_wp=[(1, 0)], sample_wp=[[(1, 0), (2, 0)]])


def test_dataset_invariants():
    a = make_record(rid="a")
    with pytest.raises(DatasetError, match="empty"):
        Dataset(DatasetHeader(K=1), ())
    with pytest.raises(DatasetError, match="duplicate"):
        Dataset(DatasetHeader(K=1), (a, a))
    with pytest.raises(DatasetError, match="K=1"):
        Dataset(DatasetHeader(K=2), (a,))
    with pytest.raises(DatasetError):
        Dataset(DatasetHeader(K=1, W=1), (a,))
    wp = make_record(rid="w", gt_wp=[(1, 0)], sample_wp=[[(1, 0)]])
    with pytest.raises(DatasetError):
        Dataset(DatasetHeader(K=1), (wp,))
    with pytest.raises(DatasetError, match="W=1"):
        Dataset(DatasetHeader(K=1, W=2), (wp,))


# -- loading -------------------------------------------------------------------------------


def test_load_two_valid_records(tmp_path):
    p = write_raw(tmp_path / "d.jsonl", [HEADER, line("r1"), line("r2")])
    ds = load_dataset(p)
    assert len(ds) == 2 and ds.header.K == 4 and ds.header.W is None


def test_load_range_violation_names_record_and_field(tmp_path):
    p = write_raw(tmp_path / "d.jsonl", [HEADER, line("r1"), line("r2"), line("r3", steer=1.5)])
    with pytest.raises(DatasetError) as ei:
        load_dataset(p)
    assert ei.value.record_id == "r3" and ei.value.field == "steer"
    assert "r3" in str(ei.value) and "steer" in str(ei.value)


def test_load_empty_file(tmp_path):
    p = write_raw(tmp_path / "d.jsonl", [""])
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset(p)
    p = write_raw(tmp_path / "h.jsonl", [HEADER])
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset(p)


def test_load_parse_error_has_line_number(tmp_path):
    p = write_raw(tmp_path / "d.jsonl", [HEADER, line("r1"), '{"record_id": "r2", '])
    with pytest.raises(ParseError) as ei:
        load_dataset(p)
    assert ei.value.line_no == 3


def test_load_header_must_come_first(tmp_path):
    p = write_raw(tmp_path / "d.jsonl", [line("r1"), HEADER])
    with pytest.raises(ParseError) as ei:
        load_dataset(p)
    assert ei.value.line_no == 1


def test_load_missing_key_and_bad_sample(tmp_path):
    obj = {"record_id": "r1", "gt_steer": 0, "gt_throttle": 0, "gt_brake": 0, "speed": 1, "command": 0}
    with pytest.raises(DatasetError, match="samples"):
        record_from_obj(obj)
    with pytest.raises(DatasetError) as ei:
        record_from_obj({**obj, "samples": [[0, 0]]})
    assert ei.value.field == "samples"


def test_unknown_keys_warn(tmp_path):
    obj = {"record_id": "r1", "gt_steer": 0, "gt_throttle": 0, "gt_brake": 0, "speed": 1, "command": 0, "samples": [[0, 0, 0]], "extra": 1}
    with pytest.warns(UserWarning, match="extra"):
        record_from_obj(obj)


def test_brake_and_throttle_soft_check_warns(tmp_path):
    obj = {"record_id": "r1", "gt_steer": 0, "gt_throttle": 0.9, "gt_brake": 0.9, "speed": 1, "command": 0, "samples": [[0, 0, 0]]}
    p = write_raw(tmp_path / "d.jsonl", ['{"header": {"K": 1}}', dumps(obj)])
    with pytest.warns(UserWarning, match="brake and throttle"):
        ds = load_dataset(p)
    assert len(ds) == 1


def test_k_mismatch_between_header_and_record(tmp_path):
    p = write_raw(tmp_path / "d.jsonl", ['{"header": {"K": 2}}', line("r1")])
    with pytest.raises(DatasetError, match="header K"):
        load_dataset(p)


@pytest.mark.filterwarnings("ignore:.*brake and throttle both:UserWarning")
def test_random_dataset_byte_identical_round_trip(tmp_path):
    ds = random_dataset(np.random.default_rng(3), 50)
    save_dataset(ds, tmp_path / "a.jsonl")
    loaded = load_dataset(tmp_path / "a.jsonl")
    save_dataset(loaded, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(loaded) == 50 and loaded.header.W == 3


@pytest.mark.filterwarnings("ignore:.*brake and throttle both:UserWarning")
@given(datasets())
def test_reserialization_is_byte_identical(tmp_path_factory, ds):
    d = tmp_path_factory.mktemp("rt")
    save_dataset(ds, d / "a.jsonl")
    save_dataset(load_dataset(d / "a.jsonl"), d / "b.jsonl")
    save_dataset(load_dataset(d / "b.jsonl"), d / "c.jsonl")
    assert (d / "b.jsonl").read_bytes() == (d / "c.jsonl").read_bytes()


@given(records(), st.sampled_from(["gt_steer", "gt_throttle", "gt_brake", "speed"]), st.sampled_from([-2.0, 1.5, math.nan]))
def test_every_invalid_field_is_rejected_and_named(r, key, bad):
    obj = record_to_obj(r)
    if key == "speed" and bad == 1.5:
        bad = -0.5
    obj[key] = bad
    with pytest.raises(DatasetError) as ei:
        record_from_obj(obj)
    assert ei.value.record_id == r.record_id


@given(records())
def test_valid_records_round_trip_through_objects(r):
    back = record_from_obj(record_to_obj(r))
    assert back.record_id == r.record_id and back.K == r.K
    assert back.gt_action == r.gt_action and back.samples_action == r.samples_action
    assert back.has_waypoints == r.has_waypoints


def test_ctx_can_be_dropped(tmp_path):
    r = PredictionRecord("r", Action(0, 0, 0), ObservationMeta(1, 0), (Action(0, 0, 0),), ctx={"t": 1.0})
    ds = Dataset.from_records([r])
    save_dataset(ds, tmp_path / "with.jsonl")
    save_dataset(ds, tmp_path / "without.jsonl", with_ctx=False)
    assert load_dataset(tmp_path / "with.jsonl").records[0].ctx == {"t": 1.0}
    assert load_dataset(tmp_path / "without.jsonl").records[0].ctx is None
