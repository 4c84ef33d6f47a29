import hashlib
import json
import shutil
from dataclasses import fields

import pytest

from conftest import read_rows
from drivecorr import pipeline
from drivecorr.cli import EXIT_RUNTIME, EXIT_USAGE, main
from drivecorr.config import ConfigError, StudyConfig, build_config, load_config_file
from drivecorr.datamodel import save_dataset
from drivecorr.online_scoring import EpisodeLog, InfractionEvent, save_episodes
from drivecorr.simworld.policy import PolicySpec, save_policies
from drivecorr.simworld.study import StudySettings, evaluate_policy_offline, generate_offline_dataset
from drivecorr.simworld.track import Hazard, straight_track
from drivecorr.textio import write_lines

# the small family is too small for a meaningful fit; the flag is expected there
pytestmark = pytest.mark.filterwarnings("ignore:UWE fit. no predictive metric:UserWarning")

ERROR_METRICS = ("steer_mae", "steer_mse", "action_mae", "action_mse", "throttle_mae", "qce", "tre",
                 "waypoint_mae", "waypoint_fde", "fde")


def small_tracks():
    return [
        straight_track(120.0, [Hazard("stop_line", 40.0, mode="light"), Hazard("crossing_agent", 90.0, side=-1)], "a"),
        straight_track(100.0, [Hazard("static_obstacle", 50.0, lateral=1.4)], "b"),
    ]


def small_family(n=9):
    return [PolicySpec(f"p{i}", noise_std=0.03 * (i + 1), hazard_noise_mult=1.0 + 0.5 * i, bias=0.01 * (i % 3),
                       miss_prob=min(1.0, 0.12 * i), calibrated=i % 4 != 3, seed=i) for i in range(n)]


def write_inputs(d, n_policies=9):
    write_lines(d / "tracks.jsonl", [t.to_obj() for t in small_tracks()])
    save_policies(small_family(n_policies), d / "policies.jsonl")
    return ["--tracks", str(d / "tracks.jsonl"), "--policies", str(d / "policies.jsonl")]


@pytest.fixture(scope="module")
def small_study(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    flags = write_inputs(d)
    assert main(["simulate", *flags, "--out", str(d / "study")]) == 0
    return d, flags


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# -- simulate ---------------------------------------------------------------------------------------------


def test_simulate_writes_manifest_with_hashes(small_study):
    d, _ = small_study
    manifest = json.loads((d / "study" / "manifest.json").read_text())
    assert manifest["master_seed"] == 42 and len(manifest["policies"]) == 9
    kinds = [a["kind"] for a in manifest["artifacts"]]
    assert kinds.count("predictions") == 9 and kinds.count("episodes") == 18
    for a in manifest["artifacts"]:
        assert hashlib.sha256((d / "study" / a["path"]).read_bytes()).hexdigest() == a["sha256"]


def test_simulate_rerun_gives_identical_manifest(small_study, tmp_path):
    d, flags = small_study
    assert main(["simulate", *flags, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (d / "study" / "manifest.json").read_bytes()
    assert main(["simulate", *flags, "--seed", "7", "--out", str(tmp_path / "other")]) == 0
    assert (tmp_path / "other" / "manifest.json").read_bytes() != (d / "study" / "manifest.json").read_bytes()


def test_bundled_study_shape(bundled_run):
    assert bundled_run.codes == (0, 0)
    manifest = json.loads((bundled_run.study / "manifest.json").read_text())
    kinds = [a["kind"] for a in manifest["artifacts"]]
    assert kinds.count("predictions") == 24 and kinds.count("episodes") == 144
    for name in ("offline_metrics.csv", "online_metrics.csv", "uwe_config.txt", "uwe_fit.json", "correlation.csv"):
        assert (bundled_run.report / name).exists()


def test_missing_track_file_is_a_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "tracks.jsonl"
    code, _, err = run(["simulate", "--tracks", str(missing), "--out", str(tmp_path / "s")], capsys)
    assert code == EXIT_USAGE and str(missing) in err


def test_too_small_family_is_a_usage_error(tmp_path, capsys):
    save_policies(small_family(2), tmp_path / "p.jsonl")
    code, _, err = run(["simulate", "--policies", str(tmp_path / "p.jsonl"), "--out", str(tmp_path / "s")], capsys)
    assert code == EXIT_USAGE and "at least 3" in err


# -- score-offline / score-online --------------------------------------------------------------------------


def test_zero_corruption_dataset_scores_zero(tmp_path, capsys):
    tracks = small_tracks()[:1]
    expert = generate_offline_dataset(tracks, StudySettings(stride=4))
    save_dataset(evaluate_policy_offline(PolicySpec("clean"), expert, tracks), tmp_path / "clean.jsonl")
    code, _, _ = run(["score-offline", str(tmp_path / "clean.jsonl"), "--out", str(tmp_path / "r")], capsys)
    assert code == 0
    rows = read_rows(tmp_path / "r" / "offline_metrics.csv")
    values = {r[1]: r[2] for r in rows[1:]}
    for name in ERROR_METRICS:
        assert float(values[name]) == 0.0, name


def test_offline_report_includes_qce_and_tre(small_study, tmp_path, capsys):
    d, _ = small_study
    code, _, _ = run(["score-offline", str(d / "study"), "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = read_rows(tmp_path / "offline_metrics.csv")
    assert rows[0] == ["policy_id", "metric_name", "value"]
    names = {r[1] for r in rows[1:]}
    assert {"qce", "tre"} <= names
    assert len(rows) - 1 == 9 * len(names)


def test_malformed_dataset_line_reports_line_number(small_study, tmp_path, capsys):
    d, _ = small_study
    lines = (d / "study" / "predictions" / "p1.jsonl").read_text().splitlines()
    lines[2] = lines[2][:-5]
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    code, _, err = run(["score-offline", str(tmp_path / "bad.jsonl"), "--out", str(tmp_path / "r")], capsys)
    assert code == EXIT_USAGE and "bad.jsonl:3:" in err


def test_score_online_single_file_matches_hand_fixture(tmp_path, capsys):
    ep = EpisodeLog("r", 100.0, 80.0, 60.0, "timeout", (InfractionEvent("collision_vehicle", 10.0),))
    save_episodes([ep], tmp_path / "fixture.jsonl")
    code, _, _ = run(["score-online", str(tmp_path / "fixture.jsonl"), "--out", str(tmp_path / "r")], capsys)
    assert code == 0
    rows = read_rows(tmp_path / "r" / "online_metrics.csv")
    assert ["fixture", "driving_score", "0.48"] in rows


def test_empty_episode_file_is_a_usage_error(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("")
    code, _, err = run(["score-online", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "r")], capsys)
    assert code == EXIT_USAGE and "no episodes" in err


def test_score_online_study_dir(small_study, tmp_path, capsys):
    d, _ = small_study
    assert run(["score-online", str(d / "study"), "--out", str(tmp_path)], capsys)[0] == 0
    policies = {r[0] for r in read_rows(tmp_path / "online_metrics.csv")[1:]}
    assert policies == {f"p{i}" for i in range(9)}


# -- fit-uwe / correlate ------------------------------------------------------------------------------------


def test_fit_with_frozen_gamma_is_repeatable(small_study, tmp_path, capsys):
    d, _ = small_study
    outs = []
    for k in range(2):
        out = tmp_path / f"fit{k}"
        code, _, _ = run(["fit-uwe", str(d / "study"), "--gamma-grid", "1.0", "--out", str(out)], capsys)
        assert code == 0
        outs.append((out / "uwe_config.txt").read_bytes())
    assert outs[0] == outs[1]
    assert b"gamma" in outs[0]


def test_fit_with_zero_uncertainty_policy_is_a_usage_error(tmp_path, capsys):
    flags = write_inputs(tmp_path)
    family = small_family() + [PolicySpec("clean")]
    save_policies(family, tmp_path / "policies.jsonl")
    assert main(["simulate", *flags, "--out", str(tmp_path / "s")]) == 0
    code, _, err = run(["fit-uwe", str(tmp_path / "s"), "--out", str(tmp_path / "f")], capsys)
    assert code == EXIT_USAGE and "'clean'" in err and "degenerate weighting" in err
    fixed = ["fit-uwe", str(tmp_path / "s"), "--uncertainty-source", "fixed:p1", "--out", str(tmp_path / "g")]
    assert run(fixed, capsys)[0] == 0


def test_fit_with_fewer_policies_than_metrics_is_a_usage_error(tmp_path, capsys):
    flags = write_inputs(tmp_path, n_policies=4)
    assert main(["simulate", *flags, "--out", str(tmp_path / "s")]) == 0
    code, _, err = run(["fit-uwe", str(tmp_path / "s"), "--out", str(tmp_path / "f")], capsys)
    assert code == EXIT_USAGE and "training policies" in err


def test_correlate_with_frozen_config_and_primary_online(small_study, tmp_path, capsys):
    d, _ = small_study
    assert run(["fit-uwe", str(d / "study"), "--out", str(tmp_path / "fit")], capsys)[0] == 0
    frozen = str(tmp_path / "fit" / "uwe_config.txt")
    base = ["correlate", str(d / "study"), "--uwe-config", frozen, "--bootstrap", "200"]
    assert run([*base, "--out", str(tmp_path / "ds")], capsys)[0] == 0
    assert run([*base, "--primary-online", "success", "--out", str(tmp_path / "sr")], capsys)[0] == 0
    for sub, primary in (("ds", "driving_score"), ("sr", "success_rate")):
        rows = read_rows(tmp_path / sub / "correlation.csv")
        head = rows[0]
        col = {h: i for i, h in enumerate(head)}
        prim = [r for r in rows[1:] if r[col["online_metric"]] == primary]
        order = list(dict.fromkeys(r[col["offline_metric"]] for r in rows[1:]))
        assert order == [r[col["offline_metric"]] for r in prim]
        keys = [float(r[col["abs_pearson"]]) if r[col["abs_pearson"]] else -1.0 for r in prim]
        assert keys == sorted(keys, reverse=True)
        assert "uwe" in order
    assert (tmp_path / "ds" / "scatter").is_dir()


def test_report_writes_svg_when_asked(small_study, tmp_path, capsys):
    d, _ = small_study
    code, _, _ = run(["report", str(d / "study"), "--bootstrap", "200", "--svg", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert list((tmp_path / "scatter").glob("*.svg"))


def test_runtime_failures_exit_3(small_study, tmp_path, capsys, monkeypatch):
    d, _ = small_study

    def boom(cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "report", boom)
    code, _, err = run(["report", str(d / "study"), "--out", str(tmp_path)], capsys)
    assert code == EXIT_RUNTIME and "disk on fire" in err


# -- configuration -------------------------------------------------------------------------------------------


def test_help_lists_every_config_key(capsys):
    code, out, _ = run(["report", "--help"], capsys)
    assert code == 0
    for f in fields(StudyConfig):
        assert "--" + f.name.replace("_", "-") in out, f.name
    assert "--config" in out


def test_config_precedence_defaults_file_flags(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 7\nstride: 3\nbootstrap: 500\n")
    cfg = build_config(load_config_file(tmp_path / "c.yaml"), {"stride": "2"})
    assert (cfg.seed, cfg.stride, cfg.bootstrap, cfg.waypoints) == (7, 2, 500, 4)


def test_config_rejects_unknown_keys_and_bad_values(tmp_path, capsys):
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config({"sead": 1}, {})
    with pytest.raises(ConfigError):
        build_config({}, {"holdout": "1.5"})
    with pytest.raises(ConfigError):
        build_config({}, {"primary_online": "nonsense"})
    (tmp_path / "c.yaml").write_text("seed: 1\ncolour: blue\n")
    code, _, err = run(["simulate", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "s")], capsys)
    assert code == EXIT_USAGE and "colour" in err
    (tmp_path / "bad.yaml").write_text("seed: [1,\n")
    assert run(["simulate", "--config", str(tmp_path / "bad.yaml")], capsys)[0] == EXIT_USAGE


def test_config_file_and_flag_paths_must_exist(tmp_path, capsys):
    assert run(["simulate", "--config", str(tmp_path / "none.yaml")], capsys)[0] == EXIT_USAGE
    code, _, err = run(["score-online", "--episodes", str(tmp_path / "none.jsonl")], capsys)
    assert code == EXIT_USAGE and "none.jsonl" in err


def test_unknown_subcommand_and_flag_are_usage_errors(capsys):
    assert run(["dance"], capsys)[0] == EXIT_USAGE
    assert run(["simulate", "--frobnicate"], capsys)[0] == EXIT_USAGE


def test_study_dir_can_be_copied_and_rescored(small_study, tmp_path, capsys):
    d, _ = small_study
    shutil.copytree(d / "study", tmp_path / "copy")
    assert run(["score-online", str(tmp_path / "copy"), "--out", str(tmp_path / "r")], capsys)[0] == 0
