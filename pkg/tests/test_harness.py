import json
import shutil
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from litevio.adaptation import predict_frozen
from litevio.corruption import NoiseSchedule
from litevio.geometry import Pose, integrate, read_kitti_poses, write_kitti_poses
from litevio.harness import protocols as P
from litevio.harness.artifacts import emit_artifacts, read_per_pose_csv
from litevio.harness.config import ConfigError, ExperimentConfig, load_config, parse_schedule
from litevio.harness.report import MetricsReport, make_sequence, render_table, verify_report
from litevio.network import load_checkpoint
from conftest import random_deltas, run_cli

SCHEMA_FILE = Path(__file__).parents[1] / "docs" / "report_schema.json"
GOLDEN = Path(__file__).parent / "golden" / "report.json"


def test_shipped_configs_round_trip():
    for name in ("desk", "golden"):
        cfg = load_config(name)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert load_config("desk") == ExperimentConfig()


@pytest.mark.parametrize("text,match", [
    ("bogus: 1\n", "unknown config keys"),
    ("train: {speed: 3}\n", "unknown keys"),
    ("protocol: sideways\n", "protocol"),
    ("seeds: [1, 1]\n", "distinct"),
    ("noises: [clean]\n", "noises"),
    ("single_shift: {length: 50, t0: 30, t1: 20}\n", "t0"),
    ("train: {batch_size: 0}\n", "batch_size"),
    ("- a list\n", "mapping"),
])
def test_config_errors(tmp_path, text, match):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_missing_config_and_kitti_files(tmp_path, monkeypatch):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    # a directory that shadows a shipped config name is not a config file
    monkeypatch.chdir(tmp_path)
    (tmp_path / "golden").mkdir()
    assert load_config("golden").name == "golden"
    path = tmp_path / "k.yaml"
    path.write_text("data:\n  source: kitti\n  kitti:\n    train: []\n"
                    "    test: {image_dir: /no/such, pose_file: /no/such, imu_file: /no/such}\n")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(path)


def test_parse_schedule(tmp_path):
    s = parse_schedule("[{start: 2, end: 5, noise: blur}]", 10)
    assert s.episodes[0].start == 2 and s.episodes[0].noise.name == "BLUR"
    f = tmp_path / "s.yaml"
    f.write_text("T: 20\nepisodes:\n  - {start: 0, end: 20, noise: rain, severity: 2}\n")
    assert parse_schedule(str(f), 10).T == 20
    assert parse_schedule("[]", 10) == NoiseSchedule(10)
    with pytest.raises(ConfigError):
        parse_schedule("[{start: 8, end: 12, noise: blur}]", 10)


def synthetic_report(rng, protocol="continual", window=None):
    seqs = []
    for seed in range(2):
        gt = random_deltas(rng, 40, rot=0.02, trans=1.0)
        gt[:, 3] += 5
        labels = np.repeat([0, 2, 6, 0], 10)
        series = {"gt": gt, "baseline": gt + rng.normal(0, 0.05, gt.shape),
                  "tta": gt + rng.normal(0, 0.03, gt.shape), "inertial": gt + rng.normal(0, 0.1, gt.shape),
                  "label": labels, "k": np.repeat([0, 1, 2, 0], 10), "loss": [None] * 10 + [0.1] * 20 + [None] * 10}
        seqs.append(make_sequence(seed, "mixed", series, [], ["clean", "blur", "brightness"], window))
    return MetricsReport(protocol, seqs, {"name": "test"}, ["an assumption"], "test")


def test_summary_oracle(rng):
    rep = synthetic_report(rng)
    seq = rep.sequences[0]
    s = seq["series"]
    gt, base = np.array(s["gt"]), np.array(s["baseline"])
    assert seq["metrics"]["baseline"]["t_rmse"] == pytest.approx(
        np.sqrt(np.mean(np.sum((gt[:, 3:] - base[:, 3:]) ** 2, axis=1))), abs=1e-12)
    assert seq["ddf_accuracy"] == 100.0
    assert seq["per_noise"]["blur"]["n"] == 10
    agg = rep.aggregate["mixed"]
    means = [q["metrics"]["tta"]["t_rmse"] for q in rep.sequences]
    assert agg["tta"]["t_rmse"]["mean"] == pytest.approx(np.mean(means), abs=1e-15)
    assert agg["t_rmse_reduction"] == pytest.approx(
        1 - agg["tta"]["t_rmse"]["mean"] / agg["baseline"]["t_rmse"]["mean"])


def test_window_metrics_use_transition_end_frame(rng):
    rep = synthetic_report(rng, "single-shift", window=(10, 30))
    seq = rep.sequences[0]
    gt, base = np.array(seq["series"]["gt"]), np.array(seq["series"]["baseline"])
    # transitions 9..28 end at frames 10..29
    err = np.sum((gt[9:29, 3:] - base[9:29, 3:]) ** 2, axis=1)
    assert seq["windows"]["episode"]["baseline"] == pytest.approx(np.sqrt(err.mean()), abs=1e-12)
    assert "pre (<10)" in render_table(rep)


def test_report_json_round_trip_and_verify(rng, tmp_path):
    rep = synthetic_report(rng)
    back = MetricsReport.load(rep.save(tmp_path / "r.json"))
    assert back.numbers() == json.loads(json.dumps(rep.numbers()))
    assert verify_report(back) == []
    back.sequences[1]["metrics"]["tta"]["t_rmse"] *= 1.001
    assert verify_report(back)
    d = rep.to_dict()
    d["schema"] = "other/9"
    with pytest.raises(ValueError):
        MetricsReport.from_dict(d)


def test_render_tables(rng):
    assert "t_rmse reduction" in render_table(synthetic_report(rng))
    rep = MetricsReport("stationary", [make_sequence(0, n, {"gt": g, "baseline": g, "tta": g, "label": [2] * 5})
                                       for n, g in [("blur", random_deltas(rng, 5)),
                                                    ("rain", random_deltas(rng, 5))]])
    table = render_table(rep)
    assert "blur" in table and "rain" in table


# ---- golden pipeline

def test_golden_report_schema(golden_run):
    schema = json.loads(SCHEMA_FILE.read_text())
    for path in [golden_run / "continual" / "report.json", GOLDEN]:
        jsonschema.validate(json.loads(path.read_text()), schema)


def test_per_pose_csv_reproduces_report(golden_run):
    rep = MetricsReport.load(golden_run / "continual" / "report.json")
    rows = read_per_pose_csv(golden_run / "continual" / "per_pose.csv")
    assert len(rows) == len(rep.sequences)
    for seq, row in zip(rep.sequences, rows):
        ser = dict(row["series"])
        redo = make_sequence(seq["seed"], seq["noise"], ser, seq["schedule"], seq["bank_labels"],
                             seq["window"])
        for key in ("metrics", "ddf_accuracy", "per_noise", "pseudo_label_r", "windows"):
            assert redo[key] == seq[key], key


def test_trajectory_files(golden_run):
    rep = MetricsReport.load(golden_run / "continual" / "report.json")
    folder = golden_run / "continual" / "trajectories"
    for seq in rep.sequences:
        for pred in ("gt", "baseline", "tta", "inertial"):
            path = folder / f"seed{seq['seed']}_{seq['noise']}_{pred}.txt"
            assert len(path.read_text().splitlines()) == seq["T"]
        gt = read_kitti_poses(folder / f"seed{seq['seed']}_{seq['noise']}_gt.txt")
        assert np.allclose(gt.matrices(), integrate(Pose.identity(), seq["series"]["gt"]).matrices())


def test_artifacts_idempotent(golden_run, tmp_path):
    rep = MetricsReport.load(golden_run / "continual" / "report.json")
    a, b = tmp_path / "a", tmp_path / "b"
    files_a = emit_artifacts(rep, a)
    emit_artifacts(rep, b)
    emit_artifacts(rep, a)
    assert any(p.suffix == ".png" for p in files_a)
    for p in files_a:
        assert p.read_bytes() == (b / p.relative_to(a)).read_bytes(), p.name
    assert (a / "report.json").read_bytes() == (golden_run / "continual" / "report.json").read_bytes()


def test_golden_matches_committed_report(golden_run):
    fresh = MetricsReport.load(golden_run / "continual" / "report.json")
    committed = MetricsReport.load(GOLDEN)
    assert fresh.numbers() == committed.numbers()


def copy_run(src, dst):
    shutil.copytree(src, dst, ignore=shutil.ignore_patterns("continual", "eval", "single-shift"))
    return dst


def test_eta_zero_equals_baseline(golden_run, tmp_path):
    out = copy_run(golden_run, tmp_path / "run")
    assert run_cli("adapt-online", "--config", "golden", "--out", out, "--eta", "0") == 0
    rep = MetricsReport.load(out / "continual" / "report.json")
    for seq in rep.sequences:
        assert seq["series"]["tta"] == seq["series"]["baseline"]
        assert seq["metrics"]["tta"] == seq["metrics"]["baseline"]


def test_empty_schedule_equals_plain_evaluation(golden_run, tmp_path):
    out = copy_run(golden_run, tmp_path / "run")
    assert run_cli("adapt-online", "--config", "golden", "--out", out, "--schedule", "[]") == 0
    rep = MetricsReport.load(out / "continual" / "report.json")
    cfg = load_config("golden")
    net, _ = load_checkpoint(out / "model.pt")
    for seq in rep.sequences:
        assert seq["schedule"] == [] and set(seq["series"]["label"]) == {0}
        stream = P.test_stream(cfg, seq["seed"], cfg.continual.length)
        fused, inertial = predict_frozen(net, stream)
        assert seq["series"]["baseline"] == fused.tolist()
        assert seq["series"]["inertial"] == inertial.tolist()


def test_eval_pred_equals_gt(tmp_path, rng, capsys):
    traj = integrate(Pose.identity(), np.c_[random_deltas(rng, 120, rot=0.01, trans=0.5)[:, :3],
                                            np.tile([2.0, 0, 0], (120, 1))])
    write_kitti_poses(tmp_path / "gt.txt", traj)
    assert run_cli("eval", "--pred", tmp_path / "gt.txt", "--gt", tmp_path / "gt.txt", "--out", tmp_path) == 0
    m = MetricsReport.load(tmp_path / "eval" / "report.json").sequences[0]["metrics"]["baseline"]
    assert m["t_rmse"] == 0.0 and m["r_rmse"] == 0.0 and m["t_rel"] == 0.0 and m["r_rel"] == 0.0


def test_cli_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run_cli("adapt-online", "--bogus")
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run_cli("teleport")
    assert e.value.code == 2
    assert run_cli("adapt-online", "--config", "golden", "--out", tmp_path) == 1
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("litevio-error: ")
    err = json.loads(line[len("litevio-error: "):])
    assert err["command"] == "adapt-online" and err["error"] == "StateError"
    assert run_cli("eval", "--pred", tmp_path / "x.txt", "--out", tmp_path) == 1
    assert run_cli("report", "--out", tmp_path / "empty") == 1


def test_out_root_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LITEVIO_OUT_ROOT", str(tmp_path))
    assert run_cli("gen-data", "--config", "golden", "--out", "rel/run") == 0
    assert (tmp_path / "rel" / "run" / "data").is_dir()


def test_report_rejects_tampered(golden_run, tmp_path):
    d = json.loads((golden_run / "continual" / "report.json").read_text())
    d["aggregate"]["continual"]["t_rmse_reduction"] = 0.5
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "report.json").write_text(json.dumps(d))
    assert run_cli("report", tmp_path / "x", "--no-plots", "--out", tmp_path) == 1


def test_stationary_with_finetuned_baselines(golden_run, tmp_path, capsys):
    out = copy_run(golden_run, tmp_path / "run")
    assert run_cli("finetune-baseline", "--config", "golden", "--out", out, "--noises", "blur") == 0
    assert (out / "finetune" / "blur.pt").exists()
    assert run_cli("adapt-stationary", "--config", "golden", "--out", out, "--epochs", "0") == 0
    rep = MetricsReport.load(out / "stationary" / "report.json")
    assert verify_report(rep) == []
    noises = [s["noise"] for s in rep.sequences]
    assert set(noises) == {"blur", "brightness", "contrast"}
    for seq in rep.sequences:
        # zero adaptation epochs evaluate the untouched dictionary
        assert seq["series"]["tta"] == seq["series"]["baseline"]
        assert ("finetuned" in seq["series"] and seq["series"]["finetuned"] is not None) == (seq["noise"] == "blur")
    assert "finetuned" in capsys.readouterr().out
