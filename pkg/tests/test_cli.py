import json

import numpy as np
import pytest

from msdpn import ConfigError
from msdpn.cli import (EXIT_CONFIG, EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, RESOLUTION_COLUMNS, SWEEP_COLUMNS, main,
                       parse_fractions, parse_resolutions)
from msdpn.datagen import default_rig, read_dataset, read_tensor, synthesize_sample, write_dataset, write_tensor
from msdpn.data_utils import load_dataframe_from_csv
from msdpn.geometry import forward_aligned_transform
from msdpn.metrics import REPORT_COLUMNS

TINY_DATA = {"scenes": 4, "height": 32, "width": 32, "beams": 90}
TINY_MODEL = {"stages": 1, "width_mult": 0.125, "csfa_mode": "none", "input_mode": "ref-d"}


def _run(tmp_path, *argv):
    return main(["--log-dir", str(tmp_path / "logs"), *argv])


def _synth(tmp_path, name="data", scenes=3, seed=0):
    out = tmp_path / name
    code = _run(tmp_path, "synth", "--scenes", str(scenes), "--out", str(out), "--seed", str(seed),
                "--height", "32", "--width", "32", "--beams", "90")
    assert code == EXIT_OK
    return out


def _config(tmp_path, name="cfg.json", evaluation=None, model=None, **train):
    path = tmp_path / name
    settings = {"lr": 0.0, "epochs": 2, "batch_size": 4}
    settings.update(train)
    config = {"data": TINY_DATA, "model": {**TINY_MODEL, **(model or {})}, "train": settings}
    if evaluation is not None:
        config["eval"] = evaluation
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


def _train(tmp_path, out_name, config, *extra):
    out = tmp_path / out_name
    assert _run(tmp_path, "train", "--config", str(config), "--out", str(out), *extra) == EXIT_OK
    return out


def test_parse_fractions():
    assert parse_fractions("1.0,0.1, 0.5,0.1") == [0.1, 0.5, 1.0]
    for text in ("", "0.5,1.5", "half"):
        with pytest.raises(ConfigError):
            parse_fractions(text)



def test_parse_resolutions():
    assert parse_resolutions("1.0,0.25,1") == [0.25, 1.0]
    for text in ("", "0,1", "-0.5", "400", "fine"):
        with pytest.raises(ConfigError):
            parse_resolutions(text)


def test_no_command_is_a_config_error(tmp_path):
    assert _run(tmp_path) == EXIT_CONFIG
    assert _run(tmp_path, "synth", "--scenes", "two", "--out", str(tmp_path)) == EXIT_CONFIG


def test_synth_writes_dataset(tmp_path, capsys):
    out = _synth(tmp_path, scenes=3)
    assert "3 samples" in capsys.readouterr().out
    assert len(read_dataset(out)) == 3
    assert (tmp_path / "logs" / "logs" / "synth.log").exists()


def test_synth_zero_scenes(tmp_path):
    out = _synth(tmp_path, scenes=0)
    assert read_dataset(out) == []
    assert _run(tmp_path, "synth", "--scenes", "-1", "--out", str(tmp_path / "neg")) == EXIT_CONFIG


def test_synth_is_byte_reproducible(tmp_path):
    a, b = _synth(tmp_path, "a", seed=4), _synth(tmp_path, "b", seed=4)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    for relative in files:
        assert (a / relative).read_bytes() == (b / relative).read_bytes()


def test_encode_writes_channels_and_previews(tmp_path):
    data = _synth(tmp_path)
    out = tmp_path / "encoded"
    assert _run(tmp_path, "encode", "--dataset", str(data), "--mode", "ref-d", "--out", str(out)) == EXIT_OK
    for sample in read_dataset(data):
        channel = read_tensor(out / sample.sample_id / "depth.msdt")
        assert channel.shape == (32, 32)
        for column in channel.T:
            assert np.all(column > 0) or np.all(column == 0)
        assert (out / sample.sample_id / "depth.png").exists()
    assert _run(tmp_path, "encode", "--dataset", str(tmp_path / "none"), "--mode", "proj-d",
                "--out", str(out)) == EXIT_INPUT


def test_train_with_zero_learning_rate(tmp_path):
    out = _train(tmp_path, "run", _config(tmp_path))
    trace = load_dataframe_from_csv(out / "loss.csv")
    assert list(trace.columns) == ["epoch", "loss"]
    assert list(trace["epoch"]) == [0, 1]
    assert trace["loss"].iloc[1] == pytest.approx(trace["loss"].iloc[0], rel=1e-5)
    assert (out / "model.msdc").exists()

    resolved = json.loads((out / "config.resolved.json").read_text(encoding="utf-8"))
    assert resolved["model"]["height"] == 32
    assert resolved["train"]["input_mode"] == "ref-d"


def test_train_runs_are_bit_identical(tmp_path):
    config = _config(tmp_path, lr=1e-3, batch_size=2)
    a, b = _train(tmp_path, "a", config), _train(tmp_path, "b", config)
    assert (a / "model.msdc").read_bytes() == (b / "model.msdc").read_bytes()


def test_train_resume_matches_uninterrupted_run(tmp_path):
    config = _config(tmp_path, lr=1e-3, batch_size=2, checkpoint_every=1)
    full = _train(tmp_path, "full", config)
    resumed = _train(tmp_path, "resumed", config, "--resume", str(full / "checkpoints" / "epoch_0001.msdc"))
    for name in ("model.msdc", "loss.csv"):
        assert (full / name).read_bytes() == (resumed / name).read_bytes()


def test_train_configuration_errors(tmp_path):
    bad_key = tmp_path / "bad_key.json"
    bad_key.write_text(json.dumps({"model": {"depth": 3}}), encoding="utf-8")
    assert _run(tmp_path, "train", "--config", str(bad_key), "--out", str(tmp_path / "x")) == EXIT_CONFIG

    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    assert _run(tmp_path, "train", "--config", str(broken), "--out", str(tmp_path / "x")) == EXIT_CONFIG

    assert _run(tmp_path, "train", "--config", str(tmp_path / "missing.json"),
                "--out", str(tmp_path / "x")) == EXIT_INPUT
    assert not (tmp_path / "x" / "model.msdc").exists()


def test_train_evaluates_on_configured_dataset(tmp_path):
    data = _synth(tmp_path, scenes=2, seed=50)
    plain = _train(tmp_path, "plain", _config(tmp_path, epochs=1))
    assert not (plain / "eval").exists()

    for write_png in (True, False):
        config = _config(tmp_path, f"cfg_{write_png}.json", evaluation={"dataset": str(data), "write_png": write_png},
                         epochs=1)
        run = _train(tmp_path, f"run_{write_png}", config)
        frame = load_dataframe_from_csv(run / "eval" / "report.csv", dtype={"image_id": str})
        assert list(frame.columns) == REPORT_COLUMNS
        assert len(frame) == 3
        assert len(list((run / "eval" / "predictions").glob("*.png"))) == (2 if write_png else 0)

    log_text = (tmp_path / "logs" / "logs" / "train.log").read_text(encoding="utf-8")
    assert "Configuration loaded" in log_text

    missing = _config(tmp_path, "cfg_missing.json", evaluation={"dataset": str(tmp_path / "none")}, epochs=1)
    assert _run(tmp_path, "train", "--config", str(missing), "--out", str(tmp_path / "x")) == EXIT_INPUT


def test_eval_report_and_previews(tmp_path):
    run = _train(tmp_path, "run", _config(tmp_path, epochs=1))
    data = _synth(tmp_path, scenes=3, seed=50)
    report = tmp_path / "eval" / "report.csv"
    assert _run(tmp_path, "eval", "--checkpoint", str(run / "model.msdc"), "--dataset", str(data),
                "--report", str(report)) == EXIT_OK

    frame = load_dataframe_from_csv(report, dtype={"image_id": str})
    assert list(frame.columns) == REPORT_COLUMNS
    assert len(frame) == 4
    assert frame["image_id"].iloc[-1] == "ALL"
    assert len(list((tmp_path / "eval" / "predictions").glob("*.png"))) == 3

    assert _run(tmp_path, "eval", "--checkpoint", str(tmp_path / "missing.msdc"), "--dataset", str(data),
                "--report", str(report)) == EXIT_INPUT


def test_sweep_dropout(tmp_path):
    run_a = _train(tmp_path, "a", _config(tmp_path, epochs=1))
    run_b = _train(tmp_path, "b", _config(tmp_path, "cfg_b.json", epochs=1, lr=1e-3, batch_size=2))
    data = _synth(tmp_path, scenes=3, seed=50)
    report = tmp_path / "sweep" / "sweep.csv"
    code = _run(tmp_path, "sweep-dropout", "--checkpoint", str(run_a / "model.msdc"),
                "--checkpoint", str(run_b / "model.msdc"), "--dataset", str(data),
                "--fractions", "1.0,0.1,0.25,0.5,0.75", "--report", str(report))
    assert code == EXIT_OK

    table = load_dataframe_from_csv(report)
    assert list(table.columns) == SWEEP_COLUMNS
    assert len(table) == 10
    assert list(table["model"].unique()) == ["ref-d#0", "ref-d#1"]
    for _, rows in table.groupby("model"):
        assert list(rows["fraction"]) == [0.1, 0.25, 0.5, 0.75, 1.0]

    eval_report = tmp_path / "eval" / "report.csv"
    assert _run(tmp_path, "eval", "--checkpoint", str(run_a / "model.msdc"), "--dataset", str(data),
                "--report", str(eval_report), "--no-png") == EXIT_OK
    summary = load_dataframe_from_csv(eval_report).iloc[-1]
    full = table[(table["model"] == "ref-d#0") & (table["fraction"] == 1.0)].iloc[0]
    assert full["rmse_mm"] == pytest.approx(summary["rmse_mm"])
    assert full["delta1"] == pytest.approx(summary["delta1"])

    assert _run(tmp_path, "sweep-dropout", "--checkpoint", str(run_a / "model.msdc"), "--dataset", str(data),
                "--fractions", "0.5,1.5", "--report", str(report)) == EXIT_CONFIG



def test_sweep_resolution(tmp_path):
    ref = _train(tmp_path, "ref", _config(tmp_path, epochs=1))
    proj = _train(tmp_path, "proj", _config(tmp_path, "cfg_proj.json", model={"input_mode": "proj-d"}, epochs=1))
    report = tmp_path / "sweep" / "resolution.csv"
    code = _run(tmp_path, "sweep-resolution", "--checkpoint", str(ref / "model.msdc"),
                "--checkpoint", str(proj / "model.msdc"), "--resolutions", "2.0,1.0", "--scenes", "2",
                "--report", str(report))
    assert code == EXIT_OK

    table = load_dataframe_from_csv(report)
    assert list(table.columns) == RESOLUTION_COLUMNS
    assert len(table) == 4
    assert list(table["model"].unique()) == ["ref-d", "proj-d"]
    for _, rows in table.groupby("model", sort=False):
        assert list(rows["resolution_deg"]) == [1.0, 2.0]
        assert list(rows["beams"]) == [181, 91]

    data = tmp_path / "scans_1deg"
    assert _run(tmp_path, "synth", "--scenes", "2", "--out", str(data), "--height", "32", "--width", "32",
                "--beams", "181") == EXIT_OK
    eval_report = tmp_path / "eval" / "report.csv"
    assert _run(tmp_path, "eval", "--checkpoint", str(ref / "model.msdc"), "--dataset", str(data),
                "--report", str(eval_report), "--no-png") == EXIT_OK
    summary = load_dataframe_from_csv(eval_report).iloc[-1]
    row = table[(table["model"] == "ref-d") & (table["resolution_deg"] == 1.0)].iloc[0]
    assert row["rmse_mm"] == pytest.approx(summary["rmse_mm"], rel=1e-4)

    assert _run(tmp_path, "sweep-resolution", "--checkpoint", str(ref / "model.msdc"), "--resolutions", "0,1",
                "--report", str(report)) == EXIT_CONFIG
    assert _run(tmp_path, "sweep-resolution", "--checkpoint", str(ref / "model.msdc"), "--scenes", "0",
                "--report", str(report)) == EXIT_CONFIG
    assert _run(tmp_path, "sweep-resolution", "--checkpoint", str(tmp_path / "missing.msdc"),
                "--report", str(report)) == EXIT_INPUT

def test_stats_on_planar_rig(tmp_path, capsys):
    rig = default_rig(32, 32, lidar_pose=forward_aligned_transform(t=(0.0, 0.0, 0.0)))
    samples = [synthesize_sample(seed, height=32, width=32, beams=90, rig=rig) for seed in range(3)]
    write_dataset(tmp_path / "planar", samples)
    capsys.readouterr()
    assert _run(tmp_path, "stats", "--dataset", str(tmp_path / "planar")) == EXIT_OK
    assert "min_v: mean=16.00 std=0.00" in capsys.readouterr().out


def test_stats_errors(tmp_path):
    assert _run(tmp_path, "stats", "--dataset", str(tmp_path / "none")) == EXIT_INPUT

    sample = synthesize_sample(0, height=32, width=32, beams=90)
    sample.rig = default_rig(64, 64)
    write_dataset(tmp_path / "mismatched", [sample])
    assert _run(tmp_path, "stats", "--dataset", str(tmp_path / "mismatched")) == EXIT_INVARIANT


def _corrupt(tmp_path, name, change):
    directory = tmp_path / name
    write_dataset(directory, [synthesize_sample(0, height=32, width=32, beams=90)])
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    change(directory, manifest["samples"][0])
    (directory / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    return directory


def test_stats_rejects_corrupt_sample_files(tmp_path, capsys):
    def bad_utf8_scan(directory, entry):
        (directory / entry["scan"]).write_bytes(b"# msdpn-scan v1\n\xff\xfe,1\n")

    def missing_scan_key(directory, entry):
        del entry["scan"]

    def negative_depth(directory, entry):
        write_tensor(directory / entry["depth"], -np.ones((32, 32), dtype=np.float32))

    def rgb_shape_mismatch(directory, entry):
        write_tensor(directory / entry["rgb"], np.zeros((3, 16, 16), dtype=np.float32))

    for change in (bad_utf8_scan, missing_scan_key, negative_depth, rgb_shape_mismatch):
        directory = _corrupt(tmp_path, change.__name__, change)
        capsys.readouterr()
        assert _run(tmp_path, "stats", "--dataset", str(directory)) == EXIT_INPUT, change.__name__
        assert "error:" in capsys.readouterr().err
