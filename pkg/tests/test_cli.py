import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from footprint_uq.cli import main
from footprint_uq.config import (build_config, config_hash, default_config, load_config,
                                 write_default_config)
from footprint_uq.domain import read_footprint
from footprint_uq import pipeline


def tiny_config(tmp_path, **overrides) -> Path:
    doc = default_config()
    doc["grid"].update({"n_lat": 24, "n_lon": 24})
    doc["dataset"].update({"n_train": 6, "n_val": 3, "n_test": 3,
                           "windows": {"train": [96.0, 120.0], "val": [126.0, 132.0],
                                       "test": [138.0, 150.0]}})
    doc["sim"].update({"n_particles": 10, "t_back_hours": 3.0})
    doc["features"]["side"] = 12
    doc["model"].update({"latent": 8, "rounds": 1, "hidden_layers": 1, "mesh_r": 3.0})
    doc["train"].update({"epochs": 2, "batch_size": 3})
    doc["ensemble"]["seeds"] = [1, 2]
    doc["analysis"]["coarse_factor"] = 6
    doc["bench"]["n"] = 10
    for key, value in overrides.items():
        doc[key].update(value)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One tiny end-to-end run shared by the CLI assertions."""
    base = tmp_path_factory.mktemp("cli")
    cfg_path = tiny_config(base)
    out = base / "run"
    assert main(["reproduce", "--config", str(cfg_path), "--out", str(out)]) == 0
    return {"config": cfg_path, "out": out}


class TestConfig:
    def test_defaults_validate(self):
        cfg = build_config(default_config())
        assert cfg.feature_spec.channels == 47
        assert cfg.ensemble_seeds == [1, 2, 3, 4]

    def test_unknown_key_rejected_with_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n "grid": {\n  "n_latt": 4\n }\n}')
        with pytest.raises(Exception) as err:
            load_config(path)
        assert "n_latt" in str(err.value) and "line 3" in str(err.value)

    def test_partial_override_merges_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"train": {"epochs": 3}}')
        cfg = load_config(path)
        assert cfg.train.epochs == 3
        assert cfg.train.batch_size == 8

    def test_hash_changes_with_content(self):
        a = default_config()
        b = default_config()
        b["train"]["epochs"] += 1
        assert config_hash(a) != config_hash(b)

    def test_write_default_round_trips(self, tmp_path):
        write_default_config(tmp_path / "d.json")
        cfg = load_config(tmp_path / "d.json")
        assert cfg.hash == config_hash(default_config())

    def test_bad_windows_rejected(self, tmp_path):
        path = tmp_path / "w.json"
        path.write_text(json.dumps(
            {"dataset": {"windows": {"train": [0, 50], "val": [40, 60],
                                     "test": [70, 80]}}}))
        with pytest.raises(Exception, match="windows"):
            load_config(path)


class TestCliContract:
    def test_missing_config_exit_1(self, tmp_path, capsys):
        rc = main(["gen-met", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path)])
        assert rc == 1
        assert "nope.json" in capsys.readouterr().err

    def test_unknown_flag_exit_1(self, tmp_path):
        rc = main(["gen-met", "--config", "x", "--out", "y", "--bogus"])
        assert rc == 1

    def test_unknown_subcommand_exit_1(self):
        assert main(["frobnicate"]) == 1

    def test_module_entrypoint_usage(self):
        proc = subprocess.run([sys.executable, "-m", "footprint_uq", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "reproduce" in proc.stdout


class TestReproduceRun:
    def test_artifacts_exist(self, tiny_run):
        out = tiny_run["out"]
        for rel in ("met.met", "data/manifest.json", "run_meta.json",
                    "models/model_seed1.ckpt", "models/model_seed1.qmap.json",
                    "models/model_seed1.epochs.csv", "flux/flux_bottomup.fpg",
                    "flux/flux_uniform.fpg", "molefrac/records.csv",
                    "analysis/summary.json", "report.md"):
            assert (out / rel).exists(), rel

    def test_analysis_products_exist(self, tiny_run):
        adir = tiny_run["out"] / "analysis"
        for name in ("agg_truth.csv", "agg_pred.csv", "agg_std.csv", "agg_cv.csv",
                     "agg_error.csv", "rose_wind.csv", "rose_cv.csv",
                     "series_cv_bottomup.csv", "series_truth_uniform.csv",
                     "mf_bottomup_std.csv", "mf_uniform_cv.csv", "panel_truth.csv",
                     "panel_member0.csv"):
            assert (adir / name).exists(), name

    def test_summary_sane(self, tiny_run):
        summary = json.loads((tiny_run["out"] / "analysis" / "summary.json").read_text())
        assert summary["n_test"] == 3 and summary["n_members"] == 2
        assert summary["baseline_r2_linear"] == pytest.approx(0.0, abs=1e-9)
        assert np.isfinite(summary["metrics_log"]["r2"])

    def test_individual_stages_rerun_from_artifacts(self, tiny_run, tmp_path):
        out = tiny_run["out"]
        cfg = tiny_run["config"]
        assert main(["analyze", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["report", "--out", str(out)]) == 0

    def test_train_cli_byte_identical_checkpoints(self, tiny_run, tmp_path):
        out = tiny_run["out"]
        cfg = tiny_run["config"]
        before = (out / "models" / "model_seed1.ckpt").read_bytes()
        assert main(["train", "--config", str(cfg), "--out", str(out),
                     "--seed", "1"]) == 0
        after = (out / "models" / "model_seed1.ckpt").read_bytes()
        assert before == after

    def test_ensemble_rejects_mismatched_checkpoints(self, tiny_run, tmp_path):
        out = tiny_run["out"]
        other_cfg = tiny_config(tmp_path, model={"latent": 6})
        other_out = tmp_path / "other"
        shutil.copytree(out / "data", other_out / "data")
        shutil.copy(out / "met.met", other_out / "met.met")
        shutil.copy(out / "run_meta.json", other_out / "run_meta.json")
        cfg2 = load_config(other_cfg)
        pipeline.stage_train_one(cfg2, other_out, 1)
        rc = main(["ensemble", "--config", str(tiny_run["config"]), "--out", str(out),
                   "--ckpts", str(other_out / "models" / "model_seed1.ckpt"),
                   str(out / "models" / "model_seed2.ckpt")])
        assert rc == 1

    def test_bench_writes_report(self, tiny_run):
        out = tiny_run["out"]
        rc = main(["bench", "--config", str(tiny_run["config"]), "--out", str(out),
                   "--n", "10"])
        assert rc == 0
        bench = json.loads((out / "bench.json").read_text())
        assert bench["ratio"] > 0 and bench["n"] == 10
        assert main(["bench", "--config", str(tiny_run["config"]), "--out", str(out),
                     "--n", "5"]) == 1

    def test_flux_files_readable(self, tiny_run):
        fp = read_footprint(tiny_run["out"] / "flux" / "flux_bottomup.fpg")
        assert np.all(fp.values >= 0)


class TestEnsemblePredictContract:
    def test_duplicated_member_zero_spread(self, tiny_run):
        from footprint_uq.domain import load_manifest
        from footprint_uq.ensemble import PostOptions, ensemble_predict
        from footprint_uq.mesh import build_maps, build_mesh
        from footprint_uq.features import read_features

        out = tiny_run["out"]
        manifest = load_manifest(out / "data" / "manifest.json")
        members = pipeline.load_members([out / "models" / "model_seed1.ckpt"] * 4)
        hyper = members[0].params.hyper
        mesh = build_mesh(hyper.side, hyper.mesh_r)
        maps = build_maps(mesh, hyper.side)
        entry = manifest.entries("test")[0]
        tensor = read_features(out / "data" / entry.features, entry.release)
        post = PostOptions(1e-9, pipeline.read_active_tau(out))
        fields, stats = ensemble_predict(members, tensor, manifest.grid, mesh,
                                         maps, post)
        assert fields.shape[0] == 4
        assert not np.asarray(stats.std).any()
        assert not np.asarray(stats.cv).any()


class TestJobsCap:
    def test_env_variable_caps_workers(self, monkeypatch):
        from footprint_uq.cli import _effective_jobs
        monkeypatch.delenv("FOOTPRINT_UQ_THREADS", raising=False)
        assert _effective_jobs(4) == 4
        monkeypatch.setenv("FOOTPRINT_UQ_THREADS", "2")
        assert _effective_jobs(4) == 2
        assert _effective_jobs(1) == 1
        monkeypatch.setenv("FOOTPRINT_UQ_THREADS", "junk")
        with pytest.raises(Exception):
            _effective_jobs(4)
