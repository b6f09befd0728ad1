"""End-to-end CLI flows on a miniature task: exit codes, manifests, artifacts."""

import json
import subprocess
import sys

import pytest
import yaml

from simcr.cli import main

SPEC_YAML = """
task:
  src_vocab_size: 8
  tgt_vocab_size: 8
  len_min: 3
  len_max: 5
  frame_dim: 4
  repeat_min: 2
  repeat_max: 3
  jitter_std: 0.2
sizes: {train: 30, valid: 8, test: 8}
ext: {train: 40, valid: 8}
filter: {min_frames: 5, max_frames: 64, max_len_ratio: 1.5}
"""

PIPELINE_YAML = """
name: mini
seed: 4
model: {d_model: 8, n_heads: 2, n_enc_layers: 1, n_dec_layers: 1, d_ffn: 16, max_positions: 32}
stages:
  - name: mt
    tasks: [mt]
    corpus: {mt: ext}
    max_steps: 6
    peak_lr: 1.0e-3
    warmup_steps: 2
    eval_every: 3
    max_text_tokens: 64
  - name: st
    tasks: [st]
    init: mt
    alpha: 1.0
    max_steps: 6
    peak_lr: 5.0e-4
    warmup_steps: 2
    eval_every: 3
    max_frames: 256
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text(SPEC_YAML)
    data = root / "data"
    rc = main(["gen-data", "--out", str(data), "--spec", str(spec), "--seed", "3"])
    assert rc == 0
    pipe = root / "pipeline.yaml"
    pipe.write_text(PIPELINE_YAML)
    run = root / "run1"
    rc = main(["train", "--data", str(data), "--out", str(run),
               "--config", str(pipe)])
    assert rc == 0
    return {"root": root, "data": data, "pipe": pipe, "run": run}


class TestGenData:
    def test_outputs_and_manifest(self, workspace):
        data = workspace["data"]
        assert (data / "corpus.main.tsv").exists()
        assert (data / "corpus.ext.tsv").exists()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["seed"] == 3
        assert manifest["sizes"]["train"] == 30

    def test_refuses_overwrite_without_force(self, workspace):
        root = workspace["root"]
        spec = root / "spec.yaml"
        rc = main(["gen-data", "--out", str(workspace["data"]), "--spec", str(spec)])
        assert rc == 1
        rc = main(["gen-data", "--out", str(workspace["data"]), "--spec", str(spec),
                   "--seed", "3", "--force"])
        assert rc == 0

    def test_seed_changes_corpus(self, workspace, tmp_path):
        spec = workspace["root"] / "spec.yaml"
        out = tmp_path / "d2"
        assert main(["gen-data", "--out", str(out), "--spec", str(spec), "--seed", "4"]) == 0
        a = (workspace["data"] / "corpus.main.tsv").read_text()
        b = (out / "corpus.main.tsv").read_text()
        assert a != b

    def test_invalid_spec_exit_one(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("task: {src_vocab_size: 4, tgt_vocab_size: 5}\n")
        assert main(["gen-data", "--out", str(tmp_path / "x"), "--spec", str(bad)]) == 1


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        assert (run / "final.ckpt").exists()
        assert (run / "mt.best.ckpt").exists()
        assert (run / "st.log.csv").exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["pipeline"] == "mini"
        assert manifest["seed"] == 4
        assert set(manifest["stages"]) == {"mt", "st"}

    def test_dry_run_prints_stage_table(self, workspace, capsys):
        rc = main(["train", "--data", str(workspace["data"]), "--out", "/nonexistent",
                   "--pipeline", "simzerocr", "--dry-run"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mt_pretrain" in out and "asrmt_finetune" in out
        assert "45.00" in out  # the cross weight of the final stage

    def test_pipeline_and_config_mutually_exclusive(self, workspace):
        rc = main(["train", "--data", str(workspace["data"]), "--out", "/tmp/x",
                   "--pipeline", "simregcr", "--config", str(workspace["pipe"])])
        assert rc == 1

    def test_unknown_pipeline_exit_one(self, workspace):
        rc = main(["train", "--data", str(workspace["data"]), "--out", "/tmp/x",
                   "--pipeline", "bogus"])
        assert rc == 1

    def test_env_seed_override(self, workspace, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SIMCR_SEED", "99")
        rc = main(["train", "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "envrun"), "--pipeline", "baseline-reg",
                   "--dry-run"])
        assert rc == 0
        assert "(seed 99)" in capsys.readouterr().out


class TestEvaluate:
    def test_report_files(self, workspace, tmp_path):
        out = tmp_path / "eval"
        rc = main(["evaluate", "--checkpoint", str(workspace["run"] / "final.ckpt"),
                   "--data", str(workspace["data"]), "--out", str(out),
                   "--task", "st", "--beam", "2", "--split", "test"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert "st" in report["bleu"]
        assert (out / "report.csv").exists()
        assert (out / "manifest.json").exists()

    def test_greedy_equals_beam_one(self, workspace, tmp_path):
        outs = []
        for i, flags in enumerate((["--beam", "1"], ["--greedy"])):
            out = tmp_path / f"e{i}"
            rc = main(["evaluate", "--checkpoint", str(workspace["run"] / "final.ckpt"),
                       "--data", str(workspace["data"]), "--out", str(out),
                       "--task", "st"] + flags)
            assert rc == 0
            outs.append(json.loads((out / "report.json").read_text()))
        assert outs[0]["bleu"] == outs[1]["bleu"]
        assert outs[0]["samples"] == outs[1]["samples"]

    def test_simsearch_alias_forces_diagnostics(self, workspace, tmp_path):
        out = tmp_path / "ss"
        rc = main(["simsearch", "--checkpoint", str(workspace["run"] / "final.ckpt"),
                   "--data", str(workspace["data"]), "--out", str(out), "--task", "st"])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["simsearch_accuracy"] is not None
        assert (out / "representations.tsv").exists()

    def test_unknown_tag_lists_registered(self, workspace, tmp_path, capsys):
        rc = main(["evaluate", "--checkpoint", str(workspace["run"] / "final.ckpt"),
                   "--data", str(workspace["data"]), "--out", str(tmp_path / "x"),
                   "--tag", "de"])
        assert rc == 1
        assert "src, tgt" in capsys.readouterr().err

    def test_missing_checkpoint_exit_one(self, workspace, tmp_path):
        rc = main(["evaluate", "--checkpoint", str(tmp_path / "missing.ckpt"),
                   "--data", str(workspace["data"]), "--out", str(tmp_path / "x")])
        assert rc == 1


class TestReport:
    def test_aggregate_two_runs(self, workspace, tmp_path):
        # evaluate into the run dir so the report finds it
        rc = main(["simsearch", "--checkpoint", str(workspace["run"] / "final.ckpt"),
                   "--data", str(workspace["data"]),
                   "--out", str(workspace["run"] / "eval-test"), "--task", "st"])
        assert rc == 0
        out = tmp_path / "agg"
        rc = main(["report", str(workspace["run"]), str(workspace["run"]),
                   "--out", str(out)])
        assert rc == 0
        lines = (out / "comparison.csv").read_text().splitlines()
        assert len(lines) == 3  # header + two rows (same run twice)
        assert lines[1] == lines[2]  # identical run given twice -> identical rows
        assert (out / "bleu_vs_simsearch.svg").exists()
        assert (out / "loss_curves.svg").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["scatter_points"] == 2

    def test_missing_reports_not_fatal(self, tmp_path):
        empty = tmp_path / "empty_run"
        empty.mkdir()
        out = tmp_path / "agg2"
        assert main(["report", str(empty), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert "empty_run" in summary["absent"]

    def test_missing_dir_exit_one(self, tmp_path):
        assert main(["report", str(tmp_path / "nope"), "--out", str(tmp_path / "agg3")]) == 1


class TestExitCodes:
    def test_usage_error_is_one(self):
        assert main(["train", "--data", "/nope"]) == 1  # missing --out

    def test_console_entry_smoke(self):
        proc = subprocess.run([sys.executable, "-m", "simcr.cli", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "simcr" in proc.stdout
