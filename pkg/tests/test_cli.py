"""End-to-end command-line pipeline at tiny scale: config handling, artifact
schemas, exit codes, and determinism."""

import json
import os

import numpy as np
import pytest

from trimlab.checkpoint import load_checkpoint
from trimlab.cli import main
from trimlab.reports import read_csv, read_history, read_json, validate_json


def write_config(path, out_dir, **overrides):
    doc = {
        "task": {"task": "tone_class", "clip_samples": 1024, "train_size": 48, "val_size": 24, "test_size": 24, "seed": 1},
        "model": {"backbone": "conv_t", "conv_channels": [6, 8, 8], "head_hidden": 16},
        "train": {"steps": 12, "batch_size": 16, "eval_every": 6, "lr": 0.005, "seed": 3},
        "sparsity": {"t": 0.5, "lambda": 1.0},
        "runtime": {"threads": 1},
        "output": str(out_dir),
    }
    for section, vals in overrides.items():
        doc.setdefault(section, {}).update(vals)
    with open(path, "w") as f:
        json.dump(doc, f)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """pretrain -> mask-train -> trim artifacts shared by the command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root / "config.json", root / "unused")

    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "pre")]) == 0
    encoder = root / "pre" / "encoder.ckpt"

    assert main(["mask-train", "--config", str(cfg), "--encoder", str(encoder), "--out", str(root / "mask")]) == 0
    assert main(["trim", "--config", str(cfg), "--checkpoint", str(root / "mask" / "model.ckpt"),
                 "--out", str(root / "trim")]) == 0
    return {"root": root, "cfg": cfg, "encoder": encoder,
            "mask_ckpt": root / "mask" / "model.ckpt", "trimmed_ckpt": root / "trim" / "trimmed.ckpt"}


class TestConfig:
    def test_unknown_key_named_in_error(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        with open(path, "w") as f:
            json.dump({"train": {"stepz": 10}}, f)
        rc = main(["probe", "--config", str(path), "--encoder", "none.ckpt", "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "stepz" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        with open(path, "w") as f:
            json.dump({"tasks": {}}, f)
        assert main(["pretrain", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "tasks" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["pretrain", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2

    def test_resolved_config_emitted_and_valid(self, pipeline):
        doc = read_json(pipeline["root"] / "pre" / "resolved_config.json")
        validate_json(doc, "resolved_config")
        assert doc["train"]["mode"] == "pretrain"
        assert doc["train"]["loss_kind"] == "masked_mse"


class TestPretrain:
    def test_checkpoint_frozen_and_loadable(self, pipeline):
        ckpt = load_checkpoint(pipeline["encoder"])
        model = ckpt.to_model()
        assert model.frozen
        assert model.spec.head is None

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        out2 = tmp_path / "pre2"
        assert main(["pretrain", "--config", str(pipeline["cfg"]), "--out", str(out2)]) == 0
        assert (out2 / "encoder.ckpt").read_bytes() == pipeline["encoder"].read_bytes()
        assert (out2 / "history.jsonl").read_bytes() == (pipeline["root"] / "pre" / "history.jsonl").read_bytes()

    def test_history_records_validate(self, pipeline):
        for rec in read_history(pipeline["root"] / "pre" / "history.jsonl"):
            validate_json(rec, "history_record")


class TestDownstreamCommands:
    def test_probe_metrics_schema(self, pipeline, tmp_path):
        out = tmp_path / "probe"
        assert main(["probe", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]),
                     "--out", str(out)]) == 0
        doc = read_json(out / "metrics.json")
        validate_json(doc, "metrics")
        assert doc["mode"] == "probe" and doc["trim_ratio"] == 0.0

    def test_mask_lambda_zero_trims_nothing(self, pipeline, tmp_path):
        cfg = write_config(tmp_path / "c.json", tmp_path / "u", sparsity={"lambda": 0.0})
        out = tmp_path / "mask0"
        assert main(["mask-train", "--config", str(cfg), "--encoder", str(pipeline["encoder"]),
                     "--out", str(out)]) == 0
        assert read_json(out / "metrics.json")["trim_ratio"] == 0.0

    def test_ssf_schema_matches_probe(self, pipeline, tmp_path):
        out_p, out_s = tmp_path / "p", tmp_path / "s"
        assert main(["probe", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]), "--out", str(out_p)]) == 0
        assert main(["ssf", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]), "--out", str(out_s)]) == 0
        probe_doc = read_json(out_p / "metrics.json")
        ssf_doc = read_json(out_s / "metrics.json")
        assert set(probe_doc) == set(ssf_doc)
        assert ssf_doc["mode"] == "ssf"
        # ssf checkpoint carries the modulation tensors
        ckpt = load_checkpoint(out_s / "model.ckpt")
        assert any(name.startswith("ssf.") for name in ckpt.arrays)

    def test_same_seed_bitwise_history(self, pipeline, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["probe", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]),
                         "--out", str(out), "--threads", "1"]) == 0
            outs.append((out / "history.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_scratch_shares_trimmed_spec(self, pipeline, tmp_path):
        out = tmp_path / "scratch"
        assert main(["scratch", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]),
                     "--plan", str(pipeline["root"] / "trim" / "trim_plan.json"), "--out", str(out)]) == 0
        scratch_model = load_checkpoint(out / "model.ckpt").to_model()
        trimmed_model = load_checkpoint(pipeline["trimmed_ckpt"]).to_model()
        enc = lambda m: {n: p.shape for n, p in m.params.items() if not n.startswith("head.")}
        assert enc(scratch_model) == enc(trimmed_model)


class TestTrim:
    def test_report_and_plan(self, pipeline):
        report = read_json(pipeline["root"] / "trim" / "trim_report.json")
        validate_json(report, "trim_report")
        assert report["verification"] is not None and report["verification"] <= 1e-5
        plan = read_json(pipeline["root"] / "trim" / "trim_plan.json")
        validate_json(plan, "trim_plan")

    def test_trim_requires_masks(self, pipeline, tmp_path, capsys):
        out = tmp_path / "probe_for_trim"
        assert main(["probe", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]), "--out", str(out)]) == 0
        rc = main(["trim", "--config", str(pipeline["cfg"]), "--checkpoint", str(out / "model.ckpt"),
                   "--out", str(tmp_path / "t")])
        assert rc == 2
        assert "mask" in capsys.readouterr().err


class TestBenchAndEval:
    def test_bench_outputs(self, pipeline, tmp_path, capsys):
        out = tmp_path / "bench"
        assert main(["bench", "--config", str(pipeline["cfg"]), "--base", str(pipeline["mask_ckpt"]),
                     "--trimmed", str(pipeline["trimmed_ckpt"]), "--out", str(out)]) == 0
        base = read_json(out / "base_costs.json")
        trimmed = read_json(out / "trimmed_costs.json")
        validate_json(base, "cost_report")
        validate_json(trimmed, "cost_report")
        assert base["bytes"] == os.path.getsize(pipeline["mask_ckpt"])
        assert trimmed["bytes"] == os.path.getsize(pipeline["trimmed_ckpt"])
        rows = read_csv(out / "comparison.csv")
        assert [r["label"] for r in rows] == ["base", "trimmed"]
        assert "Mo" in capsys.readouterr().out

    def test_bench_identical_checkpoints_speedup_band(self, pipeline, tmp_path):
        out = tmp_path / "bench_same"
        assert main(["bench", "--config", str(pipeline["cfg"]), "--base", str(pipeline["mask_ckpt"]),
                     "--trimmed", str(pipeline["mask_ckpt"]), "--out", str(out)]) == 0
        doc = read_json(out / "trimmed_costs.json")
        assert 0.8 <= doc["speedup"] <= 1.25

    def test_bench_params_match_trim_report(self, pipeline, tmp_path):
        # shared counter: report's params line up with bench's params on both sides
        report = read_json(pipeline["root"] / "trim" / "trim_report.json")
        base_model = load_checkpoint(pipeline["mask_ckpt"]).to_model()
        trimmed_model = load_checkpoint(pipeline["trimmed_ckpt"]).to_model()
        from trimlab.blocks import param_counts

        assert param_counts(base_model.spec)["encoder"] == report["params_before"]
        assert param_counts(trimmed_model.spec)["encoder"] == report["params_after"]

    def test_eval_masked_checkpoint(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        assert main(["eval", "--config", str(pipeline["cfg"]), "--checkpoint", str(pipeline["mask_ckpt"]),
                     "--out", str(out)]) == 0
        doc = read_json(out / "metrics.json")
        validate_json(doc, "metrics")
        assert doc["mode"] == "eval" and 0.0 <= doc["test_metric"] <= 1.0


class TestSweep:
    def test_sweep_csv_shape(self, pipeline, tmp_path):
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(pipeline["cfg"]), "--encoder", str(pipeline["encoder"]),
                     "--out", str(out), "--t-grid", "0.4,0.6", "--targets", "0.25,0.5,0.75"]) == 0
        rows = read_csv(out / "sweep.csv")
        assert len(rows) == 2 + 3
        kinds = [r["kind"] for r in rows]
        assert kinds[:2] == ["grid", "grid"] and kinds[2].startswith("select_")
        for r in rows:
            assert 0.0 <= float(r["trim_ratio"]) <= 1.0
