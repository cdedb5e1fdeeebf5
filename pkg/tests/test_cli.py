import json
import subprocess
import sys

import numpy as np
import pytest

from vprkit.cli import parse_report_lines, run_command
from vprkit.evaluator import RecallReport
from vprkit.tensorio import DescriptorSet, save_descriptors

SMALL_SYNTH = [
    "--set", "synth.num_places=12",
    "--set", "synth.images_per_place=6",
    "--set", "synth.height=5",
    "--set", "synth.width=5",
    "--set", "synth.channels=8",
]
SMALL_TRAIN = [
    "--set", "train.num_places=4",
    "--set", "train.images_per_place=3",
    "--set", "train.out_channels=8",
    "--set", "train.max_epochs=2",
]


def synth(tmp_path, name="db", seed=7, extra=()):
    out = tmp_path / name
    rc = run_command(["synth", "--out", str(out), "--seed", str(seed), *SMALL_SYNTH, *extra])
    assert rc == 0
    return out


class TestSynthCommand:
    def test_writes_artifacts(self, tmp_path):
        out = synth(tmp_path)
        assert (out / "manifest.csv").exists()
        assert (out / "payloads.vprk").exists()
        assert (out / "resolved_config.json").exists()

    def test_deterministic_bytes(self, tmp_path):
        a = synth(tmp_path, "a", seed=7)
        b = synth(tmp_path, "b", seed=7)
        for name in ("manifest.csv", "payloads.vprk", "resolved_config.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = synth(tmp_path, "a", seed=7)
        b = synth(tmp_path, "b", seed=8)
        assert (a / "payloads.vprk").read_bytes() != (b / "payloads.vprk").read_bytes()


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        rc = run_command(
            ["synth", "--out", str(tmp_path / "x"), "--set", "synth.bogus=1"]
        )
        assert rc == 1
        assert "bogus" in capsys.readouterr().err

    def test_unknown_key_in_file_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"mystery": {}}), encoding="utf-8")
        rc = run_command(["synth", "--out", str(tmp_path / "x"), "--config", str(cfg)])
        assert rc == 1
        assert "mystery" in capsys.readouterr().err

    def test_set_override_lands_in_resolved_config(self, tmp_path):
        out = synth(tmp_path, extra=["--set", "synth.gain=0.15"])
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["synth"]["gain"] == 0.15
        assert resolved["seed"] == 7

    def test_config_file_merges(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"max_epochs": 3}}), encoding="utf-8")
        out = tmp_path / "db"
        rc = run_command(
            ["synth", "--out", str(out), "--config", str(cfg), *SMALL_SYNTH]
        )
        assert rc == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["train"]["max_epochs"] == 3

    def test_wrong_type_rejected(self, tmp_path, capsys):
        rc = run_command(
            ["synth", "--out", str(tmp_path / "x"), "--set", "synth.num_places=true"]
        )
        assert rc == 1


class TestBuildDb:
    def test_manifest_roundtrip(self, tmp_path):
        src = synth(tmp_path, "src")
        out = tmp_path / "rebuilt"
        rc = run_command(
            [
                "build-db",
                "--manifest", str(src / "manifest.csv"),
                "--payloads", str(src / "payloads.vprk"),
                "--out", str(out),
            ]
        )
        assert rc == 0
        assert (out / "manifest.csv").read_bytes() == (src / "manifest.csv").read_bytes()
        assert (out / "payloads.vprk").read_bytes() == (src / "payloads.vprk").read_bytes()

    def test_missing_manifest_fails(self, tmp_path, capsys):
        rc = run_command(
            ["build-db", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]
        )
        assert rc == 1

    def test_payload_count_mismatch_fails(self, tmp_path, capsys):
        src = synth(tmp_path, "src")
        other = synth(tmp_path, "other", extra=["--set", "synth.num_places=13"])
        rc = run_command(
            [
                "build-db",
                "--manifest", str(src / "manifest.csv"),
                "--payloads", str(other / "payloads.vprk"),
                "--out", str(tmp_path / "o"),
            ]
        )
        assert rc == 1


class TestTrainEval:
    def test_train_then_eval(self, tmp_path):
        db = synth(tmp_path)
        run_dir = tmp_path / "run"
        rc = run_command(
            ["train", "--db", str(db), "--out", str(run_dir), "--seed", "7", *SMALL_TRAIN]
        )
        assert rc == 0
        assert (run_dir / "checkpoint.vprc").exists()
        assert (run_dir / "trainlog.json").exists()

        eval_dir = tmp_path / "eval"
        rc = run_command(
            [
                "eval",
                "--db", str(db),
                "--checkpoint", str(run_dir / "checkpoint.vprc"),
                "--out", str(eval_dir),
                "--seed", "7",
                "--label", "run_a",
            ]
        )
        assert rc == 0
        report = RecallReport.from_kv_lines((eval_dir / "report.kv").read_text())
        assert report.label == "run_a"
        assert set(report.ks) == {1, 5, 10}
        assert (eval_dir / "queries.vprk").exists()
        assert (eval_dir / "queries.csv").exists()
        assert (eval_dir / "references.vprk").exists()

    def test_eval_descriptor_set_against_itself(self, tmp_path, rng):
        from vprkit.embeddings import normalize_rows

        vectors = normalize_rows(rng.standard_normal((20, 8)))
        ds = DescriptorSet(
            vectors, [f"d{i}" for i in range(20)],
            np.zeros(20), np.zeros(20), rng.integers(0, 5, 20),
        )
        path = tmp_path / "self.vprk"
        save_descriptors(path, ds)
        out = tmp_path / "selfeval"
        rc = run_command(
            ["eval", "--queries", str(path), "--refs", str(path), "--out", str(out)]
        )
        assert rc == 0
        report = RecallReport.from_kv_lines((out / "report.kv").read_text())
        assert report.recall_at[1] == 1.0

    def test_eval_requires_inputs(self, tmp_path):
        assert run_command(["eval", "--out", str(tmp_path / "x")]) == 1


class TestReduce:
    def test_fit_and_apply(self, tmp_path, rng):
        from vprkit.embeddings import normalize_rows

        vectors = normalize_rows(rng.standard_normal((50, 16)))
        ds = DescriptorSet(
            vectors, [f"d{i}" for i in range(50)],
            np.zeros(50), np.zeros(50), rng.integers(0, 9, 50),
        )
        path = tmp_path / "full.vprk"
        save_descriptors(path, ds)
        out = tmp_path / "pca"
        rc = run_command(
            [
                "reduce", "--fit", str(path), "--apply", str(path),
                "--out", str(out), "--set", "pca.out_dim=4",
            ]
        )
        assert rc == 0
        assert (out / "pca_model.vprc").exists()
        from vprkit.tensorio import load_descriptors

        reduced = load_descriptors(out / "reduced.vprk")
        assert reduced.vectors.shape == (50, 4)

    def test_apply_with_saved_model(self, tmp_path, rng):
        from vprkit.embeddings import normalize_rows
        from vprkit.tensorio import load_descriptors

        vectors = normalize_rows(rng.standard_normal((30, 8)))
        ds = DescriptorSet(
            vectors, [f"d{i}" for i in range(30)],
            np.zeros(30), np.zeros(30), np.arange(30),
        )
        path = tmp_path / "x.vprk"
        save_descriptors(path, ds)
        fit_dir = tmp_path / "fit"
        assert run_command(
            ["reduce", "--fit", str(path), "--out", str(fit_dir), "--set", "pca.out_dim=3"]
        ) == 0
        apply_dir = tmp_path / "apply"
        assert run_command(
            [
                "reduce", "--apply", str(path),
                "--model", str(fit_dir / "pca_model.vprc"),
                "--out", str(apply_dir),
            ]
        ) == 0
        assert load_descriptors(apply_dir / "reduced.vprk").vectors.shape == (30, 3)

    def test_no_action_fails(self, tmp_path):
        assert run_command(["reduce", "--out", str(tmp_path / "x")]) == 1


class TestReport:
    def _write_report(self, path, label, values):
        rep = RecallReport(
            ks=[1, 5, 10],
            recall_at=dict(zip([1, 5, 10], values)),
            queries_evaluated=24,
            label=label,
        )
        path.write_text(rep.to_kv_lines(), encoding="utf-8")

    def test_ablation_table_structure(self, tmp_path):
        # one row per pooling-grid variant, like an s in {1,2,3,4} sweep
        files = []
        for s in (1, 2, 3, 4):
            path = tmp_path / f"conv_ap_s{s}.kv"
            self._write_report(path, f"conv_ap_s{s}x{s}", [0.70 + s * 0.05, 0.9, 0.95])
            files.append(str(path))
        out = tmp_path / "table"
        rc = run_command(["report", *files, "--out", str(out)])
        assert rc == 0
        text = (out / "table.txt").read_text()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        assert len(lines) == 5  # header + 4 variants
        assert lines[0].split()[:1] == ["run"]
        assert [ln.split()[0] for ln in lines[1:]] == [
            "conv_ap_s1x1", "conv_ap_s2x2", "conv_ap_s3x3", "conv_ap_s4x4"
        ]

    def test_machine_readable_roundtrip(self, tmp_path):
        path = tmp_path / "a.kv"
        values = [0.8421052631578947, 0.9473684210526315, 1.0]
        self._write_report(path, "run_a", values)
        out = tmp_path / "table"
        assert run_command(["report", str(path), "--out", str(out)]) == 0
        parsed = parse_report_lines((out / "table.kv").read_text())
        assert parsed[("run_a", 1)] == values[0]  # exact round trip
        assert parsed[("run_a", 5)] == values[1]
        assert parsed[("run_a", 10)] == values[2]

    def test_inconsistent_ks_rejected(self, tmp_path):
        a = tmp_path / "a.kv"
        self._write_report(a, "a", [0.5, 0.6, 0.7])
        b = tmp_path / "b.kv"
        rep = RecallReport(ks=[1, 2], recall_at={1: 0.5, 2: 0.6}, label="b")
        b.write_text(rep.to_kv_lines(), encoding="utf-8")
        assert run_command(["report", str(a), str(b), "--out", str(tmp_path / "t")]) == 1


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        result = subprocess.run(
            [sys.executable, "-m", "vprkit.cli", "synth", "--out", str(tmp_path / "db"),
             "--seed", "3", *SMALL_SYNTH],
            capture_output=True, text=True,
        )
        assert result.returncode == 0
        assert (tmp_path / "db" / "payloads.vprk").exists()

    def test_bad_subcommand_exits_nonzero(self):
        result = subprocess.run(
            [sys.executable, "-m", "vprkit.cli", "frobnicate"],
            capture_output=True, text=True,
        )
        assert result.returncode != 0
