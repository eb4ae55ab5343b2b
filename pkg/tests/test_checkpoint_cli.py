"""Checkpoint round-trips and the command-line surface."""

import json
import os

import numpy as np
import pytest

from kgformer.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from kgformer.cli import RunConfig, config_hash, run
from kgformer.data import load_csv
from kgformer.errors import ValidationError
from kgformer.model import Forecaster, ModelConfig, kge_parameter_delta


def micro_model(seed=0, use_kge=False, v=3):
    cfg = ModelConfig(
        d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ff=16,
        dropout=0.0, lookback=8, label_len=4, horizon=4, channels=3, use_kge=use_kge,
    )
    adjacency = np.eye(v) if use_kge else None
    return Forecaster(cfg, adjacency=adjacency, seed=seed)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m1 = micro_model(seed=1, use_kge=True)
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, m1, {"note": "test"}, "abc123")
        m2 = micro_model(seed=99, use_kge=True)  # different init
        manifest = load_checkpoint(path, m2)
        assert manifest["config_hash"] == "abc123"
        for name, p in m1.parameters().items():
            restored = m2.parameters()[name]
            assert p.data.dtype == restored.data.dtype
            assert np.array_equal(p.data, restored.data), name

    def test_manifest_structure(self, tmp_path):
        m = micro_model()
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, m, {}, "h")
        manifest = read_manifest(path)
        assert manifest["format_version"] == 1
        names = [t["name"] for t in manifest["tensors"]]
        assert names == list(m.parameters().keys())
        total = sum(
            int(np.prod(t["shape"] or [1])) * (4 if t["dtype"] == "float32" else 8)
            for t in manifest["tensors"]
        )
        assert manifest["total_bytes"] == total
        assert os.path.getsize(os.path.join(path, "params.bin")) == total

    def test_hash_mismatch_refused_unless_forced(self, tmp_path):
        m = micro_model()
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, m, {}, "realhash")
        with pytest.raises(ValidationError, match="realhash"):
            load_checkpoint(path, micro_model(), expected_hash="otherhash")
        load_checkpoint(path, micro_model(), expected_hash="otherhash", force=True)

    def test_parameter_set_mismatch_detected(self, tmp_path):
        m = micro_model(use_kge=True)
        path = str(tmp_path / "ckpt")
        save_checkpoint(path, m, {}, "h")
        with pytest.raises(ValidationError, match="kge"):
            load_checkpoint(path, micro_model(use_kge=False))


class TestConfigHash:
    def _cfg(self, **overrides):
        base = dict(data="d.csv", out="o", pred_len=4)
        base.update(overrides)
        return RunConfig(**base)

    def test_arms_share_hash_despite_kge_flag(self):
        assert config_hash(self._cfg(use_kge=False)) == config_hash(
            self._cfg(use_kge=True, graph="g.txt")
        )

    def test_hash_sensitive_to_model_fields(self):
        assert config_hash(self._cfg()) != config_hash(self._cfg(d_model=128))
        assert config_hash(self._cfg()) != config_hash(self._cfg(seed=5))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run([
        "synth", "--generator", "var1", "--channels", "3", "--length", "600",
        "--noise-std", "0.5", "--seed", "5", "--out", str(out),
    ])
    assert code == 0
    return out


FAST = [
    "--seq-len", "16", "--label-len", "8", "--pred-len", "4",
    "--d-model", "8", "--n-heads", "2", "--enc-layers", "1", "--d-ff", "16",
    "--epochs", "1", "--batch-size", "128", "--lr", "1e-3", "--dropout", "0.0",
]


class TestCliTrainEvaluate:
    def test_train_writes_artifacts_and_rerun_is_identical(self, synth_dir, tmp_path):
        out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
        args = ["train", "--data", str(synth_dir / "data.csv"),
                "--graph", str(synth_dir / "graph.txt"), "--use-kge",
                *FAST, "--seed", "3"]
        assert run(args + ["--out", out1, "--no-plots"]) == 0
        for artifact in ("checkpoint", "config.json", "history.jsonl"):
            assert os.path.exists(os.path.join(out1, artifact)), artifact
        assert run(args + ["--out", out2, "--no-plots"]) == 0
        h1 = open(os.path.join(out1, "history.jsonl")).read()
        h2 = open(os.path.join(out2, "history.jsonl")).read()
        assert h1 == h2
        b1 = open(os.path.join(out1, "checkpoint", "params.bin"), "rb").read()
        b2 = open(os.path.join(out2, "checkpoint", "params.bin"), "rb").read()
        assert b1 == b2

    def test_use_kge_without_graph_fails_fast(self, synth_dir, tmp_path):
        code = run([
            "train", "--data", str(synth_dir / "data.csv"), "--use-kge",
            *FAST, "--seed", "0", "--out", str(tmp_path / "x"),
        ])
        assert code == 2
        assert not os.path.exists(tmp_path / "x" / "checkpoint")

    def test_evaluate_matches_train_time_test_record(self, synth_dir, tmp_path):
        out = str(tmp_path / "run")
        args = ["train", "--data", str(synth_dir / "data.csv"), *FAST,
                "--seed", "1", "--out", out, "--no-plots"]
        assert run(args) == 0
        final = [json.loads(l) for l in open(os.path.join(out, "history.jsonl"))][-1]
        code = run([
            "evaluate", "--checkpoint", os.path.join(out, "checkpoint"),
            "--data", str(synth_dir / "data.csv"), "--out", str(tmp_path / "ev"),
            "--no-plots",
        ])
        assert code == 0
        record = json.load(open(tmp_path / "ev" / "metrics.json"))
        assert record["test_mse"] == pytest.approx(final["test_mse"], rel=1e-12)
        assert record["test_mae"] == pytest.approx(final["test_mae"], rel=1e-12)

    def test_evaluate_rejects_wrong_channel_count(self, synth_dir, tmp_path):
        out = str(tmp_path / "run")
        assert run(["train", "--data", str(synth_dir / "data.csv"), *FAST,
                    "--seed", "1", "--out", out, "--no-plots"]) == 0
        other = tmp_path / "other"
        assert run(["synth", "--channels", "5", "--length", "300",
                    "--seed", "1", "--out", str(other)]) == 0
        code = run([
            "evaluate", "--checkpoint", os.path.join(out, "checkpoint"),
            "--data", str(other / "data.csv"),
        ])
        assert code == 2

    def test_prediction_dump_row_count(self, synth_dir, tmp_path):
        out = str(tmp_path / "run")
        assert run(["train", "--data", str(synth_dir / "data.csv"), *FAST,
                    "--seed", "1", "--out", out, "--no-plots"]) == 0
        ev = tmp_path / "ev"
        assert run([
            "evaluate", "--checkpoint", os.path.join(out, "checkpoint"),
            "--data", str(synth_dir / "data.csv"), "--out", str(ev),
            "--dump-predictions", "--no-plots",
        ]) == 0
        lines = open(ev / "predictions.csv").read().strip().splitlines()
        series = load_csv(str(synth_dir / "data.csv"))
        n_test = 120 + 16  # 20% of 600 plus lookback context
        n_windows = n_test - 16 - 4 + 1
        assert len(lines) - 1 == n_windows * 4 * series.channels

    def test_checkpoint_evaluate_round_trip_bit_exact(self, synth_dir, tmp_path):
        out = str(tmp_path / "run")
        assert run(["train", "--data", str(synth_dir / "data.csv"), *FAST,
                    "--seed", "2", "--out", out, "--no-plots"]) == 0
        ev1, ev2 = tmp_path / "e1", tmp_path / "e2"
        for ev in (ev1, ev2):
            assert run([
                "evaluate", "--checkpoint", os.path.join(out, "checkpoint"),
                "--data", str(synth_dir / "data.csv"), "--out", str(ev), "--no-plots",
            ]) == 0
        assert open(ev1 / "metrics.json").read() == open(ev2 / "metrics.json").read()


class TestCliCompare:
    def test_two_arm_compare_report(self, synth_dir, tmp_path):
        out = tmp_path / "cmp"
        code = run([
            "compare", "--data", str(synth_dir / "data.csv"),
            "--graph", str(synth_dir / "graph.txt"), *FAST,
            "--seeds", "1,2", "--out", str(out), "--no-plots",
        ])
        assert code == 0
        rows = open(out / "report.csv").read().strip().splitlines()
        assert len(rows) - 1 == 2 * 2  # arms x seeds
        hashes = {r.split(",")[-1] for r in rows[1:]}
        assert len(hashes) == 1  # arms share the config hash
        report = json.load(open(out / "report.json"))
        base = report["param_accounting"]["base"]
        with_kge = report["param_accounting"]["with_kge"]
        cfg = RunConfig(data="x", out="y", pred_len=4, seq_len=16, label_len=8,
                        d_model=8, n_heads=2, enc_layers=1, d_ff=16)
        mc = cfg.model_config(3, load_csv(str(synth_dir / "data.csv")).freq)
        assert with_kge - base == kge_parameter_delta(mc, 3)

    def test_empty_seeds_rejected(self, synth_dir, tmp_path):
        code = run([
            "compare", "--data", str(synth_dir / "data.csv"),
            "--graph", str(synth_dir / "graph.txt"), *FAST,
            "--seeds", "", "--out", str(tmp_path / "cmp"),
        ])
        assert code == 2


class TestCliInspect:
    def test_ett_example_graph_summary(self, capsys):
        assert run(["inspect-graph", "--graph", "graphs/ett.graph"]) == 0
        out = capsys.readouterr().out
        assert "nodes: 7" in out

    def test_graph_dataset_mismatch_nonzero_exit(self, synth_dir, capsys):
        code = run([
            "inspect-graph", "--graph", "graphs/ett.graph",
            "--data", str(synth_dir / "data.csv"),
        ])
        assert code == 2

    def test_empty_graph_warns_inert(self, tmp_path, capsys):
        g = tmp_path / "empty.graph"
        g.write_text("node a\nnode b\n")
        assert run(["inspect-graph", "--graph", str(g)]) == 0
        out = capsys.readouterr().out
        assert "inert" in out


class TestCliPreset:
    def test_full_preset_merges_under_flags(self, synth_dir, tmp_path):
        # preset sets the large geometry; explicit flags still win
        import click

        from kgformer.cli import _build_run_config, cli

        ctx = click.Context(cli.commands["train"])
        kwargs = {p.name: p.default for p in cli.commands["train"].params}
        kwargs.update(data=str(synth_dir / "data.csv"), out="o", pred_len=4,
                      preset="full", config=None)
        with ctx:
            cfg = _build_run_config(ctx, kwargs)
        assert cfg.d_model == 512 and cfg.n_heads == 8 and cfg.d_ff == 2048


class TestCliConfigFile:
    def test_config_file_supplies_defaults_flags_win(self, synth_dir, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text(
            "seq-len = 16\nlabel-len = 8\npred-len = 4\nd-model = 8\n"
            "n-heads = 2\nenc-layers = 1\nd-ff = 16\nepochs = 1\n"
            "batch-size = 128\ndropout = 0.0\n"
            f"data = {synth_dir / 'data.csv'}\n"
        )
        out = tmp_path / "run"
        code = run([
            "train", "--config", str(cfg_file), "--out", str(out),
            "--seed", "4", "--no-plots",
        ])
        assert code == 0
        snap = json.load(open(out / "config.json"))
        assert snap["config"]["seq_len"] == 16
        assert snap["config"]["seed"] == 4
