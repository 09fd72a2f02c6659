import json

import numpy as np
import pytest

from tacfuse.checkpoint import read_records
from tacfuse.cli import main
from tacfuse.config import (ConfigError, RunConfig, desk_config, load_run_config,
                            make_model_config, paper_config, run_config_from_dict,
                            write_resolved)
from tacfuse.dataset import load_manifest
from tacfuse.policy import init_policy_params


class TestModelConfig:
    def test_desk_preset_shapes(self):
        cfg = desk_config()
        assert (cfg.d_model, cfg.heads, cfg.enc_layers, cfg.dec_layers) == (64, 4, 4, 1)
        assert (cfg.chunk, cfg.z_dim, cfg.action_dim, cfg.proprio_dim) == (8, 8, 3, 4)
        assert cfg.vis_tokens_per_camera == 16
        assert cfg.tac_tokens_per_sensor == 1

    def test_paper_preset_dims(self):
        cfg = paper_config()
        assert (cfg.d_model, cfg.heads, cfg.chunk, cfg.z_dim) == (512, 8, 100, 32)
        assert cfg.action_dim == 16
        assert cfg.cameras == 3
        assert cfg.lr_backbone == 1e-5 and cfg.lr_tactile == 1e-4

    def test_heads_must_divide_d_model(self):
        with pytest.raises(ConfigError):
            desk_config(d_model=62)

    def test_tactile_progression_fixed(self):
        with pytest.raises(ConfigError):
            desk_config(tac_enc_channels=(16, 32, 64, 128, 256))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            make_model_config("huge")


class TestRunConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="frobnicate"):
            run_config_from_dict({"train": {"frobnicate": 1}})
        with pytest.raises(ConfigError, match="sections"):
            run_config_from_dict({"training": {}})
        with pytest.raises(ConfigError, match="model"):
            run_config_from_dict({"model": {"dmodel": 64}})

    def test_resolved_roundtrip(self, tmp_path):
        cfg = RunConfig(model=desk_config(d_model=32, heads=4), steps=77, seed=3,
                        clearance="medium", data_dir="/d", out_dir="/o")
        path = tmp_path / "resolved.toml"
        write_resolved(cfg, path)
        back = load_run_config(path)
        assert back.model.d_model == 32
        assert back.steps == 77
        assert back.seed == 3
        assert back.clearance == "medium"
        assert back.data_dir == "/d"

    def test_bad_ablation(self):
        with pytest.raises(ConfigError):
            RunConfig(ablate="no-everything")

    def test_bad_clearance(self):
        with pytest.raises(ConfigError):
            RunConfig(clearance="super-tight")


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    rc = main(["gendata", "--episodes", "3", "--clearance", "loose",
               "--seed", "0", "--out", str(out)])
    assert rc == 0
    return out


class TestGendataCLI:
    def test_writes_episodes_and_manifest(self, tiny_data):
        man = load_manifest(tiny_data)
        assert len(man["episodes"]) == 3
        for e in man["episodes"]:
            assert (tiny_data / e["file"]).exists()

    def test_identical_reruns_identical_manifest(self, tiny_data, tmp_path):
        rc = main(["gendata", "--episodes", "3", "--clearance", "loose",
                   "--seed", "0", "--out", str(tmp_path / "d2")])
        assert rc == 0
        assert (tmp_path / "d2" / "manifest.json").read_text() == \
            (tiny_data / "manifest.json").read_text()

    def test_bogus_clearance_usage_error(self, tmp_path, capsys):
        rc = main(["gendata", "--episodes", "1", "--clearance", "bogus",
                   "--seed", "0", "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_prints_retention_summary(self, tmp_path, capsys):
        rc = main(["gendata", "--episodes", "2", "--clearance", "loose",
                   "--seed", "1", "--out", str(tmp_path / "y")])
        assert rc == 0
        assert "retained 2/" in capsys.readouterr().out


class TestTrainCLI:
    def test_zero_steps_checkpoint_equals_initialization(self, tiny_data, tmp_path):
        out = tmp_path / "run0"
        rc = main(["train", "--data", str(tiny_data), "--steps", "0",
                   "--out", str(out), "--seed", "4"])
        assert rc == 0
        records = read_records(out / "checkpoint.rtackpt")
        fresh = init_policy_params(desk_config(), seed=4)
        for name, p in fresh.items():
            np.testing.assert_array_equal(records[name], p.data.astype(np.float32))

    def test_missing_data_exit_2(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--steps", "1",
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_short_train_writes_artifacts_and_log(self, tiny_data, tmp_path):
        out = tmp_path / "run5"
        rc = main(["train", "--data", str(tiny_data), "--steps", "5",
                   "--out", str(out), "--seed", "0", "--batch-size", "2"])
        assert rc == 0
        assert (out / "checkpoint.rtackpt").exists()
        assert (out / "resolved.toml").exists()
        lines = (out / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "step,l1,kl,rec,con,total,alpha_mean,tau_g"
        assert len(lines) == 6

    def test_no_gate_ablation_logs_constant_alpha(self, tiny_data, tmp_path):
        out = tmp_path / "run_ng"
        rc = main(["train", "--data", str(tiny_data), "--steps", "4", "--out", str(out),
                   "--seed", "0", "--batch-size", "2", "--ablate", "no-gate"])
        assert rc == 0
        rows = (out / "train_log.csv").read_text().strip().splitlines()[1:]
        alphas = {r.split(",")[6] for r in rows}
        assert alphas == {"0.5"}


class TestEvalCLI:
    @pytest.fixture(scope="class")
    def trained_dir(self, tiny_data, tmp_path_factory):
        out = tmp_path_factory.mktemp("trained")
        rc = main(["train", "--data", str(tiny_data), "--steps", "3",
                   "--out", str(out), "--seed", "0", "--batch-size", "2"])
        assert rc == 0
        return out

    def test_untrained_policy_misses(self, trained_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.rtackpt"),
                   "--trials", "5", "--clearance", "loose", "--out", str(out),
                   "--dump-gate", "--seed", "1"])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "Missed" in printed and "Peg-in-hole" in printed
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {"trials", "missed", "grasp", "insert", "clearance", "seed"}
        assert metrics["trials"] == 5
        assert metrics["missed"] >= 0.8  # a 3-step model cannot grasp
        gate_files = sorted((out / "gate").glob("trial_*.csv"))
        assert len(gate_files) == 5
        header = gate_files[0].read_text().splitlines()[0]
        assert header == "step,t,alpha,phase"

    def test_dump_attn_writes_pgm(self, trained_dir, tmp_path):
        out = tmp_path / "eval_attn"
        rc = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.rtackpt"),
                   "--trials", "1", "--clearance", "loose", "--out", str(out),
                   "--dump-attn", "--horizon", "30"])
        assert rc == 0
        pgms = sorted((out / "attn").glob("attn_ep*_t*_cam*.pgm"))
        assert pgms
        assert pgms[0].read_bytes().startswith(b"P5\n")

    def test_config_checkpoint_shape_mismatch_exit_2(self, trained_dir, tmp_path):
        cfg = RunConfig(model=desk_config(d_model=32))
        alt = tmp_path / "alt.toml"
        write_resolved(cfg, alt)
        rc = main(["eval", "--checkpoint", str(trained_dir / "checkpoint.rtackpt"),
                   "--trials", "1", "--clearance", "loose", "--out", str(tmp_path / "o"),
                   "--config", str(alt)])
        assert rc == 2


class TestSweepCLI:
    def test_rows_and_ordering(self, tiny_data, tmp_path, capsys):
        runs = []
        for seed in (0, 1):
            out = tmp_path / f"cand{seed}"
            assert main(["train", "--data", str(tiny_data), "--steps", "2",
                         "--out", str(out), "--seed", str(seed), "--batch-size", "2"]) == 0
            runs.append(str(out / "checkpoint.rtackpt"))
        csv_path = tmp_path / "sweep.csv"
        rc = main(["sweep", "--checkpoints", ",".join(runs),
                   "--clearances", "loose,medium,tight", "--trials", "2",
                   "--out", str(csv_path), "--seed", "0"])
        assert rc == 0
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "method,clearance,missed,grasp,insert"
        assert len(lines) == 1 + 6
        for row in lines[1:]:
            parts = row.split(",")
            assert float(parts[4]) <= float(parts[2]) + float(parts[3])  # insert <= grasp trivially

    def test_unknown_clearance_exit_2(self, tmp_path):
        rc = main(["sweep", "--checkpoints", "x", "--clearances", "loose,wat",
                   "--trials", "1", "--out", str(tmp_path / "s.csv")])
        assert rc == 2
