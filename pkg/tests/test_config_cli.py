import csv
import json
import subprocess
import sys

import pytest

from remem.cli import run_command
from remem.config import RunConfig, apply_override, from_dict, load_config
from remem.errors import ConfigError, FormatError

TINY = {
    "dataset": {"n_classes": 3, "samples_per_class": 8, "image_size": 8, "upstream_samples_per_class": 10},
    "vit": {"d_embed": 8, "d_mlp": 16, "n_layers": 2},
    "schedule": {"finetune_steps": 12, "warmup_steps": 2, "pretrain_steps": 10, "pretrain_warmup_steps": 2},
    "distill": {"steps": 20, "batch_size": 8},
    "mi": {"updates": 20},
    "expertness": {"layer": 1},
    "protocol": {"ckpt_steps": [6, 12], "lams": [0.5], "temperatures": [2.0], "alphas": [0.8], "rhos": [0.05]},
}


def read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "out")}))
    return p


def remem(cmd, cfg, out, *sets):
    args = [cmd, "--config", str(cfg), "--set", f"output_dir={json.dumps(str(out))}"]
    for s in sets:
        args += ["--set", s]
    return run_command(args)


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        again = from_dict(json.loads(cfg.to_json()))
        assert again.to_json() == cfg.to_json()
        assert again.content_hash() == cfg.content_hash()

    def test_grid_defaults(self):
        p = RunConfig().protocol
        assert p.lams == [0.1, 0.5, 0.9] and p.temperatures == [1.0, 2.0, 4.0]
        assert p.rhos == [0.5, 0.05, 0.005] and p.alphas == [0.8, 0.9]

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="optimizer.learning_rate"):
            from_dict({"optimizer": {"learning_rate": 0.1}})
        with pytest.raises(ConfigError, match="bogus"):
            from_dict({"bogus": 1})

    def test_type_checks(self):
        with pytest.raises(ConfigError):
            from_dict({"vit": {"n_layers": 2.5}})
        with pytest.raises(ConfigError):
            from_dict({"optimizer": {"lr": "fast"}})
        assert from_dict({"optimizer": {"lr": 1}}).optimizer.lr == 1.0

    def test_overrides(self):
        cfg = RunConfig()
        apply_override(cfg, "optimizer.sam_rho=0.05")
        apply_override(cfg, "dataset.preset=separable")
        apply_override(cfg, "protocol.lams=[0.1,0.9]")
        assert cfg.optimizer.sam_rho == 0.05 and cfg.dataset.preset == "separable"
        assert cfg.protocol.lams == [0.1, 0.9]
        with pytest.raises(ConfigError):
            apply_override(cfg, "optimizer.nope=1")
        with pytest.raises(ConfigError):
            apply_override(cfg, "novalue")

    def test_load_errors(self, tmp_path):
        with pytest.raises(FormatError):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_seed_flag_wins(self, cfg_file):
        assert load_config(cfg_file, ["seed=3"], seed=9).seed == 9


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"optimizer": {"lrr": 0.1}}))
        assert run_command(["mi", "--config", str(p)]) == 2
        assert "optimizer.lrr" in capsys.readouterr().err

    def test_missing_checkpoint_is_io_error(self, cfg_file, tmp_path):
        code = remem("mi", cfg_file, tmp_path / "o", f"distill.teacher_checkpoint={json.dumps(str(tmp_path / 'no.rmem'))}")
        assert code == 4

    def test_missing_config_is_io_error(self, tmp_path):
        assert run_command(["mi", "--config", str(tmp_path / "absent.json")]) == 4

    def test_divergence_is_numeric_error(self, cfg_file, tmp_path):
        assert remem("finetune", cfg_file, tmp_path / "o", "optimizer.lr=1e30") == 3

    def test_entry_point_subprocess(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"unknown": 1}))
        res = subprocess.run([sys.executable, "-m", "remem.cli", "mi", "--config", str(p)],
                             capture_output=True, text=True)
        assert res.returncode == 2 and "unknown" in res.stderr


class TestCommands:
    def test_finetune_all_interventions_off_matches_baseline(self, cfg_file, tmp_path):
        assert remem("finetune", cfg_file, tmp_path / "a") == 0
        off = ['remem={"alpha_mlp":1.0,"alpha_attn":1.0,"prune_mlp_top_k":0,"prune_attn_top_k":0}',
               "optimizer.sam_rho=0.0"]
        assert remem("finetune", cfg_file, tmp_path / "b", *off) == 0
        for name in ("metrics.csv", "trace.csv", "teacher.rmem"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_run_json_and_replay(self, cfg_file, tmp_path):
        before = cfg_file.read_bytes()
        assert remem("expertness", cfg_file, tmp_path / "a") == 0
        run = json.loads((tmp_path / "a" / "run.json").read_text())
        assert run["seed"] == 0 and run["subcommand"] == "expertness" and run["wall_time_s"] >= 0
        assert len(run["content_hash"]) == 40 and "expertness.csv" in run["outputs"]
        assert cfg_file.read_bytes() == before
        # the echoed config reproduces the table bit for bit
        replay = tmp_path / "a" / "config.json"
        assert run_command(["expertness", "--config", str(replay), "--set",
                            f"output_dir={json.dumps(str(tmp_path / 'b'))}"]) == 0
        assert (tmp_path / "a" / "expertness.csv").read_bytes() == (tmp_path / "b" / "expertness.csv").read_bytes()

    def test_prune_sweep_k0_matches_mi(self, cfg_file, tmp_path):
        assert remem("prune-sweep", cfg_file, tmp_path / "p") == 0
        assert remem("mi", cfg_file, tmp_path / "m") == 0
        rows = read(tmp_path / "p" / "prune.csv")
        assert [(r["block_kind"], r["k"]) for r in rows] == [(b, str(k)) for b in ("mlp", "attn") for k in range(3)]
        mi = read(tmp_path / "m" / "info_plane.csv")[0]
        for r in (rows[0], rows[3]):
            assert r["teacher_err"] == mi["teacher_err"] and r["mi_proxy"] == mi["mi_proxy"]

    def test_sweep_two_by_two(self, cfg_file, tmp_path):
        assert remem("sweep", cfg_file, tmp_path / "s", "protocol.lams=[0.1,0.9]", "protocol.temperatures=[1.0,4.0]",
                     "protocol.ckpt_steps=[12]") == 0
        rows = read(tmp_path / "s" / "grid.csv")
        assert len(rows) == 4
        best = json.loads((tmp_path / "s" / "best.json").read_text())
        assert best["student_acc"] == max(float(r["student_acc"]) for r in rows)

    def test_ablate_rows(self, cfg_file, tmp_path):
        assert remem("ablate", cfg_file, tmp_path / "a", "protocol.ckpt_steps=[12]") == 0
        assert [r["variant"] for r in read(tmp_path / "a" / "ablate.csv")] == ["baseline", "reweight", "sam", "remem"]

    def test_checkpoint_feeds_analysis(self, cfg_file, tmp_path):
        assert remem("finetune", cfg_file, tmp_path / "f") == 0
        ckpt = json.dumps(str(tmp_path / "f" / "teacher.rmem"))
        assert remem("criticality", cfg_file, tmp_path / "c", f"distill.teacher_checkpoint={ckpt}") == 0
        assert remem("distill", cfg_file, tmp_path / "d", f"distill.teacher_checkpoint={ckpt}") == 0
        assert len(read(tmp_path / "c" / "criticality.csv")) == 16
        run = json.loads((tmp_path / "d" / "run.json").read_text())
        assert str(tmp_path / "f" / "teacher.rmem") in run["input_hashes"]
