"""CLI surface tests: subcommands, exit codes, printed reports."""

import re

import pytest

from s2moe.cli import cli
from s2moe.train import metrics_equal

from conftest import tiny_run_config


@pytest.fixture()
def tiny_config_file(small_corpus, tmp_path):
    def write(name, **overrides):
        cfg = tiny_run_config(small_corpus, tmp_path / name, **overrides)
        path = tmp_path / f"{name}.cfg"
        path.write_text(cfg.to_text())
        return str(path), cfg
    return write


class TestFlops:
    def test_reduction_printed_in_bracket(self, capsys):
        assert cli(["flops", "--preset", "paper-base", "--k", "1"]) == 0
        out = capsys.readouterr().out
        match = re.search(r"reduction_vs_k2 = ([-\d.]+)%", out)
        assert match, out
        assert 24.0 <= float(match.group(1)) <= 33.0
        assert "per_token.total" in out

    def test_k2_reduction_is_zero(self, capsys):
        assert cli(["flops", "--preset", "paper-base", "--k", "2"]) == 0
        out = capsys.readouterr().out
        assert "reduction_vs_k2 = 0.00%" in out

    def test_out_of_range_k_is_usage_error(self, capsys):
        assert cli(["flops", "--preset", "paper-base", "--k", "99"]) == 1

    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli(["flops", "--preset", "paper-base", "--k", "1", "--what"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_is_usage_error(self):
        assert cli(["frobnicate"]) == 1


class TestTrainEval:
    def test_train_twice_identical_metrics(self, tiny_config_file, capsys):
        path_a, cfg_a = tiny_config_file("runa", seed=7, steps=4)
        path_b, cfg_b = tiny_config_file("runb", seed=7, steps=4)
        assert cli(["train", "--config", path_a]) == 0
        assert cli(["train", "--config", path_b]) == 0
        assert metrics_equal(cfg_a.out_dir + "/metrics.csv", cfg_b.out_dir + "/metrics.csv")

    def test_train_without_corpus_is_usage_error(self, capsys):
        assert cli(["train", "--preset", "desk", "--corpus", ""]) == 1

    def test_eval_and_exit_codes(self, tiny_config_file, capsys):
        path, cfg = tiny_config_file("reval", steps=3)
        assert cli(["train", "--config", path]) == 0
        capsys.readouterr()
        ckpt = cfg.out_dir + "/ckpt-final.bin"
        assert cli(["eval", "--ckpt", ckpt, "--k", "2", "--split", "val"]) == 0
        out = capsys.readouterr().out
        assert "bpc = " in out and "[collapse]" in out and "[flops]" in out

        assert cli(["eval", "--ckpt", ckpt, "--k", "17", "--split", "val"]) == 1
        assert cli(["eval", "--ckpt", ckpt, "--k", "2", "--split", "train"]) == 1
        assert cli(["eval", "--ckpt", "/nonexistent.bin", "--k", "2", "--split", "val"]) == 2

    def test_probe_prints_reports(self, tiny_config_file, capsys):
        path, cfg = tiny_config_file("rprobe", steps=3)
        assert cli(["train", "--config", path]) == 0
        capsys.readouterr()
        ckpt = cfg.out_dir + "/ckpt-final.bin"
        assert cli(["probe", "--ckpt", ckpt, "--layer", "0"]) == 0
        out = capsys.readouterr().out
        assert "[jacobian]" in out and "rank = " in out and "[collapse]" in out
        assert cli(["probe", "--ckpt", ckpt, "--layer", "5"]) == 1
