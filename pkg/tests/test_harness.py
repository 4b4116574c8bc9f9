"""Harness tests: ingestion, config, checkpoints, training, evaluation, CLI."""

import dataclasses
import math
import os

import numpy as np
import pytest

from s2moe.checkpoint import Checkpoint, apply_tensors, load_checkpoint, save_checkpoint
from s2moe.config import load_config, parse_config_text, preset
from s2moe.data import ingest_corpus, sample_count, samples
from s2moe.train import (
    TrainAbort,
    build_model,
    evaluate_checkpoint,
    evaluate_model,
    metrics_equal,
    parse_metrics,
    train,
)

from conftest import tiny_run_config


class TestIngest:
    def test_abab_enumeration(self, tmp_path):
        path = tmp_path / "abab.txt"
        path.write_bytes(b"abab")
        corpus = ingest_corpus(str(path), splits=(1.0, 0.0, 0.0))
        assert corpus.vocab_bytes == [ord("a"), ord("b")]
        assert corpus.vocab_size == 3  # a, b, unk
        assert sample_count(corpus.train, 2) == 2
        np.testing.assert_array_equal(samples(corpus.train, 2), [[0, 1], [0, 1]])

    def test_split_boundaries_integer_oracle(self, tmp_path):
        n = 1_000_000
        path = tmp_path / "mb.bin"
        path.write_bytes((bytes(range(256)) * (n // 256 + 1))[:n])
        corpus = ingest_corpus(str(path), splits=(0.9, 0.05, 0.05))
        # oracle: floor arithmetic
        assert len(corpus.train) == int(n * 0.9) == 900_000
        assert len(corpus.val) == int(n * 0.05) == 50_000
        assert len(corpus.test) == n - 900_000 - 50_000

    def test_reingest_is_identical(self, small_corpus):
        a = ingest_corpus(small_corpus)
        b = ingest_corpus(small_corpus)
        assert a.train.tobytes() == b.train.tobytes()
        assert a.val.tobytes() == b.val.tobytes()
        assert a.vocab_bytes == b.vocab_bytes

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_bytes(b"")
        with pytest.raises(ValueError):
            ingest_corpus(str(path))

    def test_unseen_byte_maps_to_unk(self, tmp_path):
        path = tmp_path / "mix.txt"
        path.write_bytes(b"aaaaaaaa" + b"az")  # 'z' appears only in the tail
        corpus = ingest_corpus(str(path), splits=(0.8, 0.2, 0.0))
        assert corpus.vocab_bytes == [ord("a")]
        assert corpus.val.tolist() == [0, corpus.unk_id]

    def test_bad_splits_rejected(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_bytes(b"xyz")
        with pytest.raises(ValueError):
            ingest_corpus(str(path), splits=(0.5, 0.4, 0.2))


class TestConfig:
    def test_presets(self):
        base = preset("paper-base")
        assert (base.seq_len, base.lr, base.steps, base.batch_size) == (512, 2.5e-4, 100_000, 48)
        desk = preset("desk")
        assert (desk.n_layers, desk.d_model, desk.n_experts, desk.seq_len) == (2, 128, 8, 128)
        assert desk.steps <= 2000
        with pytest.raises(ValueError):
            preset("huge")

    def test_parse_overrides_and_preset_key(self, tmp_path):
        text = "preset = 'desk'\nvariant = s2moe  # comment\nsteps = 42\nlr = 0.005\n"
        cfg = parse_config_text(text)
        assert cfg.d_model == 128 and cfg.variant == "s2moe"
        assert cfg.steps == 42 and cfg.lr == 0.005
        path = tmp_path / "run.cfg"
        path.write_text(text)
        assert load_config(str(path)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError) as err:
            parse_config_text("nonsense_key = 3\n")
        assert "nonsense_key" in str(err.value)

    def test_text_round_trip(self):
        cfg = preset("desk")
        cfg.variant = "xmoe"
        cfg.corpus = "/tmp/some corpus.txt"
        assert parse_config_text(cfg.to_text()) == cfg


class TestCheckpoint:
    def make(self, tmp_path, dtype=np.float32):
        rng = np.random.default_rng(0)
        ck = Checkpoint(
            config_text=preset("desk").to_text(),
            step=17,
            rng_states=[("batch", 99, 17), ("forward", 100, 17 << 20)],
            tensors=[("w", rng.standard_normal((3, 4)).astype(dtype)),
                     ("b", rng.standard_normal(4).astype(dtype))],
        )
        path = tmp_path / "ck.bin"
        save_checkpoint(str(path), ck)
        return str(path), ck

    def test_round_trip_byte_identical(self, tmp_path):
        path, _ = self.make(tmp_path)
        loaded = load_checkpoint(path)
        again = tmp_path / "again.bin"
        save_checkpoint(str(again), loaded)
        assert open(path, "rb").read() == open(str(again), "rb").read()

    def test_fields_survive(self, tmp_path):
        path, ck = self.make(tmp_path, dtype=np.float64)
        loaded = load_checkpoint(path)
        assert loaded.step == 17
        assert loaded.rng_states == ck.rng_states
        assert loaded.config_text == ck.config_text
        for (na, a), (nb, b) in zip(ck.tensors, loaded.tensors):
            assert na == nb and a.tobytes() == b.tobytes() and a.dtype == b.dtype

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(str(path))

    def test_wrong_version_rejected(self, tmp_path):
        path, _ = self.make(tmp_path)
        blob = bytearray(open(path, "rb").read())
        blob[8] = 99
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ValueError) as err:
            load_checkpoint(str(bad))
        assert "version" in str(err.value)

    def test_shape_mismatch_rejected(self, tmp_path):
        from s2moe.tensor import Tensor
        path, _ = self.make(tmp_path)
        ck = load_checkpoint(path)
        with pytest.raises(ValueError) as err:
            apply_tensors([("w", Tensor(np.zeros((2, 2))))], ck)
        assert "shape mismatch" in str(err.value)


class TestTraining:
    def test_same_seed_identical_metrics(self, small_corpus, tmp_path):
        rows = []
        for run in ("a", "b"):
            cfg = tiny_run_config(small_corpus, tmp_path / run, seed=7)
            result = train(cfg)
            rows.append(result.metrics_path)
        assert metrics_equal(rows[0], rows[1])  # wall_ms excluded

    def test_metrics_file_parses_and_has_header(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "m")
        result = train(cfg)
        first = open(result.metrics_path).readline().strip()
        assert first == ("step,task_nats,bpc,balance,uncertainty,total,"
                         "router_entropy,expert_load_gini,k,wall_ms")
        rows = parse_metrics(result.metrics_path)
        assert rows[0].step == 0 and rows[-1].step == cfg.steps - 1
        assert all(math.isfinite(r.total) for r in rows)

    def test_resume_matches_uninterrupted_at_f64(self, small_corpus, tmp_path):
        full_cfg = tiny_run_config(small_corpus, tmp_path / "full", steps=8,
                                   ckpt_interval=4, precision="f64", seed=3)
        full = train(full_cfg)

        # resume the mid-run checkpoint into a fresh directory
        part_cfg = tiny_run_config(small_corpus, tmp_path / "part", steps=8,
                                   ckpt_interval=4, precision="f64", seed=3)
        resumed = train(part_cfg,
                        resume_from=os.path.join(full_cfg.out_dir, "ckpt-0000004.bin"))

        full_rows = {r.step: r for r in parse_metrics(full.metrics_path)}
        for row in parse_metrics(resumed.metrics_path):
            twin = full_rows[row.step]
            assert row.to_line().rsplit(",", 1)[0] == twin.to_line().rsplit(",", 1)[0]
        a = load_checkpoint(full.final_checkpoint)
        b = load_checkpoint(resumed.final_checkpoint)
        assert a.step == b.step == 8
        for (na, ta), (nb, tb) in zip(a.tensors, b.tensors):
            assert na == nb and ta.tobytes() == tb.tobytes(), na

    def test_checkpoint_roundtrip_through_training(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "rt")
        result = train(cfg)
        ck = load_checkpoint(result.final_checkpoint)
        again = tmp_path / "resaved.bin"
        save_checkpoint(str(again), ck)
        assert open(result.final_checkpoint, "rb").read() == open(str(again), "rb").read()

    def test_reduction_trajectory_smoe_vs_pinned_s2moe(self, small_corpus, tmp_path):
        common = dict(steps=6, alpha=0.0, beta=0.0, precision="f64", seed=5)
        smoe_cfg = tiny_run_config(small_corpus, tmp_path / "smoe", variant="smoe", **common)
        smoe = train(smoe_cfg)

        def pin(model):
            for blk in model.blocks:
                blk.moe.noise_enabled = False
                blk.moe.blend.w.data[:] = 0.0
                blk.moe.blend.b.data[:] = 500.0  # sigmoid saturates to exactly 1

        s2_cfg = tiny_run_config(small_corpus, tmp_path / "s2", variant="s2moe", **common)
        s2 = train(s2_cfg, model_hook=pin)
        for ra, rb in zip(smoe.rows, s2.rows):
            assert ra.task_nats == rb.task_nats and ra.total == rb.total

    def test_frozen_router_is_byte_identical_after_training(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "fz", variant="smoe-dropout", steps=5)
        corpus = ingest_corpus(cfg.corpus, cfg.splits)
        model = build_model(cfg, corpus)
        before = model.blocks[0].moe.router.w_e.data.tobytes()

        captured = {}

        def grab(m):
            captured["model"] = m

        train(cfg, model_hook=grab)
        after = captured["model"].blocks[0].moe.router.w_e.data.tobytes()
        assert before == after

    def test_smoe_dropout_uses_schedule(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "sched", variant="smoe-dropout",
                              steps=4, eval_interval=1)
        result = train(cfg)
        ks = [r.k for r in result.rows]
        assert ks[0] == 1 and ks[-1] <= cfg.n_experts
        assert all(a <= b for a, b in zip(ks, ks[1:]))

    def test_stablemoe_freezes_at_boundary(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "stable", variant="stablemoe",
                              steps=6, stage_boundary=3)
        captured = {}
        train(cfg, model_hook=lambda m: captured.setdefault("model", m))
        router = captured["model"].blocks[0].moe.router
        assert router.snapshot_events == 1 and router.snapshot_step == 3
        assert router.frozen
        assert router.w_e.data.tobytes() == router.snapshot.tobytes()

    def test_variant_flag_only_changes_stochastic_activity(self, small_corpus, tmp_path):
        counts = {}
        for variant in ("smoe", "s2moe"):
            cfg = tiny_run_config(small_corpus, tmp_path / f"act-{variant}",
                                  variant=variant, steps=2, seed=9)
            captured = {}
            train(cfg, model_hook=lambda m: captured.setdefault("model", m))
            counts[variant] = sum(blk.moe.experts.invocations
                                  for blk in captured["model"].blocks)
        # same seed, same batches, same k: the stochastic variant runs the
        # expert bank exactly twice as often (two paths), nothing else differs
        assert counts["s2moe"] == 2 * counts["smoe"]

    def test_nan_abort_retains_checkpoints(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "boom", steps=2, ckpt_interval=1)
        result = train(cfg)
        survivor = os.path.join(cfg.out_dir, "ckpt-0000002.bin")
        assert os.path.exists(survivor)

        cfg4 = dataclasses.replace(cfg, steps=4)

        def bomb(model):
            model.lnf_b.data[:] = np.nan  # first op touching it trips the guard

        with pytest.raises(TrainAbort):
            train(cfg4, resume_from=survivor, model_hook=bomb)
        assert os.path.exists(survivor)


class TestEvaluate:
    def test_untrained_model_bpc_near_uniform(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "ev")
        corpus = ingest_corpus(cfg.corpus, cfg.splits)
        model = build_model(cfg, corpus)
        result = evaluate_model(model, corpus, cfg, k=2, split="val", with_collapse=False)
        assert abs(result.bpc - math.log2(corpus.vocab_size)) < 0.05

    def test_evaluate_twice_identical(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "ev2", steps=3)
        trained = train(cfg)
        a, _ = evaluate_checkpoint(trained.final_checkpoint, k=2, split="val", with_collapse=False)
        b, _ = evaluate_checkpoint(trained.final_checkpoint, k=2, split="val", with_collapse=False)
        assert a.nats == b.nats and a.bpc == b.bpc

    def test_sweep_k_shares_attention_cost(self, small_corpus, tmp_path):
        from s2moe.diagnostics import flops_per_token
        cfg = tiny_run_config(small_corpus, tmp_path / "sweep", steps=3)
        trained = train(cfg)
        results = {}
        flops = {}
        for k in (1, 2, 4):
            res, rcfg = evaluate_checkpoint(trained.final_checkpoint, k=k, split="val",
                                            with_collapse=False)
            results[k] = res
            flops[k] = flops_per_token(rcfg.model_config(), k=k)
        assert len({f.items["attention_projections"] for f in flops.values()}) == 1
        assert len({f.items["attention_mix"] for f in flops.values()}) == 1
        assert flops[4].items["experts"] == 4 * flops[1].items["experts"]
        assert len(results) == 3

    def test_k_out_of_range_rejected(self, small_corpus, tmp_path):
        cfg = tiny_run_config(small_corpus, tmp_path / "badk", steps=2)
        trained = train(cfg)
        with pytest.raises(ValueError):
            evaluate_checkpoint(trained.final_checkpoint, k=17, split="val")
