from dataclasses import replace

import numpy as np
import pytest

from petlab import harness
from petlab.backbone import BackboneConfig, SiteKind, Wiring
from petlab.config import ConfigError, ExperimentConfig
from petlab.granularity import GranularityLevel


def tiny_cfg(**kw):
    base = dict(method="gated_large", r=4, n_heads=2, n_heads_dec=1, steps=6, batch=2,
                eval_size=4, tasks="lookup", dtype="float64", seed=3)
    base.update(kw)
    cfg = ExperimentConfig(**base)
    cfg.backbone = BackboneConfig(d=8, n_enc_layers=1, n_dec_layers=1, n_attn_heads=2,
                                  d_ffn=16, vocab_size=40, max_len=24, visual_dim=6,
                                  n_visual_tokens=4)
    return cfg


def test_lightweight_plan_sites_and_levels():
    plan = harness.build_plan(ExperimentConfig())
    kinds = [(spec.site.kind, spec.site.layer) for spec in plan]
    assert kinds == [
        (SiteKind.ENC_SELF, 0), (SiteKind.ENC_SELF, 1),
        (SiteKind.ENC_FF, 0), (SiteKind.ENC_FF, 1),
        (SiteKind.DEC_CROSS_V, 0), (SiteKind.DEC_CROSS_V, 1),
    ]
    for spec in plan:
        if spec.site.kind is SiteKind.DEC_CROSS_V:
            assert spec.level is GranularityLevel.IDENTITY
            assert spec.wiring is Wiring.ENCODER_FINAL
        else:
            assert spec.level is GranularityLevel.LARGE
            assert spec.wiring is Wiring.MODULE_OUTPUT


def test_conventional_plan_covers_decoder_sublayers():
    plan = harness.build_plan(replace(ExperimentConfig(), plan="conventional"))
    kinds = {spec.site.kind for spec in plan}
    assert kinds == {SiteKind.ENC_SELF, SiteKind.ENC_FF, SiteKind.DEC_SELF,
                     SiteKind.DEC_CROSS, SiteKind.DEC_FF}


def test_custom_plan_wildcards():
    cfg = replace(ExperimentConfig(), plan="custom", custom_sites="enc_ff.*,dec_cross_v.1")
    plan = harness.build_plan(cfg)
    labels = [str(spec.site) for spec in plan]
    assert labels == ["enc_ff.0", "enc_ff.1", "dec_cross_v.1"]


def test_gated_add_uses_additive_rule_on_encoder_only():
    plan = harness.build_plan(replace(ExperimentConfig(), method="gated_add"))
    rules = {str(spec.site): spec.update_rule for spec in plan}
    assert rules["enc_self.0"] == "add"
    assert rules["dec_cross_v.0"] == "gated"


@pytest.mark.parametrize("method", ["gated_large", "gated_small", "ungated", "adapter",
                                    "lora", "bitfit", "full", "frozen"])
def test_analytic_count_matches_instantiated(method):
    cfg = replace(ExperimentConfig(), method=method)
    trainable, total, pct = harness.count_params(cfg)
    got_tr, got_tot = harness.build_model(cfg, init=False).param_count()
    assert (trainable, total) == (got_tr, got_tot)
    assert 0 <= pct <= 100


def test_percentage_ordering_across_levels():
    base = ExperimentConfig()
    pct = {m: harness.count_params(replace(base, method=m))[2]
           for m in ("gated_large", "gated_middle_x", "gated_middle_y", "gated_small")}
    assert pct["gated_large"] > pct["gated_middle_x"] == pct["gated_middle_y"]
    assert abs(pct["gated_small"] - pct["gated_middle_x"]) < 0.2


def test_run_is_deterministic_given_seed():
    cfg = tiny_cfg(steps=8)
    a = harness.run_experiment(cfg)
    b = harness.run_experiment(cfg)
    assert a.loss_trace == b.loss_trace
    assert a.task_metrics == b.task_metrics
    assert a.task_losses == b.task_losses


def test_different_seeds_change_the_run():
    a = harness.run_experiment(tiny_cfg(steps=8, seed=1))
    b = harness.run_experiment(tiny_cfg(steps=8, seed=2))
    assert a.loss_trace != b.loss_trace


def test_training_reduces_loss():
    cfg = tiny_cfg(method="full", steps=60, batch=4, lr=3e-3)
    r = harness.run_experiment(cfg)
    assert not r.failed
    assert np.mean(r.loss_trace[-10:]) < np.mean(r.loss_trace[:10])


def test_frozen_run_never_updates():
    r = harness.run_experiment(tiny_cfg(method="frozen", steps=6))
    assert r.trainable == 0
    assert not r.failed
    assert len(r.loss_trace) == 6


def test_single_task_mode_isolates_tasks():
    cfg = tiny_cfg(tasks="lookup,match", task_mode="single", steps=4)
    r = harness.run_experiment(cfg)
    assert set(r.task_metrics) == {"lookup", "match"}
    assert len(r.loss_trace) == 8  # 4 steps per task, fresh model each


def test_multi_task_interleaves_uniformly():
    cfg = tiny_cfg(tasks="lookup,match", task_mode="multi", steps=6)
    r = harness.run_experiment(cfg)
    assert len(r.loss_trace) == 6
    assert set(r.task_metrics) == {"lookup", "match"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_marks_run_failed():
    cfg = tiny_cfg(method="full", steps=12, lr=1e9)
    r = harness.run_experiment(cfg)
    assert r.failed
    assert 0 <= r.failed_step < 12


def test_grid_continues_past_bad_cells():
    base = tiny_cfg(steps=2)
    rows = harness.run_ablation_grid(base, "init")
    assert len(rows) == 2
    assert all(isinstance(r[2], harness.RunResult) for r in rows)


def test_grid_unknown_axis_rejected():
    with pytest.raises(ConfigError):
        harness.grid_cells(ExperimentConfig(), "colour")


def test_sites_axis_covers_decoder_combinations():
    labels = [lbl for lbl, _ in harness.grid_cells(ExperimentConfig(), "sites")]
    assert labels[:7] == ["self", "cross", "ff", "self+cross", "self+ff", "cross+ff",
                          "self+cross+ff"]
    assert labels[7:] == ["cross_k", "cross_v"]


def test_emit_results_stable_and_complete(tmp_path):
    cfg = tiny_cfg(steps=3)
    results = [harness.run_experiment(cfg), harness.run_experiment(replace(cfg, seed=4))]
    p = tmp_path / "r.csv"
    j = tmp_path / "r.json"
    harness.emit_results(results, p, j, configs=[cfg, replace(cfg, seed=4)], labels=["a", "b"])
    lines = p.read_text().strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("label,config_hash,method,seed")
    first = p.read_bytes()
    harness.emit_results(results, p, j, configs=[cfg, replace(cfg, seed=4)], labels=["a", "b"])
    assert p.read_bytes() == first
