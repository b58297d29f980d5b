"""Experiment runner: model assembly, parameter accounting, training,
ablation grids and result emission."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from . import tasks as tasksmod
from .backbone import (
    BOS,
    EOS,
    PAD,
    BackboneConfig,
    InsertionSite,
    Model,
    PetAttachment,
    SiteKind,
    Wiring,
    cross_entropy,
)
from .granularity import GranularityController, GranularityLevel
from .modifications import BaselineKind, BaselineModification, MultiHeadModification, Variant
from .optimizer import AdamW, LinearWarmupSchedule
from .tensor import Rng, Tensor

_GATED_LEVELS = {
    "gated_large": GranularityLevel.LARGE,
    "gated_middle_x": GranularityLevel.MIDDLE_X,
    "gated_middle_y": GranularityLevel.MIDDLE_Y,
    "gated_small": GranularityLevel.SMALL,
    "adapter_gated_large": GranularityLevel.LARGE,
    "adapter_gated_middle_x": GranularityLevel.MIDDLE_X,
    "adapter_gated_middle_y": GranularityLevel.MIDDLE_Y,
    "adapter_gated_small": GranularityLevel.SMALL,
}

_ENC_KINDS = (SiteKind.ENC_SELF, SiteKind.ENC_FF)
_DEC_CONVENTIONAL = (SiteKind.DEC_SELF, SiteKind.DEC_CROSS, SiteKind.DEC_FF)


@dataclass
class AttachmentSpec:
    """Declarative attachment: enough to count parameters or instantiate."""

    site: InsertionSite
    level: GranularityLevel
    mod_kind: str  # "multihead" | "adapter" | "none"
    wiring: Wiring
    update_rule: str = "gated"
    n_heads: int = 1
    s: float = 1.0


def _expand_sites(spec_text, bb):
    """Parse 'enc_self.*,dec_cross.1' style site lists; '*' = all layers."""
    sites = []
    for chunk in spec_text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        kind_txt, _, layer_txt = chunk.rpartition(".")
        kind = SiteKind(kind_txt)
        n = bb.n_enc_layers if kind in _ENC_KINDS else bb.n_dec_layers
        layers = range(n) if layer_txt == "*" else [int(layer_txt)]
        sites += [InsertionSite(kind, i) for i in layers]
    return sites


def build_plan(cfg):
    """The attachment plan for a config; [] for methods without site modules."""
    method, bb = cfg.method, cfg.backbone
    if method in ("lora", "bitfit", "full", "frozen"):
        return []

    mod_kind = "adapter" if method.startswith("adapter") else "multihead"
    enc_level = _GATED_LEVELS.get(method, GranularityLevel.IDENTITY)
    if method == "gated_add":
        enc_level = GranularityLevel.LARGE
    if method == "adapter" and cfg.plan == "lightweight":
        # plain adapter keeps its conventional plan unless overridden
        pass

    if cfg.plan == "custom":
        sites = _expand_sites(cfg.custom_sites, bb)
    elif cfg.plan == "conventional":
        sites = [InsertionSite(k, i) for k in _ENC_KINDS for i in range(bb.n_enc_layers)]
        sites += [InsertionSite(k, i) for k in _DEC_CONVENTIONAL for i in range(bb.n_dec_layers)]
    else:  # lightweight
        sites = [InsertionSite(k, i) for k in _ENC_KINDS for i in range(bb.n_enc_layers)]
        sites += [InsertionSite(SiteKind.DEC_CROSS_V, i) for i in range(bb.n_dec_layers)]

    if method == "adapter" and cfg.plan != "custom":
        # the uncontrolled baseline uses the conventional plan
        sites = [InsertionSite(k, i) for k in _ENC_KINDS for i in range(bb.n_enc_layers)]
        sites += [InsertionSite(k, i) for k in _DEC_CONVENTIONAL for i in range(bb.n_dec_layers)]
        enc_level = GranularityLevel.IDENTITY

    plan = []
    for site in sites:
        encoder_side = site.kind in _ENC_KINDS
        memory_site = site.kind in (SiteKind.DEC_CROSS_K, SiteKind.DEC_CROSS_V)
        level = enc_level if encoder_side else (
            GranularityLevel.IDENTITY if memory_site else enc_level
        )
        if method == "adapter":
            level = GranularityLevel.IDENTITY
        rule = "gated"
        if method == "gated_add" and level is GranularityLevel.LARGE:
            rule = "add"
        plan.append(
            AttachmentSpec(
                site=site,
                level=level,
                mod_kind=mod_kind,
                wiring=Wiring.ENCODER_FINAL if memory_site else Wiring.MODULE_OUTPUT,
                update_rule=rule,
                n_heads=cfg.n_heads if encoder_side else cfg.n_heads_dec,
                s=cfg.s if encoder_side else cfg.s_dec,
            )
        )
    return plan


# -- parameter accounting ----------------------------------------------------------


def backbone_param_count(bb):
    """Closed-form parameter count of the bare backbone (no projector)."""
    d, f = bb.d, bb.d_ffn
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = (d * f + f) + (f * d + d)
    enc_layer = attn + 2 * ln + ffn
    dec_layer = enc_layer + attn + ln
    emb = bb.vocab_size * d + 2 * bb.max_len * d + 2 * ln
    return emb + bb.n_enc_layers * enc_layer + bb.n_dec_layers * dec_layer


def projector_param_count(cfg):
    bb = cfg.backbone
    if cfg.visual_mode == "absent":
        return 0
    if cfg.visual_mode == "decomposed":
        n = MultiHeadModification.count_for(cfg.variant, bb.d, cfg.r, cfg.n_heads, in_dim=bb.visual_dim)
        if cfg.visual_gate:
            n += GranularityController.count_for(GranularityLevel.LARGE, bb.d, cfg.r, in_dim=bb.visual_dim)
        return n
    return bb.visual_dim * bb.d + bb.d


def _bias_param_count(bb):
    d, f = bb.d, bb.d_ffn
    enc = 4 * d + f + d
    dec = enc + 4 * d
    return bb.n_enc_layers * enc + bb.n_dec_layers * dec


def _ln_param_count(bb, encoder_side):
    d = bb.d
    if encoder_side:
        return (2 * bb.n_enc_layers + 1) * 2 * d
    return (3 * bb.n_dec_layers + 1) * 2 * d


def pet_param_count(cfg):
    """Closed-form count of all attachment parameters (site modules + LoRA)."""
    bb = cfg.backbone
    if cfg.method == "lora":
        n_attn = bb.n_enc_layers + 2 * bb.n_dec_layers
        return n_attn * 2 * (2 * bb.d * cfg.r)
    total = 0
    for spec in build_plan(cfg):
        if spec.mod_kind == "multihead":
            total += MultiHeadModification.count_for(cfg.variant, bb.d, cfg.r, spec.n_heads)
        elif spec.mod_kind == "adapter":
            total += 2 * bb.d * cfg.r
        total += GranularityController.count_for(spec.level, bb.d, cfg.r)
    return total


def count_params(cfg):
    """Analytic (trainable, total, percentage) without touching a model."""
    cfg.validate()
    bb = cfg.backbone
    backbone = backbone_param_count(bb)
    pet = pet_param_count(cfg)
    projector = projector_param_count(cfg)
    total = backbone + pet + projector

    policy = cfg.freeze_policy()
    trainable = 0
    if not policy.backbone_frozen:
        trainable += backbone
    else:
        if policy.encoder_ln_trainable:
            trainable += _ln_param_count(bb, encoder_side=True)
        if policy.decoder_ln_trainable:
            trainable += _ln_param_count(bb, encoder_side=False)
        if policy.trainable_biases:
            trainable += _bias_param_count(bb)
    trainable += pet
    if policy.visual_projector_mode in ("trainable", "noise", "decomposed"):
        trainable += projector
    percentage = 100.0 * trainable / total
    return trainable, total, percentage


# -- model assembly ----------------------------------------------------------------


def build_model(cfg, rng=None, init=True):
    """Instantiate the configured model with attachments and freeze policy."""
    cfg.validate()
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    model = Model(
        cfg.backbone,
        visual_mode=cfg.visual_mode,
        dtype=dtype,
        decomposed_r=cfg.r,
        decomposed_heads=cfg.n_heads,
        decomposed_gated=cfg.visual_gate,
    )
    attachments = []
    for spec in build_plan(cfg):
        ctl = GranularityController(spec.level, cfg.backbone.d, r=cfg.r, s=spec.s, dtype=dtype)
        if spec.mod_kind == "multihead":
            mod = MultiHeadModification(cfg.variant, cfg.backbone.d, cfg.r, spec.n_heads, dtype=dtype)
        elif spec.mod_kind == "adapter":
            mod = BaselineModification(BaselineKind.ADAPTER, cfg.backbone.d, cfg.r, dtype=dtype)
        else:
            mod = None
        attachments.append(
            PetAttachment(spec.site, ctl, mod, input_wiring=spec.wiring, update_rule=spec.update_rule)
        )
    model.attach(attachments)
    if cfg.method == "lora":
        model.attach_lora(cfg.r)
    model.apply_freeze(cfg.freeze_policy())
    if init:
        rng = rng or Rng(cfg.seed)
        model.init_backbone(rng.child(10))
        model.init_weights(cfg.init, rng.child(11))
    return model


# -- training ----------------------------------------------------------------------


@dataclass
class RunResult:
    method: str
    seed: int
    config_hash: str
    task_metrics: dict = field(default_factory=dict)  # exact-match per task
    task_losses: dict = field(default_factory=dict)  # held-out teacher-forced loss
    loss_trace: list = field(default_factory=list)
    trainable: int = 0
    total: int = 0
    percentage: float = 0.0
    wall_time: float = 0.0
    failed: bool = False
    failed_step: int = -1


def _make_batch(model, cfg, spec, rng, feature_table, examples=None, size=None):
    """Pad a batch of examples for the given task."""
    bb = cfg.backbone
    dtype = model.dtype
    if examples is None:
        examples = [tasksmod.sample_example(spec, rng, bb.n_visual_tokens) for _ in range(size)]
    max_in = max(len(e.input_ids) for e in examples)
    max_out = max(len(e.target_ids) for e in examples) + 1  # room for EOS/BOS shift
    b = len(examples)
    text = np.full((b, max_in), PAD, dtype=np.int64)
    tmask = np.zeros((b, max_in), dtype=dtype)
    dec_in = np.full((b, max_out), PAD, dtype=np.int64)
    dec_out = np.full((b, max_out), PAD, dtype=np.int64)
    dmask = np.zeros((b, max_out), dtype=dtype)
    for i, e in enumerate(examples):
        text[i, : len(e.input_ids)] = e.input_ids
        tmask[i, : len(e.input_ids)] = 1.0
        seq_in = [BOS] + e.target_ids
        seq_out = e.target_ids + [EOS]
        dec_in[i, : len(seq_in)] = seq_in
        dec_out[i, : len(seq_out)] = seq_out
        dmask[i, : len(seq_out)] = 1.0
    feats = None
    if cfg.visual_mode != "absent":
        if cfg.visual_mode == "noise":
            arr = rng.uniform((b, bb.n_visual_tokens, bb.visual_dim), dtype=dtype)
        else:
            arr = np.stack(
                [tasksmod.grid_features(e.grid, feature_table) for e in examples]
            ).astype(dtype)
        feats = Tensor(arr)
    return feats, text, tmask, dec_in, dec_out, dmask, examples


def _evaluate(model, cfg, specs, seed, feature_table):
    """Held-out exact match and teacher-forced loss per task."""
    metrics, losses = {}, {}
    for spec in specs:
        examples = tasksmod.heldout_set(spec, seed, cfg.eval_size, cfg.backbone.n_visual_tokens)
        noise_rng = Rng(seed).child(777)
        feats, text, tmask, dec_in, dec_out, dmask, _ = _make_batch(
            model, cfg, spec, noise_rng, feature_table, examples=examples
        )
        logits = model.forward_batch(feats, text, tmask, dec_in, dmask)
        losses[spec.name] = float(cross_entropy(logits, dec_out, dmask).item())
        max_steps = int(dmask.sum(axis=1).max()) + 2
        decoded = model.greedy_decode(feats, text, tmask, max_steps=max_steps)
        hits = sum(1 for e, out in zip(examples, decoded) if out == e.target_ids)
        metrics[spec.name] = hits / len(examples)
    return metrics, losses


def _train(model, cfg, specs, rng, feature_table):
    """Uniformly interleaved training; returns (loss_trace, failed_step)."""
    params = model.trainable_params()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay) if params else None
    sched = LinearWarmupSchedule(cfg.steps, cfg.warmup_ratio)
    stream_rngs = {spec.name: tasksmod.train_stream_rng(spec, cfg.seed) for spec in specs}
    trace = []
    for step in range(cfg.steps):
        spec = specs[step % len(specs)]
        feats, text, tmask, dec_in, dec_out, dmask, _ = _make_batch(
            model, cfg, spec, stream_rngs[spec.name], feature_table, size=cfg.batch
        )
        logits = model.forward_batch(feats, text, tmask, dec_in, dmask)
        loss = cross_entropy(logits, dec_out, dmask)
        value = float(loss.item())
        trace.append(value)
        if not np.isfinite(value):
            return trace, step
        if opt is not None:
            opt.zero_grad()
            loss.backward()
            opt.step(lr_scale=sched.scale(step))
    return trace, -1


def run_experiment(cfg):
    """Train and evaluate one configuration at one seed."""
    cfg.validate()
    start = time.perf_counter()
    trainable, total, percentage = count_params(cfg)
    specs = [tasksmod.task_spec(name) for name in cfg.task_list()]
    feature_table = tasksmod.symbol_features(cfg.backbone.visual_dim)
    result = RunResult(
        method=cfg.method,
        seed=cfg.seed,
        config_hash=cfgmod.config_hash(cfg),
        trainable=trainable,
        total=total,
        percentage=percentage,
    )
    if cfg.task_mode == "multi":
        model = build_model(cfg, rng=Rng(cfg.seed))
        actual_trainable, _ = model.param_count()
        if actual_trainable != trainable:
            raise cfgmod.ConfigError(
                f"analytic trainable count {trainable} != instantiated {actual_trainable}"
            )
        trace, failed_step = _train(model, cfg, specs, Rng(cfg.seed), feature_table)
        result.loss_trace = trace
        if failed_step >= 0:
            result.failed, result.failed_step = True, failed_step
        else:
            result.task_metrics, result.task_losses = _evaluate(
                model, cfg, specs, cfg.seed, feature_table
            )
    else:  # single-task: a fresh model (and fresh modules) per task
        for spec in specs:
            model = build_model(cfg, rng=Rng(cfg.seed))
            trace, failed_step = _train(model, cfg, [spec], Rng(cfg.seed), feature_table)
            result.loss_trace += trace
            if failed_step >= 0:
                result.failed, result.failed_step = True, failed_step
                break
            m, l = _evaluate(model, cfg, [spec], cfg.seed, feature_table)
            result.task_metrics.update(m)
            result.task_losses.update(l)
    result.wall_time = time.perf_counter() - start
    return result


# -- ablation grids ----------------------------------------------------------------

GRID_AXES = ("level", "sites", "heads", "ln", "r", "init", "s", "visual_mode", "task_mode")

_SITE_ROWS = [
    ("self", "dec_self.*"),
    ("cross", "dec_cross.*"),
    ("ff", "dec_ff.*"),
    ("self+cross", "dec_self.*,dec_cross.*"),
    ("self+ff", "dec_self.*,dec_ff.*"),
    ("cross+ff", "dec_cross.*,dec_ff.*"),
    ("self+cross+ff", "dec_self.*,dec_cross.*,dec_ff.*"),
    ("cross_k", "dec_cross_k.*"),
    ("cross_v", "dec_cross_v.*"),
]


def grid_cells(base, axis):
    """(label, config) pairs for one ablation axis; seeds shared across cells."""
    from dataclasses import replace

    if axis == "level":
        methods = ["ungated", "gated_small", "gated_middle_x", "gated_middle_y", "gated_large"]
        return [(m, replace(base, method=m)) for m in methods]
    if axis == "sites":
        enc = "enc_self.*,enc_ff.*"
        return [
            (label, replace(base, plan="custom", custom_sites=f"{enc},{dec}"))
            for label, dec in _SITE_ROWS
        ]
    if axis == "heads":
        return [(f"heads={h}", replace(base, n_heads=h)) for h in (1, 2, 4, 8)]
    if axis == "ln":
        cells = []
        for enc_ln in (False, True):
            for dec_ln in (False, True):
                label = f"enc_ln={'on' if enc_ln else 'off'},dec_ln={'on' if dec_ln else 'off'}"
                cells.append(
                    (label, replace(base, encoder_ln_trainable=enc_ln, decoder_ln_trainable=dec_ln))
                )
        return cells
    if axis == "r":
        values = [base.r, base.r * 3 // 2, base.r * 2]
        return [(f"r={r}", replace(base, r=r)) for r in values]
    if axis == "init":
        return [(i, replace(base, init=i)) for i in ("gaussian", "zero_up")]
    if axis == "s":
        return [(f"s={s}", replace(base, s=s)) for s in (0.1, 0.3, 1.0, 2.0, 4.0)]
    if axis == "visual_mode":
        return [(m, replace(base, visual_mode=m)) for m in ("absent", "noise", "frozen", "trainable")]
    if axis == "task_mode":
        return [(m, replace(base, task_mode=m)) for m in ("single", "multi")]
    raise cfgmod.ConfigError(f"unknown grid axis {axis!r}; choose from {GRID_AXES}")


def run_ablation_grid(base, axis):
    """One RunResult per cell; per-cell failures recorded, grid continues."""
    rows = []
    for label, cell_cfg in grid_cells(base, axis):
        try:
            result = run_experiment(cell_cfg)
        except Exception as e:  # keep the grid alive on per-cell errors
            result = RunResult(
                method=cell_cfg.method,
                seed=cell_cfg.seed,
                config_hash=cfgmod.config_hash(cell_cfg),
                failed=True,
            )
            result.error = str(e)
        rows.append((label, cell_cfg, result))
    return rows


# -- emission ----------------------------------------------------------------------


def emit_results(results, csv_path, json_path=None, configs=None, labels=None):
    """Write a stable-column CSV plus a JSON sidecar with full configs."""
    task_names = sorted({t for r in results for t in r.task_metrics})
    columns = (
        ["label", "config_hash", "method", "seed"]
        + [f"metric.{t}" for t in task_names]
        + [f"loss.{t}" for t in task_names]
        + ["final_train_loss", "trainable", "total", "percentage", "failed", "failed_step", "wall_time"]
    )
    labels = labels or [""] * len(results)
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for label, r in zip(labels, results):
            row = [label, r.config_hash, r.method, r.seed]
            row += [f"{r.task_metrics.get(t, ''):.6f}" if t in r.task_metrics else "" for t in task_names]
            row += [f"{r.task_losses.get(t, ''):.6f}" if t in r.task_losses else "" for t in task_names]
            final = f"{r.loss_trace[-1]:.6f}" if r.loss_trace else ""
            row += [final, r.trainable, r.total, f"{r.percentage:.4f}", r.failed, r.failed_step,
                    f"{r.wall_time:.3f}"]
            w.writerow(row)
    if json_path is not None:
        payload = []
        for i, r in enumerate(results):
            entry = {
                "label": labels[i],
                "config_hash": r.config_hash,
                "method": r.method,
                "seed": r.seed,
                "task_metrics": r.task_metrics,
                "task_losses": r.task_losses,
                "trainable": r.trainable,
                "total": r.total,
                "percentage": r.percentage,
                "loss_trace": r.loss_trace,
                "failed": r.failed,
                "failed_step": r.failed_step,
                "wall_time": r.wall_time,
            }
            if configs is not None:
                entry["config"] = cfgmod.to_text(configs[i])
            payload.append(entry)
        with open(json_path, "w") as f:
            json.dump(payload, f, indent=2)
