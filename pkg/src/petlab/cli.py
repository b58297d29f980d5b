"""Command line entry points: run, grid, count, dump-g, verify."""

from __future__ import annotations

import os
import sys

import click
import numpy as np

from . import config as cfgmod
from . import harness, plots, tasks as tasksmod
from .backbone import InsertionSite
from .granularity import dump_g
from .tensor import Rng, Tensor


def _load_config(path, overrides):
    cfg = cfgmod.load(path)
    env_seed = os.environ.get("PET_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE",
    help="Override a config key (repeatable).",
)


@click.group()
def main():
    """Granularity-controlled parameter-efficient tuning experiments."""


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@set_option
@click.option("--out", "out_dir", default=".", type=click.Path(), help="Output directory.")
def run(config_path, overrides, out_dir):
    """Train and evaluate one configuration."""
    cfg = _load_config(config_path, overrides)
    os.makedirs(out_dir, exist_ok=True)
    result = harness.run_experiment(cfg)
    csv_path = os.path.join(out_dir, "results.csv")
    harness.emit_results([result], csv_path, os.path.join(out_dir, "results.json"),
                         configs=[cfg], labels=[cfg.method])
    plots.plot_loss_curves({cfg.method: result.loss_trace},
                           os.path.join(out_dir, "loss_curve.png"))
    click.echo(f"method={result.method} seed={result.seed} "
               f"trainable={result.trainable} ({result.percentage:.3f}%)")
    for task in sorted(result.task_metrics):
        click.echo(f"  {task}: exact_match={result.task_metrics[task]:.3f} "
                   f"heldout_loss={result.task_losses[task]:.4f}")
    if result.failed:
        click.echo(f"  FAILED (non-finite loss at step {result.failed_step})")
    click.echo(f"wrote {csv_path}")
    sys.exit(1 if result.failed else 0)


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--axis", required=True, type=click.Choice(harness.GRID_AXES))
@set_option
@click.option("--out", "out_dir", default=".", type=click.Path(), help="Output directory.")
def grid(config_path, axis, overrides, out_dir):
    """Run an ablation grid along one axis."""
    cfg = _load_config(config_path, overrides)
    os.makedirs(out_dir, exist_ok=True)
    rows = harness.run_ablation_grid(cfg, axis)
    labels = [r[0] for r in rows]
    configs = [r[1] for r in rows]
    results = [r[2] for r in rows]
    csv_path = os.path.join(out_dir, f"results_{axis}.csv")
    harness.emit_results(results, csv_path, os.path.join(out_dir, f"results_{axis}.json"),
                         configs=configs, labels=labels)
    plots.plot_metric_bars(labels, [r.task_metrics for r in results],
                           os.path.join(out_dir, f"metrics_{axis}.png"),
                           title=f"held-out exact match by {axis}")
    plots.plot_loss_curves({lbl: r.loss_trace for lbl, r in zip(labels, results) if r.loss_trace},
                           os.path.join(out_dir, f"losses_{axis}.png"),
                           title=f"training loss by {axis}")
    for lbl, r in zip(labels, results):
        status = "failed" if r.failed else "ok"
        click.echo(f"{lbl:24s} {status} trainable={r.trainable} pct={r.percentage:.3f}")
    click.echo(f"wrote {csv_path}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@set_option
def count(config_path, overrides):
    """Print the analytic parameter accounting for a configuration."""
    cfg = _load_config(config_path, overrides)
    trainable, total, pct = harness.count_params(cfg)
    click.echo(f"trainable {trainable}")
    click.echo(f"total     {total}")
    click.echo(f"percent   {pct:.4f}")


@main.command(name="dump-g")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--site", default="enc_self.0", show_default=True,
              help="Insertion site to read the gate matrix from.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Destination CSV for the (N, d) gate matrix.")
@set_option
def dump_g_cmd(config_path, site, out_path, overrides):
    """Write one input's gate matrix at SITE as CSV plus a heatmap."""
    cfg = _load_config(config_path, overrides)
    model = harness.build_model(cfg)
    parsed = InsertionSite.parse(site)
    if parsed not in model.attachments:
        raise click.ClickException(
            f"no attachment at {site}; attached sites: "
            + ", ".join(sorted(str(s) for s in model.attachments))
        )
    spec = tasksmod.task_spec(cfg.task_list()[0])
    rng = Rng(cfg.seed).child(999)
    feats, text, tmask, dec_in, _, dmask, _ = harness._make_batch(
        model, cfg, spec, rng, tasksmod.symbol_features(cfg.backbone.visual_dim), size=1
    )
    capture = {}
    model.forward_batch(feats, text, tmask, dec_in, dmask, capture=capture)
    g = capture[site]["G"].data[0]
    dump_g(out_path, g)
    fig_path = os.path.splitext(out_path)[0] + ".png"
    plots.plot_gate_heatmap(g, fig_path, title=f"gate at {site} ({cfg.method})")
    click.echo(f"wrote {out_path} ({g.shape[0]}x{g.shape[1]}) and {fig_path}")


@main.command()
@click.option("--filter", "pattern", default=None, help="Only run cases matching this substring.")
def verify(pattern):
    """Run the verification suite; nonzero exit on any failure."""
    from .verify import run_suite

    failures = run_suite(pattern, out=sys.stdout)
    sys.exit(1 if failures else 0)
