"""Experiment runner and ablation tables.

run_experiment drives the three-stage curriculum for one config and writes
everything reproducible under <out_dir>/<name>/: the resolved config, an
append-only per-step metrics CSV, stage checkpoints, report rows, and
figures. ablate runs a directory of configs (optionally in parallel,
bounded by PAL_THREADS) and renders a stage-grouped comparison table with
design-element checkmarks and best-per-column flags.

The metrics CSV contains no timing data, so identical (config, seed) runs
are byte-identical; wall-clock lives in the report CSV only.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .figures import plot_loss_curve, plot_stage_accuracy
from .model import PalModel
from .rng import derive_seed
from .synth import make_encoder_set
from .trainer import evaluate_accuracy, heldout_samples, run_curriculum

TASKS = ("classify", "first_event", "count")

REPORT_COLUMNS = [
    "config", "stage", "baseline", "delayed_fusion", "attention_only",
    "multi_encoder", "acc_classify", "acc_first_event", "acc_count",
    "acc_mean", "final_loss", "params_total", "params_connector",
    "wall_clock_s", "best_accuracy", "best_loss",
]


def build_model(cfg: ExperimentConfig):
    profiles = make_encoder_set(cfg.encoders, derive_seed(cfg.seed, "encoders"))
    model = PalModel(cfg.model, cfg.fusion, cfg.connector, profiles, cfg.seed)
    return model, profiles


def run_experiment(cfg: ExperimentConfig, eval_n: int = 500,
                   log=None) -> list[dict]:
    """Train one config through all stages; returns one report row per stage."""
    out = Path(cfg.out_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    model, profiles = build_model(cfg)
    rows: list[dict] = []
    metric_rows: list[tuple] = []
    elements = cfg.design_elements()

    with open(out / "metrics.csv", "w") as mf:
        mf.write("step,stage,lr,loss\n")

        def metrics(step, stage, lr, loss):
            mf.write(f"{step},{stage},{lr!r},{loss!r}\n")
            metric_rows.append((step, stage, lr, loss))

        def on_stage_end(stage, sr):
            save_checkpoint(model.named_parameters(), cfg,
                            out / f"stage{stage.stage_id}.ckpt")
            row = {
                "config": cfg.name,
                "stage": stage.stage_id,
                **{k: int(v) for k, v in elements.items()},
                "acc_mean": sr.mean_accuracy,
                "final_loss": sr.final_loss,
                "params_total": model.param_count(),
                "params_connector": model.connectors.param_count(),
                "wall_clock_s": sr.wall_clock,
            }
            for task in TASKS:
                row[f"acc_{task}"] = sr.heldout_accuracy.get(task)
            rows.append(row)
            if log is not None:
                accs = ", ".join(f"{t}={a:.3f}"
                                 for t, a in sr.heldout_accuracy.items())
                log(f"{cfg.name} stage {stage.stage_id}: loss "
                    f"{sr.final_loss:.4f}, {accs}, {sr.wall_clock:.0f}s")

        run_curriculum(model, cfg.stages(), profiles, cfg.seed,
                       metrics=metrics, eval_n=eval_n,
                       on_stage_end=on_stage_end)

    write_report_csv(rows, out / "report.csv")
    plot_loss_curve(metric_rows, out / "loss_curve.png",
                    title=f"{cfg.name}: training loss")
    plot_stage_accuracy(
        [{"config": r["config"], "stage": r["stage"], "accuracy": r["acc_mean"]}
         for r in rows],
        out / "accuracy.png", title=f"{cfg.name}: held-out accuracy")
    return rows


def recompute_stage_accuracy(run_dir, stage_id: int,
                             eval_n: int = 500) -> dict[str, float]:
    """Re-derive a report row's accuracies from its checkpoint alone."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    model, profiles = build_model(cfg)
    restore_into(model.named_parameters(),
                 load_checkpoint(run_dir / f"stage{stage_id}.ckpt", cfg))
    stage = cfg.stages()[stage_id - 1]
    acc = {}
    for task in stage.task_mix:
        samples = heldout_samples(cfg.seed, stage_id, task,
                                  max(eval_n // len(stage.task_mix), 1))
        acc[task] = evaluate_accuracy(model, profiles, samples)
    return acc


# ---------------------------------------------------------------------------
# ablation tables

def _flag_best(rows: list[dict]) -> None:
    """Within each stage group, flag the best mean accuracy (max) and best
    final loss (min); ties are all flagged."""
    stages = sorted({r["stage"] for r in rows})
    for stage in stages:
        group = [r for r in rows if r["stage"] == stage]
        best_acc = max(r["acc_mean"] for r in group)
        best_loss = min(r["final_loss"] for r in group)
        for r in group:
            r["best_accuracy"] = int(r["acc_mean"] == best_acc)
            r["best_loss"] = int(r["final_loss"] == best_loss)


def write_report_csv(rows: list[dict], path) -> None:
    rows = [dict(r) for r in rows]
    _flag_best(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in sorted(rows, key=lambda r: (r["stage"], r["config"])):
            out = dict(r)
            for task in TASKS:
                v = out[f"acc_{task}"]
                out[f"acc_{task}"] = "" if v is None else f"{v:.4f}"
            out["acc_mean"] = f"{out['acc_mean']:.4f}"
            out["final_loss"] = f"{out['final_loss']:.6f}"
            out["wall_clock_s"] = f"{out['wall_clock_s']:.2f}"
            w.writerow(out)


def render_table(rows: list[dict]) -> str:
    """Aligned text table grouped by stage; '*' marks the best value in a
    column within the stage group; checkmark columns show design elements."""
    rows = [dict(r) for r in rows]
    _flag_best(rows)
    headers = ["config", "base", "delay", "attn", "multi",
               "classify", "first", "count", "mean", "loss", "params"]
    lines = []
    for stage in sorted({r["stage"] for r in rows}):
        group = sorted((r for r in rows if r["stage"] == stage),
                       key=lambda r: r["config"])
        table = [headers]
        for r in group:
            marks = ["x" if r[k] else "" for k in
                     ("baseline", "delayed_fusion", "attention_only",
                      "multi_encoder")]
            accs = ["" if r[f"acc_{t}"] is None else f"{r[f'acc_{t}']:.3f}"
                    for t in TASKS]
            mean = f"{r['acc_mean']:.3f}" + ("*" if r["best_accuracy"] else "")
            loss = f"{r['final_loss']:.4f}" + ("*" if r["best_loss"] else "")
            table.append([r["config"], *marks, *accs, mean, loss,
                          str(r["params_total"])])
        widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
        lines.append(f"== stage {stage} ==")
        for row in table:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        lines.append("")
    return "\n".join(lines)


def _run_config_file(args) -> list[dict]:
    path, eval_n = args
    return run_experiment(load_config(path), eval_n=eval_n)


def ablate(config_dir, out_path, eval_n: int = 500, log=None) -> list[dict]:
    """Run every JSON config in a directory and write the comparison table
    (CSV at out_path, aligned text and a figure alongside it)."""
    config_dir = Path(config_dir)
    paths = sorted(config_dir.glob("*.json"))
    if not paths:
        raise ConfigError(f"no *.json configs found in {config_dir}")
    names = [load_config(p).name for p in paths]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate config name(s): {', '.join(dupes)}")

    threads = max(1, int(os.environ.get("PAL_THREADS", "1")))
    args = [(str(p), eval_n) for p in paths]
    if threads > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_config_file, args))
    else:
        results = [_run_config_file(a) for a in args]

    rows = [r for result in results for r in result]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(rows, out_path)
    text = render_table(rows)
    out_path.with_suffix(".txt").write_text(text)
    plot_stage_accuracy(
        [{"config": r["config"], "stage": r["stage"], "accuracy": r["acc_mean"]}
         for r in rows],
        out_path.with_suffix(".png"))
    if log is not None:
        log(text)
    return rows
