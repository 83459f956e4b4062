"""Command-line entry points.

Exit codes: 0 success, 1 verification/check failure, 2 config error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import (CANONICAL_NAMES, ConfigError, canonical_config,
                     load_config, save_config, serialize_config)
from .harness import ablate as run_ablate
from .harness import render_table, run_experiment


@click.group()
def main():
    """Audio-fusion ablation harness."""


def _config_error(exc: ConfigError):
    click.echo(f"config error: {exc}", err=True)
    sys.exit(2)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--eval-n", default=500, show_default=True,
              help="Held-out samples per stage evaluation.")
def run(config_path, eval_n):
    """Train one experiment config through the full curriculum."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _config_error(exc)
    rows = run_experiment(cfg, eval_n=eval_n, log=click.echo)
    click.echo(render_table(rows))
    click.echo(f"outputs under {Path(cfg.out_dir) / cfg.name}")


@main.command()
@click.option("--configs", "config_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--eval-n", default=500, show_default=True)
def ablate(config_dir, out_path, eval_n):
    """Run every config in a directory and write the comparison table.

    PAL_THREADS bounds how many experiments run in parallel."""
    try:
        run_ablate(config_dir, out_path, eval_n=eval_n, log=click.echo)
    except ConfigError as exc:
        _config_error(exc)
    click.echo(f"table written to {out_path}")


@main.command()
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Also write the report to this path.")
def verify(out_path):
    """Run the structural invariant suite."""
    from .verify import run_all

    report = run_all()
    text = report.render()
    click.echo(text)
    if out_path:
        Path(out_path).write_text(text + "\n")
    sys.exit(0 if report.passed else 1)


@main.command()
def gradcheck():
    """Finite-difference gradient check on miniature models, every fusion
    mode and both connector-sharing variants."""
    from .verify import check_gradcheck_modes

    result = check_gradcheck_modes()
    click.echo(result.line())
    sys.exit(0 if result.passed else 1)


@main.command("dump-config")
@click.option("--canonical", "name", required=True,
              type=click.Choice(CANONICAL_NAMES + ("all",)))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="File (single config) or directory (--canonical all).")
@click.option("--seed", default=0, show_default=True)
def dump_config(name, out_path, seed):
    """Emit canonical experiment configs as JSON."""
    names = CANONICAL_NAMES if name == "all" else (name,)
    if name == "all" and out_path is None:
        _config_error(ConfigError("--canonical all requires --out <dir>"))
    for n in names:
        cfg = canonical_config(n, seed=seed)
        if out_path is None:
            click.echo(serialize_config(cfg), nl=False)
        elif name == "all":
            d = Path(out_path)
            d.mkdir(parents=True, exist_ok=True)
            save_config(cfg, d / f"{n}.json")
            click.echo(f"wrote {d / f'{n}.json'}")
        else:
            save_config(cfg, out_path)
            click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
