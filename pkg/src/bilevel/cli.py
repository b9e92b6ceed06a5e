"""Command-line front end: ``run``, ``table``, ``plots`` and ``list``."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

import click

from . import bench
from .algorithms import ALGORITHMS
from .core import UsageError
from .problems import PAPER_DIMS, catalog, registry_lookup


def _split(values: tuple[str, ...]) -> list[str]:
    out: list[str] = []
    for v in values:
        out += [s.strip() for s in v.split(",") if s.strip()]
    return out


def _out_dir(out: Optional[str]) -> Path:
    return Path(out) if out else bench.default_out_dir()


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Bilevel evolutionary optimization experiments."""


@main.command()
@click.option("--algo", "algos", multiple=True, required=True,
              help=f"Algorithm(s), comma separated: {', '.join(ALGORITHMS)}.")
@click.option("--problem", "problems", multiple=True, required=True, help="Problem name(s), comma separated.")
@click.option("--dims", default=None, help="SMD sub-vector sizes p,q,r[,s].")
@click.option("--runs", default=31, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int, help="Base seed; run i uses seed + i.")
@click.option("--accuracy", default=None, type=float, help="Known-optimum accuracy target.")
@click.option("--alpha-stop", default=None, type=float, help="Variance-termination threshold.")
@click.option("--k", default=None, type=int, help="Generations between local searches.")
@click.option("--budget", default=None, type=int, help="Lower-level evaluation budget.")
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--out", default=None, help=f"Output directory (default ${bench.OUT_ENV} or ./{bench.DEFAULT_OUT}).")
def run(algos, problems, dims, runs, seed, accuracy, alpha_stop, k, budget, workers, out):
    """Run campaigns and write one record file per run plus a manifest."""
    overrides = bench.Overrides(accuracy=accuracy, alpha_stop=alpha_stop, k=k, budget=budget)
    try:
        campaigns = [
            bench.Campaign(a, p, bench.parse_dims(dims), runs, seed, overrides, _out_dir(out))
            for p in _split(problems) for a in _split(algos)
        ]
    except UsageError as exc:
        raise click.UsageError(str(exc)) from exc
    for c in campaigns:
        records = bench.run_campaign(c, workers=workers)
        ok = sum(r.success for r in records)
        click.echo(f"{c.label}: {ok}/{len(records)} successful -> {c.directory}")


@main.command()
@click.option("--out", default=None, help="Directory holding campaign records.")
@click.option("--reference", default="nested", show_default=True, help="Algorithm savings are measured against.")
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md", show_default=True)
def table(out, reference, fmt):
    """Summarize records; writes summary.csv and summary.md next to them."""
    root = _out_dir(out)
    records = bench.load_records(root)
    if not records:
        raise click.UsageError(f"no record files under {root}")
    rows = bench.summarize(records, reference=reference)
    csv_text, md_text = bench.table_csv(rows), bench.table_markdown(rows)
    (root / "summary.csv").write_text(csv_text, encoding="utf-8")
    (root / "summary.md").write_text(md_text, encoding="utf-8")
    click.echo(md_text if fmt == "md" else csv_text, nl=False)


@main.command()
@click.option("--out", default=None, help="Directory holding campaign records.")
@click.option("--dest", default=None, help="Where to write plot data (default OUT/plots).")
def plots(out, dest):
    """Emit bar-chart and approximation-error data files."""
    root = _out_dir(out)
    records = bench.load_records(root)
    if not records:
        raise click.UsageError(f"no record files under {root}")
    written, notices = bench.emit_plot_data(records, Path(dest) if dest else root / "plots")
    for note in notices:
        click.echo(f"notice: {note}", err=True)
    click.echo(f"wrote {len(written)} files")


@main.command("list")
def list_problems():
    """List problem names, sizes and algorithms."""
    for name in catalog():
        try:
            p = registry_lookup(name)
            click.echo(f"{name:8s} n={p.n} m={p.m} K={p.K} J={p.J}")
        except UsageError:
            sizes = "; ".join(f"{n}-var: {bench.format_dims(d)}" for (pn, n), d in sorted(PAPER_DIMS.items())
                              if pn == name)
            click.echo(f"{name:8s} needs --dims p,q,r[,s] ({sizes})")
    click.echo(f"algorithms: {', '.join(ALGORITHMS)}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
