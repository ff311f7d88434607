"""Command-line entry point: ``moeedit {gen,edit,bench,sweep,ablate,analyze}``.

``analyze`` reads ``final_model.npz`` from a previous ``edit`` run in ``--out``
and writes into ``--out/analysis``.

Every run writes ``manifest.json`` first (status ``running``) and rewrites it
last (status ``complete``) after all listed files are flushed to disk.

Exit codes: 0 success, 1 validation error, 2 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import config_hash, format_config, load_config
from .container import save_container
from .harness import (
    BenchRow,
    ExperimentConfig,
    SequentialResult,
    SweepRow,
    bench_solvers,
    gen_instance,
    passes_sweep,
    projection_ablation,
    run_sequential_edit,
)
from .moe_core import load_model, save_model
from .nullspace import save_projectors
from .routing import compare_routing
from .solver import SolverError

log = logging.getLogger("moeedit")

SUBCOMMANDS = ("gen", "edit", "bench", "sweep", "ablate", "analyze")


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".9g")
    return str(x)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moeedit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="flat key=value config file")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--quiet", action="store_true")
    return parser


class RunWriter:
    """Tracks written files and maintains the manifest."""

    def __init__(self, out: Path, subcommand: str, config: ExperimentConfig):
        self.out = out
        self.files: list[str] = []
        self.header = {
            "subcommand": subcommand,
            "config_hash": config_hash(config),
            "seed": config.seed,
        }
        out.mkdir(parents=True, exist_ok=True)
        self._write_manifest("running")

    def _write_manifest(self, status: str) -> None:
        doc = {**self.header, "status": status, "files": sorted(self.files)}
        tmp = self.out / "manifest.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.out / "manifest.json")

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.out / name

    def text(self, name: str, content: str) -> None:
        with open(self.path(name), "w", newline="") as fh:
            fh.write(content)

    def rows(self, name: str, header: Sequence[str], rows, delimiter: str = "\t") -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(x) for x in row])

    def json(self, name: str, doc) -> None:
        self.text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        for name in self.files:
            with open(self.out / name, "rb+") as fh:
                os.fsync(fh.fileno())
        self._write_manifest("complete")


def emit_plot_data(report, out: Path | RunWriter) -> list[Path]:
    """One delimited series file per curve: an x column plus one column per series."""
    writer = out if isinstance(out, RunWriter) else None
    rows = list(report)
    if not rows:
        return []
    if isinstance(rows[0], SweepRow):
        name, header = "plot_passes.csv", ("passes", "mean_residual", "preservation_drift")
        data = [(r.passes, r.mean_residual, r.preservation_drift) for r in rows]
    elif isinstance(rows[0], BenchRow):
        name, header = "plot_bench.csv", ("n_experts", "t_bcd_ms", "t_global_ms")
        data = [(r.n_experts, r.t_bcd_ms, r.t_global_ms) for r in rows]
    else:
        raise TypeError(f"no plot schema for {type(rows[0]).__name__}")
    if writer is not None:
        writer.rows(name, header, data, delimiter=",")
        return [writer.out / name]
    path = Path(out) / name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([fmt(x) for x in row])
    return [path]


def _summary(config: ExperimentConfig, subcommand: str, **extra) -> dict:
    return {"subcommand": subcommand, "config": config.as_dict(), "seed": config.seed, **extra}


def _write_routing(w: RunWriter, prefix: str, result: SequentialResult) -> dict:
    means = {}
    for name, rep in result.routing.items():
        w.text(f"{prefix}routing_{name}.tsv", rep.to_table())
        means[name] = {"mean_rs": rep.mean_rs.tolist(), "mean_kl": rep.mean_kl.tolist()}
    return means


def cmd_gen(config: ExperimentConfig, w: RunWriter) -> None:
    inst = gen_instance(config)
    save_model(inst.model, w.path("model.npz"))
    save_container(
        w.path("prompts.npz"),
        {
            "edit": inst.edit_prompts,
            "preservation": inst.preservation_prompts,
            "heldout": inst.heldout_prompts,
        },
        {"kind": "prompts", "seed": config.seed},
    )
    w.json("summary.json", _summary(config, "gen"))


def cmd_edit(config: ExperimentConfig, w: RunWriter) -> None:
    res = run_sequential_edit(config)
    w.rows(
        "outcomes.tsv",
        ("batch", "layer", "example", "pre_residual", "post_residual"),
        (
            (o.batch, o.layer, i, a, b)
            for o in res.outcomes
            for i, (a, b) in enumerate(zip(o.pre_residual, o.post_residual))
        ),
    )
    w.rows(
        "batches.tsv",
        ("batch", "layer", "success_rate", "preservation_drift", "objective", "passes", "global_gap"),
        (
            (o.batch, o.layer, o.success_rate, o.preservation_drift, o.objective, o.passes, o.global_gap)
            for o in res.outcomes
        ),
    )
    w.rows(
        "timings.tsv",
        ("batch", "layer", "assemble_s", "solve_s", "apply_s"),
        ((o.batch, o.layer, o.timings["assemble"], o.timings["solve"], o.timings["apply"]) for o in res.outcomes),
    )
    routing = _write_routing(w, "", res)
    save_model(res.final_model, w.path("final_model.npz"))
    for layer, ps in res.projectors.items():
        save_projectors(ps, w.path(f"projectors_L{layer}.npz"))
    w.json("summary.json", _summary(
        config, "edit",
        efficacy=res.efficacy,
        mean_post_residual=res.mean_post_residual,
        max_preservation_drift=res.max_preservation_drift,
        routing=routing,
    ))


def cmd_bench(config: ExperimentConfig, w: RunWriter) -> None:
    rows = bench_solvers(
        config.bench_n, top_k=config.top_k, d_k=config.bench_d_k, d_m=config.d_model,
        n_examples=config.bench_examples, lam=config.lam, passes=config.passes,
        repetitions=config.bench_repetitions, seed=config.seed,
    )
    w.rows("bench.tsv", BenchRow._fields, rows)
    emit_plot_data(rows, w)
    w.json("summary.json", _summary(
        config, "bench",
        objectives=[{"n_experts": r.n_experts, "bcd": r.objective_bcd, "global": r.objective_global} for r in rows],
    ))


def cmd_sweep(config: ExperimentConfig, w: RunWriter) -> None:
    rows = passes_sweep(config, config.sweep_passes)
    w.rows("sweep.tsv", SweepRow._fields, rows)
    emit_plot_data(rows, w)
    w.json("summary.json", _summary(config, "sweep", rows=[r._asdict() for r in rows]))


def cmd_ablate(config: ExperimentConfig, w: RunWriter) -> None:
    rep = projection_ablation(config)
    rows = []
    for arm in ("on", "off"):
        res = getattr(rep, arm)
        _write_routing(w, f"{arm}_", res)
        for name, r in res.routing.items():
            rows.extend((arm, name, l, a, b) for l, a, b in zip(r.layers, r.mean_rs, r.mean_kl))
    w.rows("ablation.tsv", ("projection", "set", "layer", "mean_rs", "mean_kl"), rows)
    problems = rep.check_direction()
    w.json("summary.json", _summary(config, "ablate", routing=rep.summary(), direction_violations=problems))
    for p in problems:
        log.warning("ablation direction: %s", p)


def cmd_analyze(config: ExperimentConfig, w: RunWriter) -> None:
    path = w.out.parent / "final_model.npz"
    if not path.is_file():
        raise FileNotFoundError(f"analyze needs an edited model at {path}; run `edit` first")
    edited = load_model(path)
    inst = gen_instance(config)
    sets = {
        "edit": inst.edit_prompts,
        "preservation": inst.preservation_prompts,
        "heldout": inst.heldout_prompts,
    }
    rows, doc = [], {}
    for name, prompts in sets.items():
        rep = compare_routing(inst.model, edited, prompts)
        w.text(f"analysis_routing_{name}.tsv", rep.to_table())
        for a, layer in enumerate(rep.layers):
            rows.append((
                name, layer, rep.mean_rs[a], rep.mean_kl[a],
                float(rep.input_shift[a].mean()) if rep.input_shift.size else 0.0,
                float(rep.pred_error[a].mean()) if rep.pred_error.size else 0.0,
            ))
        doc[name] = {"mean_rs": rep.mean_rs.tolist(), "mean_kl": rep.mean_kl.tolist()}
    w.rows("analysis.tsv", ("set", "layer", "mean_rs", "mean_kl", "mean_input_shift", "mean_first_order_error"), rows)
    w.json("analysis_summary.json", _summary(config, "analyze", routing=doc))


COMMANDS = {
    "gen": cmd_gen,
    "edit": cmd_edit,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def _thread_limit():
    raw = os.environ.get("MOEEDIT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MOEEDIT_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        with _thread_limit():
            out = args.out / "analysis" if args.subcommand == "analyze" else args.out
            w = RunWriter(out, args.subcommand, config)
            w.text("config.cfg", format_config(config))
            COMMANDS[args.subcommand](config, w)
            w.finish()
    except (ValueError, FileNotFoundError, IndexError, TypeError) as exc:
        print(f"moeedit: error: {exc}", file=sys.stderr)
        return 1
    except (SolverError, RuntimeError, MemoryError, np.linalg.LinAlgError) as exc:
        print(f"moeedit: solver failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
