"""Command-line entry point: ``trajxfer <command> [options]``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
Every command accepts ``--config FILE`` (flat ``key = value`` lines named
after :class:`ExperimentConfig` / :class:`ModelConfig` fields), repeated
``--set key=value`` overrides and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from trajxfer.data import (
    FORMATS,
    SynthRegionSpec,
    export_region,
    generate_region,
    ingest,
    preprocess,
    write_trajectories,
)
from trajxfer.errors import TrajError
from trajxfer.geo import RemoteProvider, StubProvider, load_context
from trajxfer.model import RTTE, load_checkpoint, read_checkpoint, save_checkpoint
from trajxfer.moe import GateStats
from trajxfer.tasks import TaskKind
from trajxfer.train import ExperimentConfig, _coerce, evaluate, finetune, parse_config_text, pretrain

log = logging.getLogger("trajxfer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for runtime errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajxfer", description="Transferable trajectory encoder: data, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic region")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-trajectories", type=int, default=200)
    p.add_argument("--n-pois", type=int)
    p.add_argument("--offset", type=float, nargs=2, metavar=("DLNG", "DLAT"), default=(0.0, 0.0),
                   help="shift the region bounds by this many degrees")
    p.add_argument("--format", choices=FORMATS, default="point-rows")

    p = sub.add_parser("prep", help="ingest, resample, filter and split trajectories")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory for train/val/test files")
    p.add_argument("--format", choices=FORMATS, default="point-rows")
    p.add_argument("--no-resample", action="store_true")
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int)

    for name, helptext in (("pretrain", "mask-and-recover pretraining"), ("finetune", "task-specific fine-tuning")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--task", required=True, choices=[t.value for t in TaskKind if t is not TaskKind.PRETRAIN])
        p.add_argument("--train", help="training trajectories")
        p.add_argument("--val", help="validation trajectories")
        p.add_argument("--pois")
        p.add_argument("--roads")
        p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
        p.add_argument("--out", required=True, help="checkpoint to write (.npz)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in TaskKind if t is not TaskKind.PRETRAIN])
    p.add_argument("--test", help="test trajectories")
    p.add_argument("--pois")
    p.add_argument("--roads")
    p.add_argument("--out", help="metric report (default: stdout)")
    p.add_argument("--gates", help="also write the expert-routing report here")

    p = sub.add_parser("report", help="summarise metric/gate reports into a table and plots")
    p.add_argument("inputs", nargs="+", help="metric or gate report files")
    p.add_argument("--out", required=True, help="output directory")
    return parser


# ------------------------------------------------------------------ config

def resolve_config(args, base: dict | None = None) -> ExperimentConfig:
    """Defaults < ``base`` < config file < ``--set`` < dedicated flags."""
    flat = ExperimentConfig().flat()
    if base:
        flat.update({k: v for k, v in base.items() if k in flat})
    if getattr(args, "config", None):
        flat.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = _coerce(v)
    flags = {"seed": "seed", "train": "train_path", "val": "val_path", "test": "test_path",
             "pois": "poi_path", "roads": "road_path", "steps": "max_steps", "task": "task"}
    for attr, key in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            flat[key] = val
    try:
        return ExperimentConfig.from_flat(flat)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _require(cfg: ExperimentConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def _provider(cfg: ExperimentConfig):
    if cfg.embedding_provider == "stub":
        return StubProvider(cfg.model.d_text)
    if cfg.embedding_provider == "remote":
        return RemoteProvider(cfg.model.d_text)
    raise UsageError(f"unknown embedding_provider {cfg.embedding_provider!r}")


def _context(cfg: ExperimentConfig):
    _require(cfg, "poi_path", "road_path")
    return load_context(cfg.poi_path, cfg.road_path, _provider(cfg), cfg.cache_path)


def _trajs(path: str | None, cfg: ExperimentConfig):
    return ingest(path, cfg.data_format) if path else []


def _rebind(model: RTTE, cfg) -> RTTE:
    """Same weights under a (compatible) config with possibly different training knobs."""
    if model.cfg == cfg:
        return model
    fresh = RTTE(cfg)
    fresh.load_state_dict(model.state_dict())
    return fresh


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    cfg = resolve_config(args)
    base = SynthRegionSpec()
    lng0, lat0, lng1, lat1 = base.bounds
    dlng, dlat = args.offset
    spec = dataclasses.replace(
        base, seed=cfg.model.seed, n_trajectories=args.n_trajectories,
        n_pois=args.n_pois or base.n_pois, bounds=(lng0 + dlng, lat0 + dlat, lng1 + dlng, lat1 + dlat),
    )
    ctx, trajs = generate_region(spec)
    paths = export_region(args.out, ctx, trajs, args.format)
    meta = {"spec": dataclasses.asdict(spec), "files": {k: v.name for k, v in paths.items()}, "format": args.format}
    (Path(args.out) / "region.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d trajectories, %d POIs, %d roads to %s", len(trajs), len(ctx.pois), len(ctx.roads), args.out)


def cmd_prep(args) -> None:
    cfg = resolve_config(args)
    trajs = ingest(args.input, args.format)
    split = preprocess(trajs, resample=not args.no_resample, min_len=args.min_len,
                       max_len=args.max_len or cfg.model.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        write_trajectories(out / f"{name}.csv", getattr(split, name), args.format)
    log.info("split %d/%d/%d", len(split.train), len(split.val), len(split.test))


def cmd_pretrain(args) -> None:
    cfg = resolve_config(args)
    _require(cfg, "train_path")
    torch.manual_seed(cfg.model.seed)
    ctx = _context(cfg)
    state = pretrain(cfg, ctx, _trajs(cfg.train_path, cfg), _trajs(cfg.val_path, cfg))
    save_checkpoint(state.model, args.out, {"stage": "pretrain", "steps": state.step, "history": state.history})


def cmd_finetune(args) -> None:
    meta, _ = read_checkpoint(args.checkpoint)
    cfg = resolve_config(args, meta["config"])
    _require(cfg, "train_path")
    model = _rebind(load_checkpoint(args.checkpoint, expect=cfg.model), cfg.model)
    ctx = _context(cfg)
    state = finetune(cfg, model, args.task, ctx, _trajs(cfg.train_path, cfg), _trajs(cfg.val_path, cfg))
    save_checkpoint(state.model, args.out,
                    {"stage": f"finetune-{args.task}", "steps": state.step, "history": state.history})


def cmd_eval(args) -> None:
    meta, _ = read_checkpoint(args.checkpoint)
    cfg = resolve_config(args, meta["config"])
    _require(cfg, "test_path")
    model = _rebind(load_checkpoint(args.checkpoint, expect=cfg.model), cfg.model)
    ctx = _context(cfg)
    report = evaluate(model, ctx, _trajs(cfg.test_path, cfg), args.task, cfg.tr_ratio, cfg.dataset)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.gates:
        Path(args.gates).write_text(report.gates.to_csv(), encoding="utf-8")


def _read_reports(paths: Sequence[str]):
    metric_rows, gate_tables = [], {}
    for path in paths:
        text = Path(path).read_text(encoding="utf-8")
        header = next(csv.reader(io.StringIO(text)), [])
        if header[:3] == ["task", "dataset", "metric"]:
            metric_rows.extend(csv.DictReader(io.StringIO(text)))
        elif header[:1] == ["density"]:
            gate_tables[Path(path).stem] = GateStats.read_csv(text)
        else:
            raise ValueError(f"{path}: not a metric or gate report")
    return metric_rows, gate_tables


def cmd_report(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, gates = _read_reports(args.inputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = defaultdict(list)
    for r in rows:
        groups[(r["task"], r["dataset"], r["metric"])].append(float(r["value"]))
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "dataset", "metric", "mean", "std", "n_runs"])
        for key in sorted(groups):
            v = np.asarray(groups[key])
            w.writerow([*key, f"{v.mean():.10g}", f"{v.std():.10g}", len(v)])
    if groups:
        keys = sorted(groups)
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(keys)), 3.5))
        means = [np.mean(groups[k]) for k in keys]
        stds = [np.std(groups[k]) for k in keys]
        ax.bar(range(len(keys)), means, yerr=stds)
        ax.set_xticks(range(len(keys)), ["/".join(k) for k in keys], rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("value")
        fig.tight_layout()
        fig.savefig(out / "metrics.png", dpi=120)
        plt.close(fig)
    for name, table in gates.items():
        classes = list(table)
        mat = np.stack([table[c] for c in classes])
        fig, ax = plt.subplots(figsize=(1 + 0.5 * mat.shape[1], 0.5 + 0.5 * len(classes)))
        im = ax.imshow(mat, aspect="auto", cmap="viridis", vmin=0)
        ax.set_yticks(range(len(classes)), classes)
        ax.set_xticks(range(mat.shape[1]), [str(j) for j in range(mat.shape[1])])
        ax.set_xlabel("expert")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=120)
        plt.close(fig)


COMMANDS = {
    "synth": cmd_synth, "prep": cmd_prep, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "eval": cmd_eval, "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"trajxfer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrajError, OSError, ValueError, KeyError) as exc:
        print(f"trajxfer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
