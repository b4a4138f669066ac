"""Command-line front end: ``flowsurprise {gen,train,ic,nll,errors,correlate,segment}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    ExperimentReport,
    correlation_experiment,
    error_experiment,
    model_curves,
    novelty_curve,
    novelty_index_times,
    segmentation_experiment,
    svg_line_plot,
    timbre_invariance_experiment,
    trim_extremes,
)
from .baseline import GIVT
from .config import RunConfig, load_config
from .corpus import build_corpus, load_corpus, save_corpus
from .errors import FlowSurpriseError, InvalidArgument
from .numerics import Rng
from .surprisal import mean_nll
from .synthdata import load_dataset
from .training import build_model, estimate_sigma_data, load_model, save_model, train_model

log = logging.getLogger("flowsurprise")

SPLITS = ("test_melodies", "test_segmented", "train")


class CommandFailed(Exception):
    pass


def _label(mid: str, t) -> str:
    return mid if t is None else f"{mid}_t{t:g}".replace(".", "p")


def _write_config(cfg: RunConfig, path: Path) -> None:
    cfg.dump(path)


def _load_models(paths, dim: int | None = None) -> dict:
    models = {}
    for p in paths:
        model, _, header = load_model(p)
        mid = header.get("model_id") or Path(p).stem
        if mid in models:
            mid = f"{mid}:{len(models)}"
        d = model.dim
        if dim is not None and d != dim:
            raise InvalidArgument(f"dim mismatch: checkpoint {p} has dim={d}, dataset has dim={dim}")
        models[mid] = model
    return models


def _split(data: Path, name: str):
    if name not in SPLITS:
        raise InvalidArgument(f"unknown split {name!r}")
    seqs = load_dataset(data / name)
    if not seqs:
        raise InvalidArgument(f"split {name} of {data} is empty")
    return seqs


def _levels(model, grid: dict):
    if model.kind == GIVT:
        return [None]
    if model.kind not in grid:
        raise InvalidArgument(f"config has no noise levels for kind {model.kind}")
    return list(grid[model.kind])


def _levels_by_id(models: dict, grid: dict) -> dict:
    return {mid: _levels(m, grid) for mid, m in models.items()}


def _check_finite(report: ExperimentReport) -> None:
    for row in report.rows:
        for v in row:
            if isinstance(v, float) and not math.isfinite(v):
                raise CommandFailed(f"non-finite value in report row {row}")


# -- commands ----------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    corpus = build_corpus(cfg.data, cfg.seed)
    save_corpus(corpus, out, cfg.seed, cfg.data)
    _write_config(cfg, out / "config.json")
    log.info("wrote %d training and %d test sequences to %s", len(corpus.train),
             len(corpus.test_melodies) + len(corpus.test_segmented), out)


def cmd_train(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    train = load_dataset(Path(args.data) / "train")
    if not train:
        raise InvalidArgument(f"no training data in {args.data}")
    tcfg = cfg.train.build()
    start, state = 0, None
    if args.resume:
        model, state, header = load_model(args.resume)
        start = int(header.get("step", 0))
        if model.kind != cfg.model.kind:
            raise InvalidArgument(f"kind mismatch: checkpoint is {model.kind}, config asks for {cfg.model.kind}")
    else:
        model = build_model(cfg.model.build(), train[0].dim, estimate_sigma_data(train), Rng(cfg.seed, 1))
    if model.dim != train[0].dim:
        raise InvalidArgument(f"dim mismatch: model has dim={model.dim}, dataset has dim={train[0].dim}")
    stop = start + args.steps if args.steps else None
    result = train_model(model, train, tcfg, Rng(cfg.seed, 2), start_step=start, state=state, stop_step=stop)
    save_model(out, result.model, result.state, step=result.step, seed=cfg.seed, model_id=out.stem,
               diverged=result.diverged)
    hist = out.with_suffix(".losses.csv")
    mode = "a" if args.resume and hist.exists() else "w"
    with open(hist, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([start + i, repr(float(loss))])
    _write_config(cfg, out.with_suffix(".config.json"))
    if result.diverged:
        raise CommandFailed(f"training diverged at step {result.step}; checkpoint kept with diverged flag")
    log.info("trained %s to step %d", model.kind, result.step)


def cmd_ic(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    seqs = _split(Path(args.data), args.split)
    if args.limit:
        seqs = seqs[: args.limit]
    models = _load_models(args.checkpoint, seqs[0].dim)
    solver = cfg.solver.build()
    series = {s.name: {} for s in seqs}
    for mid, model in models.items():
        levels = args.t if args.t and model.kind != GIVT else _levels(model, cfg.experiment.noise_levels)
        for t in levels:
            for s, c in zip(seqs, model_curves(model, seqs, t, solver, cfg.seed, mid)):
                if not np.all(np.isfinite(c.values)):
                    raise CommandFailed(f"non-finite IC for {mid} on {s.name}")
                label = _label(mid, t)
                c.save(out / s.name / label)
                series[s.name][label] = (c.times(), c.values)
    for s in seqs:
        svg_line_plot(series[s.name], out / s.name / "ic.svg", title=f"IC, {s.name}", xlabel="time (s)",
                      ylabel="bits/dim", vlines=s.boundaries)
    _write_config(cfg, out / "config.json")


def cmd_nll(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    data = Path(args.data)
    rep = ExperimentReport(("model", "dataset", "bits_per_dim", "n_frames"))
    solver = cfg.solver.build()
    for split in ("test_melodies", "test_segmented"):
        seqs = _split(data, split)
        models = _load_models(args.checkpoint, seqs[0].dim)
        per_model = {}
        for mid, model in models.items():
            t0 = None if model.kind == GIVT else model.process.t_start
            per_model[mid] = np.concatenate([c.values for c in model_curves(model, seqs, t0, solver, cfg.seed, mid)])
        mask = trim_extremes(list(per_model.values()), cfg.experiment.trim_fraction)
        for mid, values in per_model.items():
            rep.add(mid, split, mean_nll([values], mask), int((~mask).sum()))
    _check_finite(rep)
    rep.to_csv(out / "nll.csv")
    _write_config(cfg, out / "config.json")


def cmd_errors(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    seqs = _split(Path(args.data), args.split)
    models = _load_models(args.checkpoint, seqs[0].dim)
    e = cfg.experiment.errors
    rep = ExperimentReport(("model", "metric", "param", "value"))
    for mid, model in models.items():
        if model.kind == GIVT:
            continue
        part = error_experiment(model, seqs, e.n_r_list, e.tol_list, seed=cfg.seed, max_frames=e.max_frames,
                                model_id=mid)
        rep.rows.extend(part.rows)
    _check_finite(rep)
    rep.to_csv(out / "errors.csv")
    _write_config(cfg, out / "config.json")


def cmd_correlate(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    corpus = load_corpus(args.data)
    models = _load_models(args.checkpoint, corpus.test_melodies[0].dim)
    solver = cfg.solver.build()
    ex = cfg.experiment
    levels = _levels_by_id(models, ex.noise_levels)
    rep = correlation_experiment(models, corpus.test_melodies, levels, solver, cfg.seed, ex.n_permutations)
    _check_finite(rep)
    rep.to_csv(out / "correlate.csv")
    tim = timbre_invariance_experiment(models, corpus.test_groups, levels, solver, cfg.seed)
    _check_finite(tim)
    tim.to_csv(out / "timbre.csv")
    _write_config(cfg, out / "config.json")


def cmd_segment(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    seqs = _split(Path(args.data), "test_segmented")
    models = _load_models(args.checkpoint, seqs[0].dim)
    solver = cfg.solver.build()
    ex = cfg.experiment
    nov = ex.novelty.build()
    levels = _levels_by_id(models, ex.segment_levels)
    rep = segmentation_experiment(models, seqs, levels, solver, cfg.seed, nov, ex.window_seconds)
    _check_finite(rep)
    rep.to_csv(out / "segment.csv")
    first = seqs[0]
    series = {}
    for mid, model in models.items():
        for t in _levels(model, ex.segment_levels):
            (c,) = model_curves(model, [first], t, solver, cfg.seed, mid)
            n = novelty_curve(c, nov)
            series[_label(mid, t)] = (novelty_index_times(len(n), c.frame_rate), n)
    svg_line_plot(series, out / "novelty.svg", title=f"novelty, {first.name}", xlabel="time (s)",
                  ylabel="d IC", vlines=first.boundaries)
    _write_config(cfg, out / "config.json")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "ic": cmd_ic,
    "nll": cmd_nll,
    "errors": cmd_errors,
    "correlate": cmd_correlate,
    "segment": cmd_segment,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsurprise", description="Surprisal along the diffusion noise continuum.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, data=True, checkpoints=True):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="JSON run config (defaults if omitted)")
        c.add_argument("--out", required=True, help="output directory (checkpoint path for train)")
        c.add_argument("--seed", type=int, help="override the config seed")
        c.add_argument("-v", "--verbose", action="store_true")
        if data:
            c.add_argument("--data", required=True, help="corpus directory written by gen")
        if checkpoints:
            c.add_argument("--checkpoint", action="append", required=True, help="model checkpoint (repeatable)")
        return c

    add("gen", "generate the synthetic corpus", data=False, checkpoints=False)
    t = add("train", "train one model", checkpoints=False)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="stop after this many steps (schedule unchanged)")
    t.add_argument("--kind", choices=("edm", "rff", "givt"), help="override model.kind")
    i = add("ic", "write IC curves")
    i.add_argument("--split", default="test_melodies", choices=SPLITS)
    i.add_argument("--t", type=float, action="append", help="noise level (repeatable)")
    i.add_argument("--limit", type=int, help="only the first N sequences")
    add("nll", "held-out NLL in bits/dim")
    e = add("errors", "Hutchinson and solver error table")
    e.add_argument("--split", default="test_melodies", choices=SPLITS)
    add("correlate", "onset IC vs true symbol IC, and cross-timbre agreement")
    add("segment", "novelty-based boundary detection")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        if getattr(args, "kind", None):
            cfg = cfg.model_copy(update={"model": cfg.model.model_copy(update={"kind": args.kind})})
        COMMANDS[args.command](cfg, args)
    except (FlowSurpriseError, CommandFailed, OSError) as exc:
        print(f"flowsurprise {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
