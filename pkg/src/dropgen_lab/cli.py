"""Command-line experiment runner.

    dropgen-lab gen|train|eval|diagnose|sweep|plot [--config FILE] [--seed N]
                [--out DIR] [--jobs N] [--set key=value ...]

Without ``--config`` the bundled shortcut-bench configuration is used. The
output directory defaults to ``$DROPGEN_LAB_OUT/<name>-<command>-seed<seed>``
(``./runs`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from . import diagnostics as dg
from .artifacts import RunManifest, register_file, write_json, write_text_atomic
from .envs import save_dataset, verify_assumptions
from .errors import ContractViolation
from .experiments import make_data, make_extractor, median_mad, run
from .model import load_model, save_model
from .plotting import PLOT_KINDS, render
from .representation import load_extractor, save_extractor
from .training import INPUT_MODES, evaluate

log = logging.getLogger("dropgen_lab")

SWEEP_COLUMNS = ("point_id", "seed", "p", "input_mode", "in_domain_dice", "ood_dice",
                 "R_11", "R_10", "R_01", "status")
SWEEP_METRICS = ("in_domain_dice", "ood_dice", "R_11", "R_10", "R_01")
SWEEP_HEADER = SWEEP_COLUMNS + tuple(f"{m}_mad" for m in SWEEP_METRICS)


class CommandError(RuntimeError):
    pass


# ----------------------------------------------------------------- config plumbing

def load_experiment(args):
    path = Path(args.config) if args.config else cfgmod.bundled_config_path()
    doc = cfgmod.read_config(path)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    doc = cfgmod.apply_overrides(doc, overrides)
    return cfgmod.build(doc)


def output_dir(args, exp, command):
    if args.out:
        return Path(args.out)
    if exp.output:
        return Path(exp.output)
    root = Path(os.environ.get("DROPGEN_LAB_OUT") or "runs")
    return root / f"{exp.name}-{command}-seed{exp.train.seed}"


def start_manifest(out, command, exp):
    manifest = RunManifest(out, command, exp.hash, exp.spec.spec_hash(), exp.train.seed)
    try:
        spec = exp.spec if exp.spec.mode == "discrete" else exp.spec.discretized()
        report = verify_assumptions(spec)
        for name in report.failed():
            msg = f"assumption {name} fails on the environment spec: {report.results[name]}"
            log.warning(msg)
            manifest.warn(msg)
    except ContractViolation as exc:
        manifest.warn(f"assumption check skipped: {exc}")
    return manifest


def _write_config(out, exp):
    write_json(out / "config.json", exp.raw)


def _models(args, exp, data):
    model = load_model(args.model)
    ext_path = Path(args.extractor) if args.extractor else Path(args.model).with_name(
        "extractor.json")
    extractor = load_extractor(ext_path) if ext_path.exists() else make_extractor(
        exp.extractor, exp.spec, data.train)
    return model, extractor


def _diagnostics_outputs(out, exp, res):
    if res.risk is not None:
        write_json(out / "risk_report.json", res.risk.to_dict())
    write_json(out / "diagnostics.json", res.report().to_dict())
    if res.alignment:
        write_text_atomic(out / "alignment.csv", dg.alignment_csv(res.alignment))
    if res.sensitivity is not None:
        write_text_atomic(out / "sensitivity.csv",
                          dg.sensitivity_csv([(f"p={res.p}", res.sensitivity)]))
    if res.robustness:
        write_text_atomic(out / "robustness.csv", dg.robustness_csv(res.robustness))


# ----------------------------------------------------------------- commands

def cmd_gen(args):
    exp = load_experiment(args)
    out = output_dir(args, exp, "gen")
    manifest = start_manifest(out, "gen", exp)
    data = make_data(exp.spec, exp.data)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        ds = getattr(data, split)
        if ds is not None:
            tmp = out / f".{split}.npz.tmp"
            save_dataset(ds, tmp)
            os.replace(tmp, out / f"{split}.npz")
    write_json(out / "spec.json", exp.spec.to_dict())
    _write_config(out, exp)
    manifest.finish()
    return 0


def cmd_train(args):
    exp = load_experiment(args)
    out = output_dir(args, exp, "train")
    manifest = start_manifest(out, "train", exp)
    data = make_data(exp.spec, exp.data)
    extractor = make_extractor(exp.extractor, exp.spec, data.train)
    res = run(exp.spec, data, exp.train, extractor, exp.model, exp.diagnostics)
    write_text_atomic(out / "history.csv", res.history.to_csv())
    save_model(res.model, out / "model.json")
    save_extractor(extractor, out / "extractor.json")
    _diagnostics_outputs(out, exp, res)
    _write_config(out, exp)
    manifest.finish()
    log.info("in-domain Dice %.4f, OOD Dice %s", res.in_domain_dice, res.ood_dice)
    return 0


def cmd_eval(args):
    exp = load_experiment(args)
    out = output_dir(args, exp, "eval")
    manifest = start_manifest(out, "eval", exp)
    data = make_data(exp.spec, exp.data)
    model, extractor = _models(args, exp, data)
    doc = {}
    for split in ("val", "test"):
        ds = getattr(data, split)
        if ds is None:
            continue
        doc[split] = {}
        for mode in INPUT_MODES:
            r = evaluate(model, extractor, ds, mode)
            doc[split][mode] = {"loss": r.loss, "dice": r.dice, "per_class": list(r.per_class)}
    write_json(out / "eval.json", doc)
    _write_config(out, exp)
    manifest.finish()
    return 0


def cmd_diagnose(args):
    exp = load_experiment(args)
    out = output_dir(args, exp, "diagnose")
    manifest = start_manifest(out, "diagnose", exp)
    data = make_data(exp.spec, exp.data)
    model, extractor = _models(args, exp, data)
    d = exp.diagnostics
    dist = exp.train.mask_distribution(exp.spec.n_unstable, extractor.out_channels)
    pis = dist.pis
    if pis[(0, 0)] > 0:
        keep = 1.0 - pis[(0, 0)]
        pis = {mu: (w / keep if mu != (0, 0) else 0.0) for mu, w in pis.items()}
    report = dg.DiagnosticsReport()
    if d.risk:
        report.risk = dg.decomposed_risk(model, extractor, data.val, pis, exp.spec,
                                         dist.scale if dist.rescale else None)
        write_json(out / "risk_report.json", report.risk.to_dict())
    if d.usage:
        report.usage = dg.stable_usage(model, extractor, data.val, exp.spec)
    if d.sensitivity:
        report.sensitivity = dg.channel_removal_sensitivity(model, extractor, data.val)
        write_text_atomic(out / "sensitivity.csv",
                          dg.sensitivity_csv([("model", report.sensitivity)]))
    if d.alignment:
        report.alignment = [dg.gradient_alignment(model, extractor,
                                                  data.val.subset(range(min(64, len(data.val)))))]
        write_text_atomic(out / "alignment.csv", dg.alignment_csv(report.alignment))
    if d.robustness:
        seed = exp.train.seed
        report.robustness = [
            dg.weight_noise_robustness(model, extractor, data.val, d.alphas, d.trials, seed),
            dg.corruption_robustness(model, extractor, data.val, "gamma", d.levels, seed),
            dg.corruption_robustness(model, extractor, data.val, "bias", d.levels, seed),
        ]
        write_text_atomic(out / "robustness.csv", dg.robustness_csv(report.robustness))
    write_json(out / "diagnostics.json", report.to_dict())
    _write_config(out, exp)
    manifest.finish()
    return 0


def _schema_has(key):
    node = cfgmod.SCHEMA
    for part in key.split("."):
        props = node.get("properties", {})
        if part not in props:
            return False
        node = props[part]
    return True


def grid_points(grid):
    """Cartesian product of the grid in key order; an empty grid is one point."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_task(task):
    doc, pid, seed, run_dir = task
    row = {"point_id": pid, "seed": seed}
    try:
        exp = cfgmod.build(cfgmod.apply_override(doc, "train.seed", seed))
        row["p"] = exp.train.p
        row["input_mode"] = exp.train.train_input_mode
        data = make_data(exp.spec, exp.data)
        extractor = make_extractor(exp.extractor, exp.spec, data.train)
        res = run(exp.spec, data, exp.train, extractor, exp.model, exp.diagnostics)
        run_dir = Path(run_dir)
        write_text_atomic(run_dir / "history.csv", res.history.to_csv())
        _diagnostics_outputs(run_dir, exp, res)
        row.update(res.sweep_row())
        row["status"] = "ok"
        sens = res.sensitivity.to_dict() if res.sensitivity is not None else None
        return row, sens
    except Exception as exc:  # reported per point, the sweep carries on
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        return row, None


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_csv(rows, points):
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in SWEEP_COLUMNS] + [""] * len(SWEEP_METRICS))
    for pid in points:
        mine = [r for r in rows if r["point_id"] == pid]
        ok = [r for r in mine if r.get("status") == "ok"]
        first = mine[0]
        summary = {"point_id": pid, "seed": "summary", "p": first.get("p"),
                   "input_mode": first.get("input_mode"),
                   "status": "ok" if len(ok) == len(mine) else f"{len(mine) - len(ok)} failed"}
        mads = []
        for m in SWEEP_METRICS:
            med, mad = median_mad([r.get(m) for r in ok])
            summary[m] = med
            mads.append(mad)
        w.writerow([_cell(summary.get(c)) for c in SWEEP_COLUMNS] + [_cell(v) for v in mads])
    return buf.getvalue()


def cmd_sweep(args):
    exp = load_experiment(args)
    grid = dict(exp.grid)
    for item in args.grid or ():
        if "=" not in item:
            raise cfgmod.ConfigError(f"--grid expects key=[values], got {item!r}")
        key, raw = item.split("=", 1)
        values = cfgmod.parse_value(raw)
        grid[key.strip()] = values if isinstance(values, list) else [values]
    if args.empty_grid:
        grid = {}
    for key in grid:
        if not _schema_has(key):
            raise cfgmod.ConfigError(f"sweep grid key {key!r} is not a config field")
    seeds = [args.seed] if args.seed is not None else exp.seeds
    out = output_dir(args, exp, "sweep")
    manifest = start_manifest(out, "sweep", exp)
    points = grid_points(grid)
    tasks, pids, labels = [], [], {}
    for k, point in enumerate(points):
        pid = f"pt{k:02d}"
        pids.append(pid)
        doc = exp.raw
        for key, value in point.items():
            doc = cfgmod.apply_override(doc, key, value)
        cfgmod.validate(doc, f"grid point {pid}")
        labels[pid] = " ".join(f"{k.split('.')[-1]}={v}" for k, v in point.items()) or "baseline"
        for seed in seeds:
            tasks.append((doc, pid, seed, str(out / "runs" / f"{pid}-seed{seed}")))
    jobs = max(1, args.jobs or 1)
    if jobs == 1:
        results = [_sweep_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_task, tasks))
    rows = [r for r, _ in results]
    write_text_atomic(out / "sweep.csv", sweep_csv(rows, pids))
    sens_rows = []
    for pid in pids:
        got = [s for (r, s) in results if r["point_id"] == pid and s is not None]
        if got:
            rep = dg.SensitivityReport(*(median_mad([g[f] for g in got])[0]
                                         for f in ("baseline", "image_zeroed", "reps_zeroed")))
            sens_rows.append((f"{pid} {labels[pid]}", rep))
    if sens_rows:
        write_text_atomic(out / "sensitivity.csv", dg.sensitivity_csv(sens_rows))
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        manifest.warn(f"{r['point_id']} seed {r['seed']}: {r['status']}")
    _write_config(out, exp)
    manifest.finish("ok" if not failed else "partial-failure")
    if failed:
        log.error("%d of %d sweep runs failed", len(failed), len(rows))
        return 1
    return 0


def cmd_plot(args):
    csv_path = Path(args.csv)
    if not csv_path.exists():
        raise CommandError(f"no such CSV: {csv_path}")
    svg = render(csv_path.read_text(encoding="utf-8"), args.kind, args.metric)
    if args.out:
        target = Path(args.out)
        if target.suffix.lower() != ".svg":
            target = target / f"{csv_path.stem}-{args.kind}.svg"
    else:
        target = csv_path.with_name(f"{csv_path.stem}-{args.kind}.svg")
    write_text_atomic(target, svg)
    for parent in target.parents:
        if (parent / "manifest.json").exists():
            register_file(parent, target)
            break
    print(target)
    return 0


# ----------------------------------------------------------------- parser

def _common(p, model=False):
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p.add_argument("--config", help="experiment JSON (default: bundled shortcut-bench)")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", help="output directory (default under $DROPGEN_LAB_OUT)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. --set train.p=0.25 (repeatable)")
    if model:
        p.add_argument("--model", required=True, help="model checkpoint (model.json)")
        p.add_argument("--extractor", help="extractor checkpoint (default: next to the model)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dropgen-lab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen", help="export train/val/test datasets"))
    _common(sub.add_parser("train", help="train one model and run enabled diagnostics"))
    _common(sub.add_parser("eval", help="evaluate a checkpoint in every input mode"), model=True)
    _common(sub.add_parser("diagnose", help="run diagnostics on a checkpoint"), model=True)
    sw = sub.add_parser("sweep", help="grid x seeds, aggregated into sweep.csv")
    _common(sw)
    sw.add_argument("--grid", action="append", metavar="KEY=[VALUES]",
                    help="grid axis, e.g. --grid 'train.p=[0,0.5]' (replaces the config axis)")
    sw.add_argument("--empty-grid", action="store_true", help="ignore the config grid")
    pl = sub.add_parser("plot", help="render an SVG from a CSV artifact")
    pl.add_argument("csv")
    pl.add_argument("--kind", required=True, choices=PLOT_KINDS)
    pl.add_argument("--out", help="SVG path or directory")
    pl.add_argument("--metric", default="in_domain_dice", help="sweep-curve y column")
    pl.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose,
            "sweep": cmd_sweep, "plot": cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except cfgmod.ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2
    except (ContractViolation, CommandError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
