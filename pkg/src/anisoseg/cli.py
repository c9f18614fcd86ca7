"""Command-line interface.

Exit codes form a closed set:
  0  success
  1  verification failure (gradient check, parameter-count mismatch)
  2  invalid configuration or arguments
  3  I/O failure
  4  training diverged (non-finite loss)
  5  shape or slice-count mismatch between model and data
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import networks as N
from . import training as TR
from . import verify
from .config import ConfigError, parse_config, default_config_text
from .tensor import NonFiniteError, ShapeError, Tensor

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_SHAPE = 5


class _CliError(Exception):
    """Internal: carries an exit code and a message for main() to report."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(path):
    try:
        return parse_config(path)
    except (ConfigError, ValueError) as exc:
        raise _CliError(EXIT_CONFIG, f"invalid config: {exc}")


def _load_dataset(manifest):
    try:
        entries = D.read_manifest(manifest)
        return [D.read_volume(p) for p, _ in entries]
    except D.VolumeFormatError as exc:
        raise _CliError(EXIT_IO, f"bad volume file: {exc}")
    except OSError as exc:
        raise _CliError(EXIT_IO, f"cannot read dataset: {exc}")


def cmd_init_config(args) -> int:
    text = default_config_text(seed=args.seed)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output dir: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        volumes = [D.generate_phantom(cfg.phantom, seed=cfg.seed * 100003 + i)
                   for i in range(args.count)]
    except ValueError as exc:
        print(f"error: invalid phantom spec: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ids = [v.id for v in volumes]
    folds = D.split_folds(ids, min(cfg.folds, len(ids)), cfg.seed)
    fold_of = {ident: fi for fi, fold in enumerate(folds) for ident in fold}
    entries = []
    try:
        for v in volumes:
            fname = f"{v.id}.csvl"
            D.write_volume(v, out / fname)
            entries.append((fname, fold_of[v.id]))
        D.write_manifest(out / "manifest.tsv", entries)
    except OSError as exc:
        print(f"error: write failed: {exc}", file=sys.stderr)
        return EXIT_IO
    total = np.zeros(cfg.phantom.num_classes, dtype=np.int64)
    for v in volumes:
        for c in range(cfg.phantom.num_classes):
            total[c] += int((v.labels == c).sum())
    print(f"wrote {len(volumes)} volumes to {out}")
    for c, n in enumerate(total):
        print(f"class {c}: {n} voxels ({100.0 * n / total.sum():.2f}%)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    rows = verify.run_suite(cfg.backbone, seed=cfg.seed)
    worst = 0.0
    failed = []
    for name, err in rows:
        status = "ok" if err < verify.TOLERANCE else "FAIL"
        print(f"{name:<28s} {err:.3e}  {status}")
        worst = max(worst, err)
        if err >= verify.TOLERANCE:
            failed.append(name)
    print(f"worst relative error: {worst:.3e} over {len(rows)} components")
    if failed:
        print(f"error: gradient check failed for: {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_paramcount(args) -> int:
    cfg = _load_config(args.config)
    model = N.SegNet(cfg.backbone, rng=np.random.default_rng(cfg.seed))
    formula = N.expected_csam_total(cfg.backbone)
    enumerated = model.csam_parameter_count()
    backbone = model.backbone_parameter_count()
    overhead = 100.0 * enumerated / backbone if backbone else 0.0
    print(f"backbone parameters:   {backbone}")
    print(f"attention (formula):   {formula}")
    print(f"attention (enumerated): {enumerated}")
    print(f"attention overhead:    {overhead:.3f}%")
    if formula != enumerated:
        print("error: formula and enumeration disagree", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    volumes = _load_dataset(args.data)
    if not volumes:
        print("error: empty dataset", file=sys.stderr)
        return EXIT_IO
    streams = TR.seed_streams(cfg.seed)
    model = N.SegNet(cfg.backbone, rng=streams["init"])
    try:
        result = TR.fit(model, volumes, cfg.train, streams=streams)
    except (TR.TrainingDiverged, NonFiniteError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ShapeError as exc:
        print(f"error: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    try:
        N.save_checkpoint(model, args.out)
        with open(str(args.out) + ".loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(result.loss_curve):
                w.writerow([i, f"{v:.10g}"])
    except OSError as exc:
        print(f"error: cannot write checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"trained {cfg.train.epochs} epochs on {len(volumes)} volumes; "
          f"final loss {result.loss_curve[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = N.load_checkpoint(args.checkpoint)
    except (N.CheckpointError, OSError) as exc:
        print(f"error: cannot load checkpoint: {exc}", file=sys.stderr)
        return EXIT_IO
    volumes = _load_dataset(args.data)
    outdir = Path(args.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output dir: {exc}", file=sys.stderr)
        return EXIT_IO
    rng = np.random.default_rng([args.seed, 2])
    try:
        rows = []
        lesion_scores = []
        for v in volumes:
            logits, _ = model.forward(Tensor(v.data), mode="eval")
            pred = logits.data.argmax(axis=1)
            lesion_scores.append(int((pred > 0).sum()))
            for c in range(1, model.cfg.num_classes):
                rows.append([v.id, c, f"{M.dsc_3d(pred, v.labels, c):.10g}",
                             _fmt_opt(M.ravd(pred, v.labels, c))])
        unc = M.uncertainty_error_report(model, volumes,
                                         samples=args.mc_samples, rng=rng)
    except ShapeError as exc:
        print(f"error: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    name = args.name
    try:
        with open(outdir / f"{name}.metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["volume", "class", "dsc", "ravd"])
            w.writerows(rows)
        with open(outdir / f"{name}.uncertainty.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "q1", "q2", "q3"])
            for group, q in (("correct", unc.correct_quartiles),
                             ("incorrect", unc.incorrect_quartiles)):
                if q is not None:
                    w.writerow([group, f"{q[0]:.10g}", f"{q[1]:.10g}",
                                f"{q[2]:.10g}"])
            w.writerow(["pearson_r", _fmt_opt(unc.pearson_r), "", ""])
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_IO
    mean_dsc = np.mean([float(r[2]) for r in rows])
    print(f"evaluated {len(volumes)} volumes; mean foreground DSC "
          f"{mean_dsc:.4f}")
    return EXIT_OK


def _fmt_opt(x) -> str:
    return "" if x is None else f"{x:.10g}"


def cmd_report(args) -> int:
    evdir = Path(args.eval_dir)
    files = sorted(evdir.glob("*.metrics.csv"))
    if not files:
        print(f"error: no metrics files in {evdir}", file=sys.stderr)
        return EXIT_IO
    run_mean = {}
    all_rows = []
    for f in files:
        run = f.name[:-len(".metrics.csv")]
        with open(f, newline="") as fh:
            rd = csv.reader(fh)
            next(rd)
            dscs = []
            for row in rd:
                all_rows.append([run] + row)
                dscs.append(float(row[2]))
        run_mean[run] = float(np.mean(dscs))
    try:
        with open(evdir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "volume", "class", "dsc", "ravd"])
            w.writerows(all_rows)
    except OSError as exc:
        print(f"error: cannot write summary: {exc}", file=sys.stderr)
        return EXIT_IO
    for run, mean in sorted(run_mean.items()):
        print(f"{run}: mean foreground DSC {mean:.4f}")
    if args.group_a and args.group_b:
        ga = [m for r, m in run_mean.items() if r.startswith(args.group_a)]
        gb = [m for r, m in run_mean.items() if r.startswith(args.group_b)]
        if not ga or not gb:
            print("error: a named group matched no runs", file=sys.stderr)
            return EXIT_CONFIG
        u, p = M.mann_whitney_u(ga, gb)
        print(f"mann-whitney {args.group_a} ({len(ga)}) vs {args.group_b} "
              f"({len(gb)}): U={u:g} p={p:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="anisoseg",
        description="Cross-slice attention segmentation experiments on "
                    "synthetic anisotropic volumes.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default config document")
    p.add_argument("--out", default="-", help="output path, or - for stdout")
    p.add_argument("--seed", type=int, default=0, help="run seed to embed")
    p.set_defaults(fn=cmd_init_config)

    p = sub.add_parser("gen-data", help="generate phantom volumes + manifest")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10, help="number of volumes")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all operations")
    p.add_argument("--config", required=True, help="run config file")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("paramcount",
                       help="attention parameter accounting and overhead")
    p.add_argument("--config", required=True, help="run config file")
    p.set_defaults(fn=cmd_paramcount)

    p = sub.add_parser("train", help="train a model on a manifest dataset")
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--name", default="eval", help="report base name")
    p.add_argument("--seed", type=int, required=True, help="evaluation seed")
    p.add_argument("--mc-samples", type=int, default=20,
                   help="Monte-Carlo samples for uncertainty")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="aggregate eval outputs, compare groups")
    p.add_argument("--eval-dir", required=True, help="directory of eval outputs")
    p.add_argument("--group-a", default=None, help="run-name prefix of group A")
    p.add_argument("--group-b", default=None, help="run-name prefix of group B")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
