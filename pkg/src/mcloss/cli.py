"""Command line entry point: ``mcloss <subcommand> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import loss as mc
from .data import SyntheticPartsSpec, load_dataset, save_dataset, synth_generate
from .errors import NumericalError, ValidationError

log = logging.getLogger("mcloss")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; here that code means a numerical failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path: str):
    from .train import TrainConfig, seed_from_env
    return seed_from_env(TrainConfig.from_json_file(path))


def _datasets(cfg, data_dir: str | None):
    if data_dir:
        spec, train_ds, test_ds = load_dataset(data_dir)
        if spec.n_classes != cfg.data.n_classes:
            raise ValidationError(f"dataset has {spec.n_classes} classes, config expects {cfg.data.n_classes}")
        return train_ds, test_ds
    train_ds, test_ds, _ = synth_generate(cfg.data)
    return train_ds, test_ds


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    spec = SyntheticPartsSpec()
    if args.spec:
        try:
            spec = SyntheticPartsSpec(**json.loads(Path(args.spec).read_text()))
        except OSError as exc:
            raise ValidationError(f"cannot read spec {args.spec}: {exc.strerror}") from exc
        except TypeError as exc:
            raise ValidationError(f"invalid spec {args.spec}: {exc}") from exc
    for key in ("n_classes", "n_train", "n_test", "noise", "seed"):
        value = getattr(args, key)
        if value is not None:
            setattr(spec, key, value)
    train_ds, test_ds, _ = synth_generate(spec)
    save_dataset(args.out, spec, train_ds, test_ds)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test images to {args.out}")
    return EXIT_OK


def cmd_assign(args) -> int:
    a = mc.solve_channel_assignment(args.channels, args.classes)
    print(a.summary())
    if args.ranges:
        for i, (lo, hi) in enumerate(a.ranges()):
            print(f"class {i}: channels [{lo}, {hi})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train, write_run
    cfg = _load_config(args.config)
    train_ds, test_ds = _datasets(cfg, args.data)
    result = train(cfg, train_ds, test_ds)
    run_dir = write_run(result, args.out)
    final = result.metrics.final()
    print(f"run {run_dir.name}: final test acc {final['acc']:.4f}, best {max(result.metrics.curve('test')):.4f}")
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import TinyCnn
    from .train import evaluate
    run_dir = Path(args.run)
    ckpt = run_dir / "checkpoint" if (run_dir / "checkpoint").is_dir() else run_dir
    if not (ckpt / "manifest.json").is_file():
        raise ValidationError(f"no checkpoint manifest under {run_dir}")
    model = TinyCnn.load(ckpt)
    if args.data:
        _, _, test_ds = load_dataset(args.data)
    else:
        cfg = _load_config(str(run_dir / "config.json"))
        _, test_ds = _datasets(cfg, None)
    acc, ce = evaluate(model, test_ds)
    print(f"test acc {acc:.4f}  cross-entropy {ce:.4f}  ({len(test_ds)} samples)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite
    results, seconds = run_suite(args.seed)
    for r in results:
        print(f"{r.name:22s} max rel error {r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL'}")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g}, {seconds:.1f}s)")
    if worst >= TOLERANCE:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {TOLERANCE:g}")
    return EXIT_OK


def cmd_heatmaps(args) -> int:
    from .heatmap import export_group_heatmaps, group_overlap
    from .model import TinyCnn
    run_dir = Path(args.run)
    model = TinyCnn.load(run_dir / "checkpoint")
    cfg = _load_config(str(run_dir / "config.json"))
    if cfg.method == "soft" and (run_dir / "soft_groups.json").is_file():
        groups = json.loads((run_dir / "soft_groups.json").read_text())
        assignment = mc.ChannelAssignment(tuple(np.asarray(g) for g in groups), cfg.channels)
    else:
        assignment = cfg.assignment()
    if args.data:
        _, _, test_ds = load_dataset(args.data)
    else:
        _, test_ds = _datasets(cfg, None)
    n = min(args.samples, len(test_ds))
    out = Path(args.out) if args.out else run_dir / "heatmaps"
    paths = export_group_heatmaps(model, test_ds.images[:n], test_ds.labels[:n], assignment, out)
    print(f"wrote {len(paths)} PGM files to {out}")
    print(f"mean within-group overlap {group_overlap(model, test_ds.images, test_ds.labels, assignment):.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ARMS, run_ablation
    cfg = _load_config(args.config) if args.config else None
    if cfg is None:
        from .train import TrainConfig
        cfg = TrainConfig()
    arms = args.arms.split(",") if args.arms else None
    unknown = [a for a in arms or [] if a not in ARMS]
    if unknown:
        raise ValidationError(f"unknown arms {unknown}; choose from {sorted(ARMS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    train_ds, test_ds = _datasets(cfg, args.data)
    kwargs = {"arms": tuple(arms)} if arms else {}
    result = run_ablation(cfg, train_ds, test_ds, seeds=seeds, out_root=args.out, **kwargs)
    for arm in result.runs:
        print(f"{arm:8s} mean final test acc {result.mean_accuracy(arm):.4f}  "
              f"seeds {[round(a, 4) for a in result.accuracies(arm)]}")
    print(f"summary written to {Path(args.out) / 'ablation.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_ablation_bars, plot_accuracy_curves
    from .train import RunMetrics
    root = Path(args.runs)
    runs = sorted(p for p in root.iterdir() if (p / "metrics.csv").is_file()) if root.is_dir() else []
    if not runs:
        raise ValidationError(f"no run directories with metrics.csv under {root}")
    out = Path(args.out) if args.out else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    labels = {}
    if (root / "ablation.csv").is_file():
        with open(root / "ablation.csv", newline="") as fh:
            labels = {r["run"]: r["arm"] for r in csv.DictReader(fh)}
    curves: dict[str, list[list[float]]] = {}
    finals: dict[str, list[float]] = {}
    rows = []
    for run in runs:
        cfg = json.loads((run / "config.json").read_text())
        metrics = RunMetrics.from_csv((run / "metrics.csv").read_text(), cfg.get("seed", 0))
        label = labels.get(run.name) or _describe(cfg)
        curves.setdefault(label, []).append(metrics.curve("test"))
        final = metrics.final()
        finals.setdefault(label, []).append(final["acc"])
        tr = metrics.final("train")
        rows.append([run.name, label, cfg.get("seed", 0), final["acc"], max(metrics.curve("test")),
                     tr["l_ce"], tr["l_dis"], tr["l_div"], tr["l_total"]])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "label", "seed", "final_test_acc", "best_test_acc",
                    "train_l_ce", "train_l_dis", "train_l_div", "train_l_total"])
        w.writerows(rows)
    same_length = len({len(c) for cs in curves.values() for c in cs}) == 1
    if same_length:
        plot_accuracy_curves(curves, out / "accuracy_curves.png")
    plot_ablation_bars(finals, out / "final_accuracy.png")
    print(f"{'label':24s} {'n':>2s} {'mean acc':>9s}")
    for label, accs in finals.items():
        print(f"{label:24s} {len(accs):2d} {np.mean(accs):9.4f}")
    print(f"report written to {out}")
    return EXIT_OK


def _describe(cfg: dict) -> str:
    loss = cfg.get("loss", {})
    if cfg.get("method") == "ce":
        return "ce"
    parts = [cfg.get("method", "mc"), f"xi={loss.get('xi')}"]
    if loss.get("diversity", "full") != "full":
        parts.append(f"div={loss['diversity']}")
    if not loss.get("cwa", True):
        parts.append("no-cwa")
    if loss.get("pooling", "ccmp") != "ccmp":
        parts.append(loss["pooling"])
    return " ".join(parts)


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcloss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic parts dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="JSON file with SyntheticPartsSpec fields")
    s.add_argument("--n-classes", dest="n_classes", type=int)
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("assign", help="print the channel-per-class assignment for N channels and c classes")
    s.add_argument("--channels", type=int, required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--ranges", action="store_true", help="also list each class's channel range")
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("train", help="train one config; writes a run directory named by config hash")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (default: generate from the config's data spec)")
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a run's checkpoint on the test split")
    s.add_argument("--run", required=True)
    s.add_argument("--data")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("heatmaps", help="export per-group channel heatmaps as PGM")
    s.add_argument("--run", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--samples", type=int, default=8)
    s.set_defaults(func=cmd_heatmaps)

    s = sub.add_parser("ablate", help="paired-seed ablation over the standard arms")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--arms", help="comma-separated arm names (default: ce,mc,mc_xi1,no_div,no_cwa)")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="summary CSV and PNG figures for a directory of runs")
    s.add_argument("--runs", default="runs")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
