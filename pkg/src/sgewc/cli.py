"""Command-line entry point: run, sample, fisher-map, drift, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .data import load_mnist
from .nets import generate, load_checkpoint, sample_noise
from .objectives import saliency_maps
from .trainer import RunConfig, config_from_mapping, read_config_file, run_sequence

log = logging.getLogger("sgewc")

# keys consumed by evaluation, not by training
EVAL_KEYS = ("n_gen", "classifier", "classifier_epochs", "cadence")
_EVAL_STREAM = 1000


class CliError(Exception):
    pass


def _classes(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise CliError(f"--classes must be a comma list of integers, got {text!r}") from None


def _load(args) -> tuple[RunConfig, dict]:
    if not args.config:
        raise CliError("--config is required")
    try:
        kv = read_config_file(args.config)
    except FileNotFoundError as e:
        raise CliError(str(e)) from None
    extra = {k: kv.pop(k) for k in EVAL_KEYS if k in kv}
    overrides = dict(
        regime=getattr(args, "regime", None),
        lam=getattr(args, "lam", None),
        seed=getattr(args, "seed", None),
        out_dir=getattr(args, "out", None),
    )
    try:
        config = config_from_mapping(kv, base_dir=Path(args.config).parent, **overrides)
    except ValueError as e:
        raise CliError(f"invalid config {args.config}: {e}") from None
    return config, extra


def _out_dir(args, config: RunConfig | None = None) -> Path:
    out = args.out or (config.out_dir if config else None)
    if not out:
        raise CliError("--out is required")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _eval_rng(config: RunConfig) -> np.random.Generator:
    return np.random.default_rng([config.noise_seed, _EVAL_STREAM])


def _classifier(config: RunConfig, extra: dict, out: Path) -> ev.MnistClassifier:
    path = Path(extra.get("classifier") or out / "classifier.npz")
    if path.exists():
        return ev.MnistClassifier.load(path)
    log.info("training auxiliary classifier -> %s", path)
    clf = ev.train_classifier(load_mnist(config.mnist_dir, "train"), seed=config.init_seed,
                              epochs=int(extra.get("classifier_epochs", 40)))
    acc = clf.accuracy(load_mnist(config.mnist_dir, "test"))
    if acc < 0.95:
        log.warning("auxiliary classifier held-out accuracy %.4f is below 0.95", acc)
    path.parent.mkdir(parents=True, exist_ok=True)
    clf.save(path)
    return clf


def retention_report(gan, config: RunConfig, extra: dict, out: Path, classes, trained) -> ev.RetentionReport:
    rng = _eval_rng(config)
    report = ev.RetentionReport(config.regime, config.lam, config.init_seed)
    if config.source == "synthetic":
        entries = ev.retention_metrics_synthetic(gan, config.synthetic, classes, int(extra.get("n_gen", 4096)), rng)
        for e in entries:
            e.trained = e.class_id in trained
        report.entries = entries
    else:
        clf = _classifier(config, extra, out)
        report.entries, report.confusion = ev.retention_metrics_mnist(
            gan, clf, classes, int(extra.get("n_gen", 1000)), rng, trained_classes=trained
        )
    return report


def _write_image(out: Path, stem: str, img: np.ndarray) -> None:
    ev.write_pgm(out / f"{stem}.pgm", img)
    ev.write_png(out / f"{stem}.png", img)


def _seen_classes(task_classes) -> list[int]:
    return sorted({c for cs in task_classes for c in cs})


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    config, extra = _load(args)
    out = _out_dir(args, config)
    config = config.with_(out_dir=str(out))
    result = run_sequence(config, resume_from=args.checkpoint)
    seen = _seen_classes(result.task_classes)
    report = retention_report(result.gan, config, extra, out, seen, seen)
    (out / "retention.json").write_text(report.to_json())
    if config.data_dim == 784:
        _write_image(out, "grid", ev.sample_grid(result.gan, seen, args.rows, _eval_rng(config)))
    for e in report.entries:
        print(f"class {e.class_id} {e.metric} {e.value:.4f}")
    return 0


def cmd_sample(args) -> int:
    config, _ = _load(args)
    out = _out_dir(args)
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    ck = load_checkpoint(args.checkpoint, config.gan_spec())
    seen = _seen_classes(ck.task_classes)
    classes = _classes(args.classes) or seen
    bad = [c for c in classes if not 0 <= c < config.K]
    if bad:
        raise CliError(f"classes {bad} exceed conditional capacity K={config.K}")
    untrained = [c for c in classes if c not in seen]
    rng = _eval_rng(config)
    if config.data_dim == 784:
        _write_image(out, "samples", ev.sample_grid(ck.gan, classes, args.rows, rng))
    else:
        z = sample_noise(rng, args.rows, config.z_dim)
        rows = [
            (c, *config.synthetic.unsquash(generate(ck.gan, z, np.full(args.rows, c))[i]))
            for c in classes
            for i in range(args.rows)
        ]
        np.savetxt(out / "samples.csv", rows, delimiter=",", header="class,x,y", comments="", fmt=["%d", "%.8g", "%.8g"])
    (out / "samples.json").write_text(json.dumps(dict(classes=classes, trained=seen, untrained=untrained), indent=2))
    for c in untrained:
        print(f"warning: class {c} was never trained in {args.checkpoint}", file=sys.stderr)
    return 0


def cmd_fisher_map(args) -> int:
    config, extra = _load(args)
    out = _out_dir(args)
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    if config.data_dim != 784:
        raise CliError("fisher-map needs an image (mnist) config")
    ck = load_checkpoint(args.checkpoint, config.gan_spec())
    classes = _classes(args.classes) or _seen_classes(ck.task_classes)
    maps = saliency_maps(ck.gan, classes, config.fisher_samples, _eval_rng(config), workers=config.fisher_workers)
    _write_image(out, "fisher_map", ev.saliency_image(maps))
    for c, m in sorted(maps.items()):
        border, center = ev.border_center_means(m)
        print(f"class {c} border {border:.5f} center {center:.5f}")
    np.savez(out / "fisher_map.npz", **{str(c): m for c, m in maps.items()})
    return 0


def cmd_drift(args) -> int:
    config, extra = _load(args)
    out = _out_dir(args, config)
    config = config.with_(out_dir=str(out))
    classes = _classes(args.classes)
    if not classes or len(classes) != 1:
        raise CliError("drift needs exactly one class in --classes")
    task_index = len(config.tasks) - 1 if args.task is None else args.task
    if not 0 <= task_index < len(config.tasks):
        raise CliError(f"--task {task_index} outside 0..{len(config.tasks) - 1}")
    z = sample_noise(_eval_rng(config), 1, config.z_dim)
    cadence = int(extra.get("cadence", args.cadence))
    trace = ev.drift_trace(lambda hooks: run_sequence(config, hooks, resume_from=args.checkpoint),
                           z, classes[0], task_index, cadence)
    with open(out / "drift.csv", "w") as fh:
        fh.write("step,distance\n")
        for s, d in zip(trace.steps, trace.distances):
            fh.write(f"{s},{d!r}\n")
    if config.data_dim == 784:
        _write_image(out, "drift", np.hstack([ev.quantize(im).reshape(28, 28) for im in trace.images]))
    print(f"class {classes[0]} task {task_index} final drift {trace.final:.4f}")
    return 0


def _read_report(run_dir: Path) -> ev.RetentionReport:
    path = run_dir / "retention.json" if run_dir.is_dir() else run_dir
    if not path.exists():
        raise CliError(f"no retention.json in {run_dir}")
    return ev.RetentionReport.from_json(path.read_text())


def cmd_report(args) -> int:
    if not args.runs:
        raise CliError("report needs at least one run directory")
    if not args.out:
        raise CliError("--out is required (CSV path)")
    with ThreadPoolExecutor(max_workers=min(8, len(args.runs))) as pool:
        reports = list(pool.map(_read_report, [Path(r) for r in args.runs]))
    metric = args.metric
    if metric is None:
        metrics = {e.metric for r in reports for e in r.entries}
        metric = "accuracy" if "accuracy" in metrics else "mean_gap"
    if args.lam_values:
        keep = {float(v) for v in args.lam_values.split(",")}
        reports = [r for r in reports if float(r.lam) in keep]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    n = ev.write_report_csv(args.out, reports, metric)
    print(f"wrote {n} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgewc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--config")
        p.add_argument("--regime", choices=("naive", "ewc", "replay"))
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if checkpoint:
            p.add_argument("--checkpoint")
        p.add_argument("--classes")
        p.add_argument("--rows", type=int, default=8)

    p = sub.add_parser("run", help="train the configured task sequence")
    common(p)
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("sample", help="sample grid from a checkpoint")
    common(p)
    p.set_defaults(fn=cmd_sample)
    p = sub.add_parser("fisher-map", help="per-class Fisher saliency images")
    common(p)
    p.set_defaults(fn=cmd_fisher_map)
    p = sub.add_parser("drift", help="fixed-z drift trace during a run")
    common(p)
    p.add_argument("--task", type=int)
    p.add_argument("--cadence", type=int, default=50)
    p.set_defaults(fn=cmd_drift)
    p = sub.add_parser("report", help="aggregate retention.json files into a CSV")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--metric")
    p.add_argument("--lambda-values", dest="lam_values")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
