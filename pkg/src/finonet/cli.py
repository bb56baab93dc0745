"""``finonet`` command line: synth / train / evaluate / analyze / predict.

Exit status: 0 success, 1 validation or usage error, 2 runtime failure.
Logs go to standard error as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .config import RunConfig
from .data_model import DatasetIndex, load_episode, make_splits, scan_dataset, write_index
from .errors import ConfigError, FinoError, ValidationError
from .network import normalize_task
from .pipeline import FeatureCache
from .synth import RECIPES, cut_segments, generate_benchmark, generate_compound
from .training import train

log = logging.getLogger("finonet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; ours reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def _setup_logging(verbose: bool):
    """Route all logging to stderr as JSON; returns a callable restoring the previous setup."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    saved = (root.handlers[:], root.level)
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)

    def restore():
        root.handlers[:], level = saved
        root.setLevel(level)

    return restore


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for preprocessing/generation")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="finonet", description="Multimodal manipulation failure detection and classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic benchmark")
    s.add_argument("--recipe", default="default", choices=sorted(RECIPES))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="train one modality variant")
    _common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--modalities", default="rgb,d,a")
    t.add_argument("--task", default="detection", choices=["detection", "standalone", "cascaded"])
    t.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="test-split metrics of a checkpoint")
    _common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", choices=["detection", "standalone", "cascaded"])
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out", help="metrics.json location (default: next to the checkpoint)")

    a = sub.add_parser("analyze", help="confusion / completion-rate / resampling analyses")
    _common(a)
    a.add_argument("analysis", choices=["completion", "variance", "confusion", "ablation"])
    a.add_argument("--ckpt", required=True, action="append",
                   help="checkpoint; repeat as VARIANT=path for the ablation table")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", default="standalone", choices=["standalone", "cascaded", "random", "even"],
                   help="confusion: standalone|cascaded; variance: random|even")
    a.add_argument("--task", choices=["detection", "standalone", "cascaded"], default="detection",
                   help="task of the ablation checkpoints")

    r = sub.add_parser("predict", help="on-demand verdicts for manipulation segments")
    _common(r)
    r.add_argument("--detector", required=True)
    r.add_argument("--classifier")
    r.add_argument("--mode", default="cascaded", choices=["cascaded", "standalone"])
    r.add_argument("--stream", help="stream episode directory to cut with --segments")
    r.add_argument("--segments", help="JSON list of {start_s, end_s[, phases]} records")
    r.add_argument("--compound-seed", type=int, help="use a generated three-manipulation scenario")
    r.add_argument("episodes", nargs="*", help="episode directories, one per manipulation")
    r.add_argument("--out", required=True)
    return p


def _write_config_echo(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())


def _index_for(data: str, payload_or_cfg) -> DatasetIndex:
    """The split a checkpoint was trained with, rebuilt from its recorded seed."""
    refs = scan_dataset(data)
    if isinstance(payload_or_cfg, RunConfig):
        return make_splits(refs, payload_or_cfg["seed"], payload_or_cfg["data.stratify"])
    return make_splits(refs, payload_or_cfg["split_seed"], payload_or_cfg.get("stratified", True))


def cmd_synth(args) -> None:
    root = generate_benchmark(args.recipe, args.seed, args.out, jobs=args.jobs)
    log.info("benchmark written to %s", root)


def cmd_train(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    index = make_splits(scan_dataset(args.data), cfg["seed"], cfg["data.stratify"])
    mcfg = cfg.model_config(args.modalities, args.task)
    _write_config_echo(out, cfg)
    write_index(index, out / "index.json")
    pipeline = cfg.pipeline()
    report, _ = train(mcfg, index, cfg.train_config(), pipeline, out_dir=out,
                      cache=FeatureCache(pipeline, args.jobs), run_config=cfg.to_dict())
    log.info("best epoch %d, validation macro-F1 %.4f, checkpoint %s",
             report.best_epoch, report.best_val_f1, report.checkpoint)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    lm = ev.load_model(args.ckpt, normalize_task(args.task) if args.task else None)
    index = _index_for(args.data, lm.payload)
    rep, preds = ev.evaluate(lm, index, args.split, cache=FeatureCache(lm.pipeline, args.jobs))
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "metrics.json"
    if out.suffix != ".json":
        out = out / "metrics.json"
    ev.write_json(out, ev.metrics_document(rep, lm, args.split, preds))
    log.info("%s macro-F1 %.4f on %d %s episodes -> %s", lm.model.cfg.variant, rep.macro_f1,
             int(rep.support.sum()), args.split, out)


def cmd_analyze(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    _write_config_echo(out, cfg)
    if args.analysis == "ablation":
        ckpts = {}
        for item in args.ckpt:
            if "=" not in item:
                raise ConfigError(f"ablation checkpoints must be VARIANT=path, got {item!r}")
            name, path = item.split("=", 1)
            ckpts[name] = path
        first = ev.load_model(next(iter(ckpts.values())))
        index = _index_for(args.data, first.payload)
        rows = ev.evaluate_ablations(index, ckpts, args.task, FeatureCache(first.pipeline, args.jobs))
        task = normalize_task(args.task)
        ev.write_ablation_table({task: rows}, out / "ablation.csv")
        log.info("ablation table -> %s", out / "ablation.csv")
        return
    if len(args.ckpt) != 1:
        raise ConfigError(f"{args.analysis} takes exactly one --ckpt")
    lm = ev.load_model(args.ckpt[0])
    index = _index_for(args.data, lm.payload)
    if args.analysis == "confusion":
        if args.mode not in ("standalone", "cascaded"):
            raise ConfigError("confusion mode must be standalone or cascaded")
        rep = ev.confusion_analysis(lm, index, args.mode, out, FeatureCache(lm.pipeline, args.jobs))
        ev.write_json(out / "metrics.json", ev.metrics_document(rep, lm, "test"))
    elif args.analysis == "completion":
        curve = ev.completion_rate_analysis(lm, index, cfg["analysis.fractions"], out)
        ev.write_json(out / "metrics.json", {"task": lm.task, "variant": lm.model.cfg.variant,
                                             "curve": curve.rows(), "run_config": cfg.to_dict()})
    else:
        mode = args.mode if args.mode in ("random", "even") else "random"
        res = ev.resampling_variance(lm, index, cfg["analysis.n_resamples"], cfg["seed"], mode, out)
        log.info("F1 %.4f +- %.4f over %d resamples", res["f1"]["mean"], res["f1"]["std"], res["n_resamples"])
    log.info("%s analysis -> %s", args.analysis, out)


def cmd_predict(args, cfg: RunConfig) -> None:
    if args.compound_seed is not None:
        stream, segments = generate_compound(args.compound_seed)
        episodes = cut_segments(stream, segments)
    elif args.stream:
        if not args.segments:
            raise ConfigError("--stream needs --segments")
        segments = json.loads(Path(args.segments).read_text())
        episodes = cut_segments(load_episode(args.stream), segments)
    elif args.episodes:
        episodes = [load_episode(p) for p in args.episodes]
    else:
        raise ConfigError("nothing to predict: give episode directories, --stream or --compound-seed")
    results = ev.predict_on_demand(episodes, args.detector, args.classifier, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = [r.to_dict() for r in results]
    for d, ep in zip(docs, episodes):
        d["true_label"] = ep.label.value
    (out / "predictions.json").write_text(json.dumps(docs, indent=1, sort_keys=True))
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "true_label", "detection", "classification", "classifier_invoked", "latency_ms"])
        for d in docs:
            w.writerow([d["segment"], d["true_label"], d["detection"], d["classification"],
                        d["classifier_invoked"], f"{d['latency_ms']:.1f}"])
    for d in docs:
        log.info("%s: %s / %s (%.1f ms)", d["segment"], d["detection"], d["classification"], d["latency_ms"])


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    restore_logging = _setup_logging(args.verbose)
    try:
        if args.command == "synth":
            cmd_synth(args)
        else:
            cfg = RunConfig.resolve(args.config, args.set)
            {"train": cmd_train, "evaluate": cmd_evaluate, "analyze": cmd_analyze,
             "predict": cmd_predict}[args.command](args, cfg)
    except ValidationError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except (FinoError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    finally:
        restore_logging()
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
