"""Test-set evaluation and the analyses built on it.

Covers the ablation table, stand-alone vs cascaded confusion matrices,
completion-rate curves, frame-resampling variance and on-demand prediction
for streams of manipulations.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data_model import DatasetIndex, Episode, EpisodeRef, Label
from .errors import ConfigMismatch, FinoError, InsufficientFrames
from .metrics import MetricsReport, compute_metrics
from .network import VARIANTS, FinoNet, class_names, load_checkpoint, normalize_task
from .pipeline import FeatureCache, Inputs, PipelineConfig, episode_inputs
from .training import build_task_dataset, predict_logits, task_target

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class LoadedModel:
    model: FinoNet
    pipeline: PipelineConfig
    payload: dict

    @property
    def task(self) -> str:
        return self.model.cfg.task

    @property
    def classes(self) -> tuple[str, ...]:
        return class_names(self.task)


def load_model(ckpt, expect_task: str | None = None, expect_modalities=None) -> LoadedModel:
    if isinstance(ckpt, LoadedModel):
        if expect_task is not None and normalize_task(expect_task) != ckpt.task:
            raise ConfigMismatch(f"model task is {ckpt.task}, expected {normalize_task(expect_task)}")
        return ckpt
    model, payload = load_checkpoint(ckpt, expect_task, expect_modalities)
    return LoadedModel(model, PipelineConfig.from_dict(payload["pipeline"]), payload)


def _report(lm: LoadedModel, refs: list[EpisodeRef], logits: np.ndarray) -> MetricsReport:
    names = lm.classes
    truth = [task_target(r, lm.task) for r in refs]
    pred = [names[k] for k in logits.argmax(axis=1)]
    return compute_metrics(truth, pred, names)


def evaluate(ckpt, index: DatasetIndex, split: str = "test", task: str | None = None,
             cache: FeatureCache | None = None) -> tuple[MetricsReport, list[dict]]:
    """Metrics of a checkpoint on one split plus per-episode predictions."""
    lm = load_model(ckpt, task)
    refs = [r for r, _ in build_task_dataset(index, lm.task, split)]
    if cache is None or cache.cfg != lm.pipeline:
        cache = FeatureCache(lm.pipeline)
    cache.prefetch(refs)
    logits = predict_logits(lm.model, [cache.get(r) for r in refs])
    probs = torch.softmax(torch.from_numpy(logits), dim=1).numpy()
    rep = _report(lm, refs, logits)
    preds = [{"id": r.id, "true": task_target(r, lm.task), "pred": lm.classes[int(p.argmax())],
              "probs": [round(float(x), 6) for x in p]} for r, p in zip(refs, probs)]
    return rep, preds


def metrics_document(rep: MetricsReport, lm: LoadedModel, split: str, predictions=None) -> dict:
    """JSON-ready metrics with the model/run configuration echoed in."""
    doc = {
        "split": split,
        "task": lm.task,
        "variant": lm.model.cfg.variant,
        "model_config": lm.payload.get("model_config"),
        "pipeline": lm.payload.get("pipeline"),
        "train_config": lm.payload.get("train_config"),
        "run_config": lm.payload.get("run_config"),
        "split_seed": lm.payload.get("split_seed"),
        "metrics": rep.to_dict(),
    }
    if predictions is not None:
        doc["predictions"] = predictions
    return doc


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# ablations


def evaluate_ablations(index: DatasetIndex, checkpoints: dict, task: str,
                       cache: FeatureCache | None = None) -> list[dict]:
    """One row (variant, Pr, Re, F1) per checkpoint, in the canonical variant order."""
    task = normalize_task(task)
    rows = []
    for variant in VARIANTS:
        if variant not in checkpoints:
            continue
        lm = load_model(checkpoints[variant], task)
        if lm.model.cfg.modalities != VARIANTS[variant]:
            raise ConfigMismatch(f"checkpoint for {variant} was trained on {lm.model.cfg.variant}")
        rep, _ = evaluate(lm, index, "test", cache=cache)
        rows.append({"variant": variant, "task": task, "precision": rep.macro_precision,
                     "recall": rep.macro_recall, "f1": rep.macro_f1})
    unknown = set(checkpoints) - set(VARIANTS)
    if unknown:
        raise ConfigMismatch(f"unknown variants {sorted(unknown)}")
    return rows


def write_ablation_table(rows_by_task: dict[str, list[dict]], path) -> Path:
    """CSV shaped like the ablation table: one row per variant, Pr/Re/F1 per task."""
    tasks = list(rows_by_task)
    variants = [v for v in VARIANTS if any(r["variant"] == v for rows in rows_by_task.values() for r in rows)]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"{t}_{m}" for t in tasks for m in ("precision", "recall", "f1")])
        for v in variants:
            line = [v]
            for t in tasks:
                row = next((r for r in rows_by_task[t] if r["variant"] == v), None)
                line += [f"{row[m]:.4f}" if row else "" for m in ("precision", "recall", "f1")]
            w.writerow(line)
    return path


# ---------------------------------------------------------------------------
# confusion matrices


def confusion_analysis(ckpt, index: DatasetIndex, mode: str = "standalone", out_dir=None,
                       cache: FeatureCache | None = None) -> MetricsReport:
    """6x6 (stand-alone, success included) or 5x5 (cascaded, failures only) matrix."""
    task = {"standalone": "standalone_classification", "cascaded": "cascaded_classification"}.get(mode)
    if task is None:
        raise ValueError(f"mode must be 'standalone' or 'cascaded', got {mode!r}")
    rep, _ = evaluate(ckpt, index, "test", task=task, cache=cache)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_confusion_csv(rep, out / "confusion.csv")
        plot_confusion(rep, out / "confusion.png", title=f"{mode} classification")
    return rep


def write_confusion_csv(rep: MetricsReport, path) -> Path:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(rep.classes))
        for c, row in zip(rep.classes, rep.confusion):
            w.writerow([c] + [int(x) for x in row])
    return Path(path)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(rep: MetricsReport, path, title: str = "") -> Path:
    plt = _pyplot()
    cm = rep.confusion
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(rep.classes)), rep.classes, rotation=45, ha="right")
    ax.set_yticks(range(len(rep.classes)), rep.classes)
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", color="white" if norm[i, j] > 0.5 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# completion rate and resampling


@dataclass
class AnalysisCurve:
    x: list[float]
    reports: list[MetricsReport | None]
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)

    @property
    def f1(self) -> list[float | None]:
        return [r.macro_f1 if r is not None else None for r in self.reports]

    def rows(self) -> list[dict]:
        out = []
        for k, (x, r) in enumerate(zip(self.x, self.reports)):
            row = {"x": x}
            if r is not None:
                row.update(precision=r.macro_precision, recall=r.macro_recall, f1=r.macro_f1)
            else:
                row.update(precision=None, recall=None, f1=None)
            out.append(row)
        return out


def _test_episodes(lm: LoadedModel, index: DatasetIndex) -> list[tuple[EpisodeRef, Episode]]:
    refs = [r for r, _ in build_task_dataset(index, lm.task, "test")]
    return [(r, r.load()) for r in refs]


def completion_rate_analysis(ckpt, index: DatasetIndex, fractions=DEFAULT_FRACTIONS, out_dir=None,
                             episodes=None) -> AnalysisCurve:
    """Test F1 when only the first ``rho`` of each execution is observed.

    A fraction at which some episode can no longer be sampled is reported as a
    missing point.
    """
    lm = load_model(ckpt)
    fractions = sorted(float(f) for f in fractions)
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("completion fractions must lie in (0, 1]")
    episodes = episodes if episodes is not None else _test_episodes(lm, index)
    refs = [r for r, _ in episodes]
    reports = []
    for rho in fractions:
        try:
            items = [episode_inputs(ep, lm.pipeline, completion_fraction=rho, mode="even") for _, ep in episodes]
        except FinoError as exc:
            log.warning("completion fraction %.2f skipped: %s", rho, exc)
            reports.append(None)
            continue
        reports.append(_report(lm, refs, predict_logits(lm.model, items)))
    curve = AnalysisCurve(fractions, reports)
    if out_dir is not None:
        write_curve(curve, Path(out_dir), "completion fraction")
    return curve


def summarize(values) -> dict:
    """Mean and population std; exact arithmetic so identical values give a std of exactly zero."""
    vals = [float(v) for v in values]
    return {"mean": statistics.fmean(vals), "std": statistics.pstdev(vals), "values": vals}


def resampling_variance(ckpt, index: DatasetIndex, n_resamples: int = 50, seed: int = 0,
                        mode: str = "random", out_dir=None, episodes=None) -> dict:
    """Mean and standard deviation of macro Pr/Re/F1 over independent frame samplings."""
    lm = load_model(ckpt)
    episodes = episodes if episodes is not None else _test_episodes(lm, index)
    refs = [r for r, _ in episodes]
    rng = np.random.default_rng(seed)
    audio_only = lm.model.visual is None
    base = [episode_inputs(ep, lm.pipeline, mode="even") for _, ep in episodes]
    reports = []
    for _ in range(n_resamples):
        if audio_only or mode == "even":
            items = base
        else:
            items = [episode_inputs(ep, lm.pipeline, mode="random", rng=rng) for _, ep in episodes]
        reports.append(_report(lm, refs, predict_logits(lm.model, items)))
    out = {"n_resamples": n_resamples, "mode": mode, "seed": seed}
    for key in ("precision", "recall", "f1"):
        out[key] = summarize([getattr(r, f"macro_{key}") for r in reports])
    if out_dir is not None:
        curve = AnalysisCurve(list(range(n_resamples)), reports)
        write_curve(curve, Path(out_dir), "resample")
        write_json(Path(out_dir) / "variance.json", out)
    return out


def write_curve(curve: AnalysisCurve, out: Path, xlabel: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "curves.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["x", "precision", "recall", "f1"])
        w.writeheader()
        for row in curve.rows():
            w.writerow(row)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pts = [(r["x"], r["f1"]) for r in curve.rows() if r["f1"] is not None]
    if pts:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("macro F1")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# on-demand prediction


@dataclass
class PredictionResult:
    segment: str
    detection: str
    detection_probs: list[float]
    classification: str
    class_probs: list[float] | None
    classifier_invoked: bool
    latency_ms: float  # preprocessing + every forward pass for this segment
    detection_latency_ms: float  # preprocessing + detector forward
    classification_latency_ms: float | None  # extra time spent on the classifier, if invoked

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _probs(lm: LoadedModel, inputs: Inputs) -> np.ndarray:
    return torch.softmax(torch.from_numpy(predict_logits(lm.model, [inputs])), dim=1).numpy()[0]


def predict_on_demand(segments: list[Episode], detector, classifier=None, mode: str = "cascaded") -> list[PredictionResult]:
    """Detection and classification verdicts per manipulation segment.

    In cascaded mode the classifier only runs when the detector says "fail";
    in stand-alone mode a 6-way classifier runs on every segment.  Latency
    covers preprocessing and forward passes, not disk reads.
    """
    if mode not in ("cascaded", "standalone"):
        raise ValueError(f"mode must be 'cascaded' or 'standalone', got {mode!r}")
    det = load_model(detector, "detection")
    cls = None
    if classifier is not None:
        cls = load_model(classifier, "cascaded_classification" if mode == "cascaded" else "standalone_classification")
    results = []
    for ep in segments:
        t0 = time.perf_counter()
        inputs = episode_inputs(ep, det.pipeline, mode="even")
        p_det = _probs(det, inputs)
        verdict = det.classes[int(p_det.argmax())]
        t1 = time.perf_counter()
        invoked = cls is not None and (mode != "cascaded" or verdict == "fail")
        p_cls, label, t_cls = None, verdict, None
        if invoked:
            cls_inputs = inputs if cls.pipeline == det.pipeline else episode_inputs(ep, cls.pipeline, mode="even")
            p_cls = _probs(cls, cls_inputs)
            label = cls.classes[int(p_cls.argmax())]
            t_cls = (time.perf_counter() - t1) * 1000.0
        total = (time.perf_counter() - t0) * 1000.0
        results.append(PredictionResult(ep.id, verdict, [float(x) for x in p_det], label,
                                        None if p_cls is None else [float(x) for x in p_cls], invoked,
                                        total, (t1 - t0) * 1000.0, t_cls))
    return results
