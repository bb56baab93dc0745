"""Training loop with best-validation checkpoint selection."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import DatasetIndex, EpisodeRef, Label, derive_detection_label
from .errors import ConfigError, EmptyDataset, TrainingDiverged
from .metrics import compute_metrics
from .network import FinoNet, ModelConfig, class_names, init_params, normalize_task, save_checkpoint
from .pipeline import FeatureCache, Inputs, PipelineConfig
from .vision import VisualTensor, augment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 250
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weighting: str = "none"  # or "inverse_frequency"
    patience: int = 0  # 0 keeps every epoch; selection is by best validation F1 regardless
    augment: bool = True
    track_train_accuracy: bool = False
    stop_at_train_accuracy: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ConfigError(f"unknown class weighting {self.class_weighting!r}")


@dataclass
class TrainReport:
    task: str
    variant: str
    classes: tuple[str, ...]
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -1.0
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


def task_target(ref: EpisodeRef, task: str) -> str:
    task = normalize_task(task)
    if task == "detection":
        return derive_detection_label(ref.label)
    return ref.label.value


def build_task_dataset(index: DatasetIndex, task: str, split: str = "train") -> list[tuple[EpisodeRef, int]]:
    """(episode, class index) pairs of ``split`` for the task.

    Cascaded classification keeps failure episodes only.
    """
    task = normalize_task(task)
    names = class_names(task)
    refs = index.split(split)
    if task == "cascaded_classification":
        refs = [r for r in refs if r.label is not Label.SUCCESS]
        if not refs:
            raise EmptyDataset(f"no failure episodes in the {split} split")
    return [(r, names.index(task_target(r, task))) for r in refs]


def _tensors(items: list[Inputs], model: FinoNet, dtype=torch.float32):
    v = a = None
    if model.visual is not None:
        v = torch.from_numpy(np.stack([i.visual for i in items])).to(dtype)
    if model.audio is not None:
        a = torch.from_numpy(np.stack([i.mfcc for i in items])).to(dtype)
    return v, a


@torch.no_grad()
def predict_logits(model: FinoNet, items: list[Inputs], batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for k in range(0, len(items), batch_size):
        v, a = _tensors(items[k: k + batch_size], model)
        out.append(model(v, a).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_classes))


def audio_statistics(items: list[Inputs]) -> tuple[np.ndarray, np.ndarray]:
    rows = np.concatenate([i.mfcc[: min(i.valid_windows, len(i.mfcc))] for i in items])
    return rows.mean(axis=0), rows.std(axis=0)


def visual_statistics(items: list[Inputs]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of the visual tensors, accumulated in float64."""
    total = np.zeros(4)
    total_sq = np.zeros(4)
    count = 0
    for i in items:
        v = i.visual.reshape(-1, i.visual.shape[-1]).astype(np.float64)
        total += v.sum(axis=0)
        total_sq += (v * v).sum(axis=0)
        count += len(v)
    mean = total / count
    return mean, np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))


def _macro_f1(model, items, targets, names) -> tuple[float, dict]:
    pred = predict_logits(model, items).argmax(axis=1)
    rep = compute_metrics([names[t] for t in targets], [names[p] for p in pred], names)
    return rep.macro_f1, {"val_precision": rep.macro_precision, "val_recall": rep.macro_recall,
                          "val_f1": rep.macro_f1}


def train(model_cfg: ModelConfig, index: DatasetIndex, train_cfg: TrainConfig = TrainConfig(),
          pipeline: PipelineConfig = PipelineConfig(), out_dir=None, cache: FeatureCache | None = None,
          run_config: dict | None = None) -> tuple[TrainReport, FinoNet]:
    """Train one variant; returns the report and the best-validation model (eval mode).

    With ``out_dir`` the best checkpoint is written to ``out_dir/best.ckpt`` and
    the per-epoch curves to ``out_dir/report.json``.
    """
    names = class_names(model_cfg.task)
    train_set = build_task_dataset(index, model_cfg.task, "train")
    val_set = build_task_dataset(index, model_cfg.task, "val")
    if not train_set or not val_set:
        raise EmptyDataset("training needs nonempty train and validation splits")
    test_ids = {r.id for r in index.split("test")}
    assert not test_ids & {r.id for r, _ in train_set + val_set}, "test episode leaked into training"

    cache = cache or FeatureCache(pipeline)
    cache.prefetch([r for r, _ in train_set + val_set])
    train_items = [cache.get(r) for r, _ in train_set]
    train_y = np.array([y for _, y in train_set])
    val_items = [cache.get(r) for r, _ in val_set]
    val_y = [y for _, y in val_set]

    torch.manual_seed(train_cfg.seed)
    model = init_params(model_cfg, train_cfg.seed)
    if model.visual is not None:
        model.set_visual_normalization(*visual_statistics(train_items))
    if model.audio is not None:
        model.set_audio_normalization(*audio_statistics(train_items))
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                           betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps)
    weight = None
    if train_cfg.class_weighting == "inverse_frequency":
        counts = np.bincount(train_y, minlength=len(names)).astype(np.float64)
        weight = torch.tensor(np.where(counts > 0, len(train_y) / (len(names) * np.maximum(counts, 1)), 0.0),
                              dtype=torch.float32)

    rng = np.random.default_rng(train_cfg.seed)
    report = TrainReport(model_cfg.task, model_cfg.variant, names)
    best_state, stale, step = None, 0, 0
    flip_axis = pipeline.vision.flip_axis
    for epoch in range(train_cfg.epochs):
        model.train()
        perm = rng.permutation(len(train_items))
        aug_seeds = rng.integers(0, 2**63 - 1, size=len(train_items))
        total, seen = 0.0, 0
        for k in range(0, len(perm), train_cfg.batch_size):
            batch = perm[k: k + train_cfg.batch_size]
            items = []
            for j in batch:
                it = train_items[j]
                if train_cfg.augment and model.visual is not None:
                    vt = augment(VisualTensor(it.visual, it.indices), int(aug_seeds[j]), flip_axis)
                    it = Inputs(vt.data, it.mfcc, it.valid_windows, it.indices)
                items.append(it)
            v, a = _tensors(items, model)
            logits = model(v, a)
            loss = F.cross_entropy(logits, torch.from_numpy(train_y[batch]), weight=weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            total += loss.item() * len(batch)
            seen += len(batch)

        val_f1, row = _macro_f1(model, val_items, val_y, names)
        row = {"epoch": epoch, "train_loss": total / seen, **row}
        if train_cfg.track_train_accuracy or train_cfg.stop_at_train_accuracy is not None:
            pred = predict_logits(model, train_items).argmax(axis=1)
            row["train_accuracy"] = float(np.mean(pred == train_y))
        report.epochs.append(row)
        log.debug("epoch %d %s", epoch, row)
        if val_f1 > report.best_val_f1:
            report.best_val_f1, report.best_epoch = val_f1, epoch
            best_state = copy.deepcopy(model.state_dict())
            best_step = step
            stale = 0
        else:
            stale += 1
        if train_cfg.patience and stale >= train_cfg.patience:
            break
        target_acc = train_cfg.stop_at_train_accuracy
        if target_acc is not None and row["train_accuracy"] >= target_acc:
            break

    model.load_state_dict(best_state)
    model.eval()
    log.info("%s/%s best epoch %d val macro-F1 %.4f", model_cfg.variant, model_cfg.task,
             report.best_epoch, report.best_val_f1)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(out / "best.ckpt", model, step=best_step, epoch=report.best_epoch,
                               val_score=report.best_val_f1, classes=list(names),
                               pipeline=pipeline.to_dict(), train_config=asdict(train_cfg),
                               split_seed=index.seed, stratified=index.stratified,
                               run_config=run_config or {})
        report.checkpoint = str(ckpt)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return report, model
