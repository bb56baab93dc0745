"""FINO-Net: convLSTM visual branch, temporal-conv audio branch, late-fusion head.

All ablation variants (RGB, D, A, RGB-D, RGB-D-A) are the same :class:`FinoNet`
with a different modality set.  The visual branch always receives the full
4-channel RGB-D tensor and picks the channels its variant uses.
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_model import ALL_LABELS, DETECTION_CLASSES, FAILURE_LABELS
from .errors import ConfigError, ConfigMismatch, IoError, MissingModality, SchemaViolation, ShapeError

TASKS = ("detection", "standalone_classification", "cascaded_classification")
TASK_ALIASES = {"detection": "detection", "standalone": "standalone_classification",
                "cascaded": "cascaded_classification"}
MODALITIES = ("rgb", "d", "a")
VARIANTS = {"RGB": ("rgb",), "D": ("d",), "A": ("a",), "RGB-D": ("rgb", "d"), "RGB-D-A": ("rgb", "d", "a")}
_CHANNELS = {"rgb": (0, 1, 2), "d": (3,)}

CHECKPOINT_FORMAT = "finonet.checkpoint"
CHECKPOINT_VERSION = 1


def normalize_task(task: str) -> str:
    try:
        return TASK_ALIASES.get(task) or TASKS[TASKS.index(task)]
    except ValueError:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASK_ALIASES)}") from None


def parse_modalities(spec) -> tuple[str, ...]:
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    mods = tuple(m for m in MODALITIES if m in {i.strip().lower() for i in items})
    unknown = {i.strip().lower() for i in items} - set(MODALITIES)
    if unknown or not mods:
        raise ConfigError(f"modalities must be a nonempty subset of {MODALITIES}, got {spec!r}")
    return mods


def class_names(task: str) -> tuple[str, ...]:
    task = normalize_task(task)
    if task == "detection":
        return DETECTION_CLASSES
    if task == "standalone_classification":
        return tuple(l.value for l in ALL_LABELS)
    return tuple(l.value for l in FAILURE_LABELS)


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = ("rgb", "d", "a")
    task: str = "detection"
    channel_plan: tuple[int, int, int] = (32, 64, 128)
    fusion_hidden: int = 256
    audio_hidden: int = 64
    audio_filters: int = 64
    audio_kernel: int = 32
    n_mfcc: int = 20
    dropout: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", parse_modalities(self.modalities))
        object.__setattr__(self, "task", normalize_task(self.task))
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))
        if len(self.channel_plan) != 3 or min(self.channel_plan) < 1:
            raise ConfigError(f"channel plan needs three positive widths, got {self.channel_plan}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return len(class_names(self.task))

    @property
    def visual_channels(self) -> tuple[int, ...]:
        return tuple(c for m in self.modalities if m != "a" for c in _CHANNELS[m])

    @property
    def uses_vision(self) -> bool:
        return bool(self.visual_channels)

    @property
    def uses_audio(self) -> bool:
        return "a" in self.modalities

    @property
    def variant(self) -> str:
        for name, mods in VARIANTS.items():
            if mods == self.modalities:
                return name
        return "-".join(m.upper() for m in self.modalities)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["channel_plan"] = list(self.channel_plan)
        return d


def _dropout(p: float, active: bool) -> nn.Module:
    return nn.Dropout(p) if active and p > 0 else nn.Identity()


class ConvLSTMCell(nn.Module):
    """LSTM cell whose input and recurrent transforms are 3x3 'same' convolutions.

    Gate order along the channel axis: input, forget, output, candidate.
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        self.input_conv = nn.Conv2d(in_channels, 4 * hidden_channels, kernel_size, padding=pad, bias=True)
        self.recurrent_conv = nn.Conv2d(hidden_channels, 4 * hidden_channels, kernel_size, padding=pad, bias=False)

    def init_state(self, x: torch.Tensor):
        b, _, h, w = x.shape
        z = x.new_zeros(b, self.hidden_channels, h, w)
        return z, z.clone()

    def forward(self, x: torch.Tensor, state=None):
        if state is None:
            state = self.init_state(x)
        h, c = state
        if x.dim() != 4 or x.shape[1] != self.input_conv.in_channels:
            raise ShapeError(f"convLSTM input must be (B, {self.input_conv.in_channels}, H, W), got {tuple(x.shape)}")
        if h.shape != c.shape or h.shape[0] != x.shape[0] or h.shape[2:] != x.shape[2:] \
                or h.shape[1] != self.hidden_channels:
            raise ShapeError(f"state {tuple(h.shape)} does not match input {tuple(x.shape)}")
        gates = self.input_conv(x) + self.recurrent_conv(h)
        i, f, o, g = torch.chunk(gates, 4, dim=1)
        c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_next = torch.sigmoid(o) * torch.tanh(c_next)
        return h_next, c_next


def convlstm_step(cell: ConvLSTMCell, x: torch.Tensor, state):
    return cell(x, state)


class VisualBlock(nn.Module):
    """conv-BN-ReLU x2, 2x2 max pool, convLSTM unrolled over time."""

    def __init__(self, in_channels: int, channels: int, dropout: float, drop_after_conv1: bool = True,
                 drop_after_lstm: bool = True):
        super().__init__()
        # convolutions feeding batch norm carry no bias: the norm's shift replaces it
        self.conv1 = nn.Conv2d(in_channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.drop1 = _dropout(dropout, drop_after_conv1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.drop2 = _dropout(dropout, True)
        self.pool = nn.MaxPool2d(2)
        self.convlstm = ConvLSTMCell(channels, channels)
        self.drop_lstm = _dropout(dropout, drop_after_lstm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, C, H, W) -> (B, T, C', H/2, W/2) hidden-state sequence
        b, t = x.shape[:2]
        y = x.reshape(b * t, *x.shape[2:])
        y = self.drop1(F.relu(self.bn1(self.conv1(y))))
        y = self.drop2(F.relu(self.bn2(self.conv2(y))))
        y = self.pool(y)
        y = y.reshape(b, t, *y.shape[1:])
        state, hs = None, []
        for step in range(t):
            state = self.convlstm(y[:, step], state)
            hs.append(state[0])
        return self.drop_lstm(torch.stack(hs, dim=1))


class VisualBranch(nn.Module):
    def __init__(self, in_channels: int, channel_plan=(32, 64, 128), dropout: float = 0.4):
        super().__init__()
        c1, c2, c3 = channel_plan
        self.blocks = nn.ModuleList([
            VisualBlock(in_channels, c1, dropout, drop_after_conv1=False),
            VisualBlock(c1, c2, dropout),
            VisualBlock(c2, c3, dropout, drop_after_lstm=False),
        ])
        # per-channel input standardization, set from the training split; identity until then
        self.register_buffer("input_mean", torch.zeros(in_channels))
        self.register_buffer("input_std", torch.ones(in_channels))
        self.out_features = c3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 8, H, W, C) -> (B, channel_plan[-1])."""
        if x.dim() != 5:
            raise ShapeError(f"visual input must be (B, T, H, W, C), got {tuple(x.shape)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"spatial size {tuple(x.shape[2:4])} not divisible by 8")
        y = ((x - self.input_mean) / self.input_std).permute(0, 1, 4, 2, 3)
        for block in self.blocks:
            y = block(y)
        return y[:, -1].mean(dim=(2, 3))


class AudioBranch(nn.Module):
    """Two temporal convolutions over the MFCC sequence, then global max pooling.

    Padding is ``kernel // 2`` on both sides, so with an even kernel each layer
    lengthens the sequence by one; the symmetric padding keeps the branch
    equivariant to time reversal for symmetric kernels.
    """

    def __init__(self, n_mfcc: int = 20, filters: int = 64, kernel: int = 32, dropout: float = 0.4):
        super().__init__()
        self.conv1 = nn.Conv1d(n_mfcc, filters, kernel, padding=kernel // 2, bias=False)
        self.bn1 = nn.BatchNorm1d(filters)
        self.drop1 = _dropout(dropout, True)
        self.conv2 = nn.Conv1d(filters, filters, kernel, padding=kernel // 2, bias=False)
        self.bn2 = nn.BatchNorm1d(filters)
        self.drop2 = _dropout(dropout, True)
        self.register_buffer("mfcc_mean", torch.zeros(n_mfcc))
        self.register_buffer("mfcc_std", torch.ones(n_mfcc))
        self.out_features = filters

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, t_a, n_mfcc) -> (B, filters)."""
        if x.dim() != 3 or x.shape[2] != self.conv1.in_channels:
            raise ShapeError(f"audio input must be (B, t_a, {self.conv1.in_channels}), got {tuple(x.shape)}")
        y = ((x - self.mfcc_mean) / self.mfcc_std).transpose(1, 2)
        y = self.drop1(F.relu(self.bn1(self.conv1(y))))
        y = self.drop2(F.relu(self.bn2(self.conv2(y))))
        return y.amax(dim=2)


class FusionHead(nn.Module):
    def __init__(self, in_features: int, hidden: int, n_classes: int, dropout: float = 0.4):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.drop = _dropout(dropout, True)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.drop(F.relu(self.fc1(features))))


class FinoNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = 0
        self.visual = None
        self.audio = None
        if cfg.uses_vision:
            self.visual = VisualBranch(len(cfg.visual_channels), cfg.channel_plan, cfg.dropout)
            self.register_buffer("visual_channels", torch.tensor(cfg.visual_channels), persistent=False)
            width += self.visual.out_features
        if cfg.uses_audio:
            self.audio = AudioBranch(cfg.n_mfcc, cfg.audio_filters, cfg.audio_kernel, cfg.dropout)
            width += self.audio.out_features
        hidden = cfg.audio_hidden if cfg.modalities == ("a",) else cfg.fusion_hidden
        self.head = FusionHead(width, hidden, cfg.n_classes, cfg.dropout)

    def features(self, visual: torch.Tensor | None = None, audio: torch.Tensor | None = None):
        v = a = None
        if self.visual is not None:
            if visual is None:
                raise MissingModality(f"{self.cfg.variant} needs visual input")
            v = self.visual(visual.index_select(-1, self.visual_channels))
        if self.audio is not None:
            if audio is None:
                raise MissingModality(f"{self.cfg.variant} needs audio input")
            a = self.audio(audio)
        return v, a

    def forward(self, visual: torch.Tensor | None = None, audio: torch.Tensor | None = None) -> torch.Tensor:
        v, a = self.features(visual, audio)
        return fuse_and_classify(self.head, v, a, self.cfg.modalities)

    def set_visual_normalization(self, mean, std) -> None:
        """Per-channel statistics over all four R, G, B, depth channels; the variant's subset is kept."""
        if self.visual is None:
            return
        idx = self.visual_channels.numpy()
        std = np.where(np.asarray(std) > 1e-6, std, 1.0)
        self.visual.input_mean.copy_(torch.as_tensor(np.asarray(mean)[idx], dtype=self.visual.input_mean.dtype))
        self.visual.input_std.copy_(torch.as_tensor(np.asarray(std)[idx], dtype=self.visual.input_std.dtype))

    def set_audio_normalization(self, mean, std) -> None:
        if self.audio is None:
            return
        std = np.where(np.asarray(std) > 1e-6, std, 1.0)
        self.audio.mfcc_mean.copy_(torch.as_tensor(mean, dtype=self.audio.mfcc_mean.dtype))
        self.audio.mfcc_std.copy_(torch.as_tensor(std, dtype=self.audio.mfcc_std.dtype))


def fuse_and_classify(head: FusionHead, visual_feature=None, audio_feature=None,
                      modalities=("rgb", "d", "a"), probabilities: bool = False) -> torch.Tensor:
    """Concatenate the branch features present in ``modalities`` and score them."""
    parts = []
    if any(m in modalities for m in ("rgb", "d")):
        if visual_feature is None:
            raise MissingModality("visual feature missing")
        parts.append(visual_feature)
    if "a" in modalities:
        if audio_feature is None:
            raise MissingModality("audio feature missing")
        parts.append(audio_feature)
    scores = head(torch.cat(parts, dim=1))
    return torch.softmax(scores, dim=1) if probabilities else scores


def init_params(cfg: ModelConfig, seed: int | None = None) -> FinoNet:
    """Build a model with deterministic fan-in scaled uniform weights.

    Biases start at zero except the convLSTM forget gates (+1); batch-norm
    scales start at one.
    """
    gen = torch.Generator().manual_seed(cfg.seed if seed is None else int(seed))
    model = FinoNet(cfg)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                bound = 1.0 / np.sqrt(fan_in)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
                module.reset_parameters()
                module.reset_running_stats()
        for module in model.modules():
            if isinstance(module, ConvLSTMCell):
                hc = module.hidden_channels
                module.input_conv.bias[hc:2 * hc] = 1.0
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def dropout_plan(model: FinoNet) -> list[tuple[str, bool]]:
    """(layer name, followed by dropout) for every conv, convLSTM and linear layer, in order."""
    plan = []
    if model.visual is not None:
        for b, block in enumerate(model.visual.blocks, start=1):
            plan += [(f"block{b}.conv1", isinstance(block.drop1, nn.Dropout)),
                     (f"block{b}.conv2", isinstance(block.drop2, nn.Dropout)),
                     (f"block{b}.convlstm", isinstance(block.drop_lstm, nn.Dropout))]
    if model.audio is not None:
        plan += [("audio.conv1", isinstance(model.audio.drop1, nn.Dropout)),
                 ("audio.conv2", isinstance(model.audio.drop2, nn.Dropout))]
    plan += [("head.fc1", isinstance(model.head.drop, nn.Dropout)), ("head.fc2", False)]
    return plan


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: FinoNet, **extra) -> Path:
    """Write a self-describing checkpoint: format/version, config echo, weights and ``extra``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    payload.update(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(path, expect_task: str | None = None, expect_modalities=None):
    """Returns ``(model, payload)`` with the model in evaluation mode."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise IoError(f"{path}: checkpoint not found") from exc
    except (pickle.UnpicklingError, RuntimeError, EOFError) as exc:
        raise SchemaViolation(f"{path}: unreadable checkpoint ({type(exc).__name__})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT or "version" not in payload:
        raise SchemaViolation(f"{path}: not a finonet checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise SchemaViolation(f"{path}: checkpoint version {payload['version']} is newer than supported")
    cfg = ModelConfig(**payload["model_config"])
    if expect_task is not None and normalize_task(expect_task) != cfg.task:
        raise ConfigMismatch(f"{path}: checkpoint task is {cfg.task}, expected {normalize_task(expect_task)}")
    if expect_modalities is not None and parse_modalities(expect_modalities) != cfg.modalities:
        raise ConfigMismatch(f"{path}: checkpoint modalities {cfg.modalities} != {tuple(expect_modalities)}")
    model = FinoNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
