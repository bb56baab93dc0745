"""Run configuration: a flat ``section.key = value`` file plus overrides.

Grammar, one entry per line::

    # comment
    train.epochs = 250
    model.channel_plan = 32,64,128
    vision.flip_axis = lr

Blank lines and ``#`` comments are ignored.  Values are parsed according to
the schema below; list values are comma separated.  Unknown keys are errors.
Precedence, lowest first: schema defaults, config file, ``--set`` overrides,
the ``FINO_SEED`` environment variable (for ``seed`` only).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .audio import AudioFrontEndConfig
from .errors import ConfigError, IoError
from .network import ModelConfig
from .pipeline import PipelineConfig
from .training import TrainConfig
from .vision import VisionConfig

SEED_ENV = "FINO_SEED"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0, "master seed: split shuffle, initialization, batch order, augmentation"),
    "data.stratify": (_bool, True, "stratify the 70/10/20 split by (action, label)"),
    "vision.size": (int, 128, "square resize of RGB and depth frames; divisible by 8"),
    "vision.occlusion_near_mm": (float, 350.0, "depth below which a pixel counts as arm-occluded"),
    "vision.occlusion_ratio": (float, 0.30, "fraction of near pixels that drops a frame"),
    "vision.flip_axis": (_str, "lr", "augmentation mirror axis: lr (left-right) or ud"),
    "vision.d_max_mm": (float, 4000.0, "depth clamp used for normalization"),
    "vision.sampling": (_str, "even", "frame sampling per phase: even or random"),
    "audio.window_ms": (float, 32.0, "analysis window length"),
    "audio.hop_ms": (float, 32.0, "hop between windows"),
    "audio.n_fft": (int, 512, "FFT size"),
    "audio.n_mels": (int, 40, "Mel filters"),
    "audio.n_mfcc": (int, 20, "cepstral coefficients kept"),
    "audio.t_a": (int, 320, "fixed number of windows after pad/clip"),
    "audio.log_floor": (float, 1e-10, "floor inside the log"),
    "model.channel_plan": (_int_list, (32, 64, 128), "convolution widths of the three visual blocks"),
    "model.fusion_hidden": (int, 256, "hidden width of the fusion head"),
    "model.audio_hidden": (int, 64, "hidden width of the audio-only head"),
    "model.audio_filters": (int, 64, "filters per audio conv layer"),
    "model.audio_kernel": (int, 32, "audio conv kernel size"),
    "model.dropout": (float, 0.4, "dropout rate"),
    "train.learning_rate": (float, 1e-5, "Adam step size"),
    "train.epochs": (int, 250, "epochs; the best validation epoch is kept"),
    "train.batch_size": (int, 8, "mini-batch size"),
    "train.beta1": (float, 0.9, "Adam beta1"),
    "train.beta2": (float, 0.999, "Adam beta2"),
    "train.eps": (float, 1e-8, "Adam epsilon"),
    "train.class_weighting": (_str, "none", "none or inverse_frequency"),
    "train.patience": (int, 0, "stop after this many epochs without improvement; 0 disables"),
    "train.augment": (_bool, True, "color jitter and mirroring on the train split"),
    "analysis.fractions": (_float_list, (0.25, 0.5, 0.75, 1.0), "completion fractions"),
    "analysis.n_resamples": (int, 50, "frame resamplings for the variance analysis"),
}


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        raw[key] = value
    return raw


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def resolve(cls, path=None, overrides=(), env=None) -> "RunConfig":
        env = os.environ if env is None else env
        raw: dict[str, str] = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except OSError as exc:
                raise IoError(f"cannot read config {path}: {exc}") from exc
            raw.update(parse_lines(text.splitlines(), str(path)))
        raw.update(parse_lines(overrides, "--set"))
        if env.get(SEED_ENV):
            raw["seed"] = env[SEED_ENV]
        return cls.from_raw(raw)

    @classmethod
    def from_raw(cls, raw: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {k: default for k, (_, default, _) in SCHEMA.items()}
        for key, text in raw.items():
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(text) if isinstance(text, str) else text
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        cfg = cls(values)
        cfg.pipeline()  # validate component configs early
        cfg.train_config()
        return cfg

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def dumps(self) -> str:
        def fmt(v):
            if isinstance(v, (tuple, list)):
                return ",".join(str(x) for x in v)
            return str(v).lower() if isinstance(v, bool) else str(v)

        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.values.items())

    def _section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def pipeline(self) -> PipelineConfig:
        try:
            return PipelineConfig(VisionConfig(**self._section("vision")),
                                  AudioFrontEndConfig(**self._section("audio")))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self, modalities, task) -> ModelConfig:
        return ModelConfig(modalities=modalities, task=task, n_mfcc=self["audio.n_mfcc"],
                           seed=self["seed"], **self._section("model"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self["seed"], **self._section("train"))


def reference() -> str:
    """Documented defaults, one line per key."""
    width = max(map(len, SCHEMA))
    out = []
    for key, (_, default, text) in SCHEMA.items():
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else str(default)
        out.append(f"{key:<{width}} = {shown:<14} # {text}")
    return "\n".join(out)
