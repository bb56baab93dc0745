"""Episode -> network inputs, shared by training, evaluation and prediction."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audio as audio_fe
from .audio import AudioFrontEndConfig
from .data_model import Episode, EpisodeRef
from .vision import VisionConfig, visual_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    audio: AudioFrontEndConfig = field(default_factory=AudioFrontEndConfig)

    def to_dict(self) -> dict:
        return {"vision": asdict(self.vision), "audio": asdict(self.audio)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(VisionConfig(**d["vision"]), AudioFrontEndConfig(**d["audio"]))


@dataclass
class Inputs:
    visual: np.ndarray  # (8, S, S, 4) float32
    mfcc: np.ndarray  # (t_a, n_mfcc) float32
    valid_windows: int
    indices: np.ndarray


def truncate_audio(episode: Episode, completion_fraction: float) -> np.ndarray:
    if completion_fraction >= 1.0:
        return episode.audio
    n = int(round(completion_fraction * episode.duration * episode.sample_rate))
    return episode.audio[: max(n, 1)]


def episode_inputs(episode: Episode, cfg: PipelineConfig, completion_fraction: float = 1.0,
                   mode: str | None = None, rng: np.random.Generator | None = None) -> Inputs:
    vt = visual_input(episode, cfg.vision, completion_fraction, mode, rng)
    m = audio_fe.extract(truncate_audio(episode, completion_fraction), cfg.audio)
    return Inputs(vt.data, m.data.astype(np.float32), m.valid_windows, vt.sampled_indices)


class FeatureCache:
    """Deterministic (even-sampling, full-episode) inputs per episode id."""

    def __init__(self, cfg: PipelineConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self._store: dict[str, Inputs] = {}

    def __contains__(self, eid: str) -> bool:
        return eid in self._store

    def get(self, ref: EpisodeRef) -> Inputs:
        if ref.id not in self._store:
            self._store[ref.id] = episode_inputs(ref.load(), self.cfg, mode="even")
        return self._store[ref.id]

    def put(self, eid: str, inputs: Inputs) -> None:
        self._store[eid] = inputs

    def prefetch(self, refs) -> None:
        todo = [r for r in refs if r.id not in self._store]
        if not todo:
            return
        log.info("preprocessing %d episodes", len(todo))
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            for ref, inp in zip(todo, pool.map(lambda r: episode_inputs(r.load(), self.cfg, mode="even"), todo)):
                self._store[ref.id] = inp


def stack_inputs(items: list[Inputs]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([i.visual for i in items]), np.stack([i.mfcc for i in items])
