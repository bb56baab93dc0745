"""Episodes, label taxonomy, on-disk dataset format and stratified splits.

Episode directory layout::

    <id>/rgb/000000.png      8-bit RGB
    <id>/depth/000000.png    16-bit single channel, millimetres
    <id>/audio.wav           PCM16 mono, 16 kHz
    <id>/meta.json           action, label, phases, frame_timestamps, recorder
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import CorruptEpisode, EmptyDataset, MissingModality, SchemaViolation

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PHASE_NAMES = ("approach", "manipulate", "retreat")
SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.7, 0.1, 0.2)


class Label(str, enum.Enum):
    SUCCESS = "success"
    COLLISION = "collision"
    MISS = "miss"
    OVERFLOW = "overflow"
    SPILL = "spill"
    OVERTURN = "overturn"


class ActionName(str, enum.Enum):
    PUSH = "push"
    PICK_PLACE = "pick_place"
    POUR = "pour"
    PUT_IN_CONTAINER = "put_in_container"
    STACK = "stack"


# Fixed class orderings used by every task head and confusion matrix.
ALL_LABELS: tuple[Label, ...] = tuple(Label)
FAILURE_LABELS: tuple[Label, ...] = tuple(l for l in Label if l is not Label.SUCCESS)
DETECTION_CLASSES = ("success", "fail")

# Populated cells of the failure-type / action distribution of the FAILURE dataset.
LEGAL_PAIRS: dict[ActionName, frozenset[Label]] = {
    ActionName.PUT_IN_CONTAINER: frozenset({Label.SUCCESS, Label.COLLISION, Label.MISS}),
    ActionName.POUR: frozenset({Label.SUCCESS, Label.OVERFLOW, Label.SPILL}),
    ActionName.PUSH: frozenset({Label.SUCCESS, Label.COLLISION, Label.MISS, Label.OVERTURN}),
    ActionName.PICK_PLACE: frozenset({Label.SUCCESS, Label.COLLISION, Label.MISS, Label.OVERTURN}),
    ActionName.STACK: frozenset({Label.SUCCESS, Label.COLLISION, Label.MISS, Label.OVERTURN}),
}


def parse_action(value) -> ActionName:
    try:
        return ActionName(value)
    except ValueError:
        raise SchemaViolation(f"unknown action {value!r}") from None


def parse_label(value) -> Label:
    try:
        return Label(value)
    except ValueError:
        raise SchemaViolation(f"unknown label {value!r}") from None


def is_legal(action, label) -> bool:
    return Label(label) in LEGAL_PAIRS[ActionName(action)]


def check_legal(action, label) -> None:
    action, label = parse_action(action), parse_label(label)
    if label not in LEGAL_PAIRS[action]:
        raise SchemaViolation(f"label {label.value!r} cannot occur with action {action.value!r}")


def derive_detection_label(label) -> str:
    """Collapse a six-way label to the binary detection target."""
    return "success" if Label(label) is Label.SUCCESS else "fail"


@dataclass
class Episode:
    """One recorded manipulation with synchronized RGB, depth and audio."""

    id: str
    action: ActionName
    label: Label
    rgb_frames: np.ndarray  # (N, H, W, 3) uint8
    depth_frames: np.ndarray  # (N, H, W) uint16, millimetres
    audio: np.ndarray  # (S,) float64 in [-1, 1)
    frame_timestamps: np.ndarray  # (N,) seconds
    phases: dict[str, tuple[float, float]] | None = None
    recorder: object = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.action = parse_action(self.action)
        self.label = parse_label(self.label)
        self.frame_timestamps = np.asarray(self.frame_timestamps, dtype=np.float64)
        self.validate()

    @property
    def n_frames(self) -> int:
        return len(self.rgb_frames)

    @property
    def duration(self) -> float:
        if self.phases is not None:
            return float(self.phases["retreat"][1])
        return max(float(self.frame_timestamps[-1]), len(self.audio) / self.sample_rate)

    @property
    def detection_label(self) -> str:
        return derive_detection_label(self.label)

    def validate(self) -> None:
        check_legal(self.action, self.label)
        rgb, depth = self.rgb_frames, self.depth_frames
        if rgb.ndim != 4 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
            raise CorruptEpisode(f"{self.id}: rgb frames must be (N,H,W,3) uint8, got {rgb.shape} {rgb.dtype}")
        if depth.ndim != 3 or depth.dtype != np.uint16:
            raise CorruptEpisode(f"{self.id}: depth frames must be (N,H,W) uint16, got {depth.shape} {depth.dtype}")
        if len(rgb) != len(depth):
            raise CorruptEpisode(f"{self.id}: {len(rgb)} rgb frames but {len(depth)} depth frames")
        if rgb.shape[1:3] != depth.shape[1:3]:
            raise CorruptEpisode(f"{self.id}: rgb {rgb.shape[1:3]} and depth {depth.shape[1:3]} sizes differ")
        ts = self.frame_timestamps
        if ts.shape != (len(rgb),):
            raise CorruptEpisode(f"{self.id}: {len(ts)} timestamps for {len(rgb)} frames")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise CorruptEpisode(f"{self.id}: frame timestamps not strictly increasing")
        if self.phases is not None:
            self.phases = _validate_phases(self.id, self.phases, ts)


def _validate_phases(eid, phases, ts) -> dict[str, tuple[float, float]]:
    try:
        spans = [tuple(float(v) for v in phases[name]) for name in PHASE_NAMES]
    except (KeyError, TypeError, ValueError):
        raise SchemaViolation(f"{eid}: phases must map {PHASE_NAMES} to [start, end]") from None
    if any(len(s) != 2 for s in spans):
        raise SchemaViolation(f"{eid}: every phase needs exactly [start, end]")
    if spans[0][0] != 0.0:
        raise SchemaViolation(f"{eid}: approach phase must start at 0")
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if a1 != b0:
            raise SchemaViolation(f"{eid}: phases are not contiguous")
    for s0, s1 in spans:
        if s1 < s0:
            raise SchemaViolation(f"{eid}: phase interval [{s0}, {s1}] is reversed")
    if len(ts) and spans[-1][1] < ts[-1] - 1e-6:
        raise SchemaViolation(f"{eid}: phases end at {spans[-1][1]} before last frame {ts[-1]}")
    return dict(zip(PHASE_NAMES, spans))


# ---------------------------------------------------------------------------
# on-disk format


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr


def load_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise MissingModality(f"{path}: meta.json missing")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{meta_path}: {exc}") from None
    for key in ("action", "label", "frame_timestamps"):
        if key not in meta:
            raise SchemaViolation(f"{meta_path}: missing key {key!r}")
    check_legal(meta["action"], meta["label"])
    return meta


def load_episode(path) -> Episode:
    """Read and validate one episode directory."""
    path = Path(path)
    meta = load_meta(path)
    rgb_dir, depth_dir, wav = path / "rgb", path / "depth", path / "audio.wav"
    for stream in (rgb_dir, depth_dir):
        if not stream.is_dir():
            raise MissingModality(f"{path}: {stream.name}/ missing")
    if not wav.is_file():
        raise MissingModality(f"{path}: audio.wav missing")

    rgb_files = sorted(rgb_dir.glob("*.png"))
    depth_files = sorted(depth_dir.glob("*.png"))
    if not rgb_files or not depth_files:
        raise MissingModality(f"{path}: empty frame stream")
    if len(rgb_files) != len(depth_files):
        raise CorruptEpisode(f"{path}: {len(rgb_files)} rgb frames but {len(depth_files)} depth frames")

    rgb = np.stack([_read_png(f) for f in rgb_files])
    if rgb.ndim == 4 and rgb.shape[-1] == 4:
        rgb = rgb[..., :3]
    depth = np.stack([_read_png(f) for f in depth_files])
    if depth.dtype != np.uint16:
        # PIL may hand 16-bit PNGs back as int32 mode "I"
        if depth.min() < 0 or depth.max() > 65535:
            raise CorruptEpisode(f"{path}: depth values outside 16-bit range")
        depth = depth.astype(np.uint16)

    rate, samples = wavfile.read(wav)
    if samples.ndim > 1:
        samples = samples.mean(axis=1)
    if samples.dtype == np.int16:
        audio = samples.astype(np.float64) / 32768.0
    elif np.issubdtype(samples.dtype, np.integer):
        audio = samples.astype(np.float64) / float(np.iinfo(samples.dtype).max + 1)
    else:
        audio = samples.astype(np.float64)
    if rate != SAMPLE_RATE:
        g = math.gcd(int(rate), SAMPLE_RATE)
        audio = resample_poly(audio, SAMPLE_RATE // g, int(rate) // g)

    return Episode(
        id=meta.get("id", path.name),
        action=meta["action"],
        label=meta["label"],
        rgb_frames=rgb,
        depth_frames=depth,
        audio=audio,
        frame_timestamps=np.asarray(meta["frame_timestamps"], dtype=np.float64),
        phases=meta.get("phases"),
        recorder=meta.get("recorder"),
    )


def write_episode(episode: Episode, root) -> Path:
    """Write ``episode`` to ``root/<id>`` in the directory format; returns that path."""
    path = Path(root) / episode.id
    (path / "rgb").mkdir(parents=True, exist_ok=True)
    (path / "depth").mkdir(parents=True, exist_ok=True)
    for i, (rgb, depth) in enumerate(zip(episode.rgb_frames, episode.depth_frames)):
        Image.fromarray(rgb, mode="RGB").save(path / "rgb" / f"{i:06d}.png")
        Image.fromarray(depth).save(path / "depth" / f"{i:06d}.png")
    pcm = np.clip(np.round(episode.audio * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path / "audio.wav", episode.sample_rate, pcm)
    meta = {
        "id": episode.id,
        "action": episode.action.value,
        "label": episode.label.value,
        "frame_timestamps": [float(t) for t in episode.frame_timestamps],
        "recorder": episode.recorder,
    }
    if episode.phases is not None:
        meta["phases"] = {k: list(v) for k, v in episode.phases.items()}
    (path / "meta.json").write_text(json.dumps(meta, indent=1))
    return path


@dataclass(frozen=True)
class EpisodeRef:
    """Lightweight handle to an episode on disk (metadata only)."""

    id: str
    action: ActionName
    label: Label
    path: Path | None = None

    def load(self) -> Episode:
        if self.path is None:
            raise MissingModality(f"{self.id}: no path to load from")
        return load_episode(self.path)


def scan_dataset(root) -> list[EpisodeRef]:
    """List the episodes of a dataset root, reading only their meta files."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root}: not a directory")
    refs = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (d / "meta.json").is_file():
            continue
        meta = load_meta(d)
        refs.append(EpisodeRef(meta.get("id", d.name), parse_action(meta["action"]), parse_label(meta["label"]), d))
    if not refs:
        raise EmptyDataset(f"{root}: no episode directories")
    return refs


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetIndex:
    episodes: tuple[EpisodeRef, ...]
    split_assignment: Mapping[str, str]
    seed: int
    stratified: bool = True

    def split(self, name: str) -> list[EpisodeRef]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.episodes if self.split_assignment[e.id] == name]

    def sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "stratified": self.stratified,
            "episodes": [
                {"id": e.id, "action": e.action.value, "label": e.label.value,
                 "path": str(e.path) if e.path else None, "split": self.split_assignment[e.id]}
                for e in self.episodes
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetIndex":
        refs, assignment = [], {}
        for e in data["episodes"]:
            refs.append(EpisodeRef(e["id"], parse_action(e["action"]), parse_label(e["label"]),
                                   Path(e["path"]) if e.get("path") else None))
            assignment[e["id"]] = e["split"]
        return cls(tuple(refs), assignment, int(data["seed"]), bool(data.get("stratified", True)))


def _allocate(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> list[int]:
    """Largest-remainder allocation of ``n`` items; ties go to the earlier (train) split."""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    rema = [q - c for q, c in zip(quotas, counts)]
    order = sorted(range(len(ratios)), key=lambda k: (-round(rema[k], 9), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def make_splits(episodes: Iterable, seed: int, stratify: bool = True) -> DatasetIndex:
    """Deterministic 70/10/20 split, stratified by (action, label) by default."""
    eps = list(episodes)
    if not eps:
        raise EmptyDataset("cannot split an empty episode list")
    refs = tuple(
        e if isinstance(e, EpisodeRef) else EpisodeRef(e.id, e.action, e.label, None) for e in eps
    )
    ids = [r.id for r in refs]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("duplicate episode ids")

    strata: dict[tuple, list[EpisodeRef]] = {}
    for r in refs:
        key = (r.action.value, r.label.value) if stratify else ("*",)
        strata.setdefault(key, []).append(r)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: r.id)
        perm = rng.permutation(len(members))
        counts = _allocate(len(members))
        bounds = np.cumsum([0] + counts)
        for s, name in enumerate(SPLITS):
            for j in perm[bounds[s]: bounds[s + 1]]:
                assignment[members[j].id] = name
    return DatasetIndex(refs, assignment, int(seed), stratify)


def write_index(index: DatasetIndex, path) -> None:
    Path(path).write_text(json.dumps(index.to_json(), indent=1))


def read_index(path) -> DatasetIndex:
    return DatasetIndex.from_json(json.loads(Path(path).read_text()))
