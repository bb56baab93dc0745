"""Frame streams -> early-fused 8-step RGB-D tensor.

Steps: drop self-occluded frames by depth thresholding, split the rest into
approach / manipulate / retreat, take 4 frames from approach and 4 from
retreat, normalise and stack RGB with depth on the channel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .data_model import PHASE_NAMES, Episode
from .errors import ConfigError, DegeneratePhase, InsufficientFrames, NumericalError

N_STEPS = 8


@dataclass(frozen=True)
class SamplingPolicy:
    occlusion_near_mm: float = 350.0
    occlusion_ratio: float = 0.30
    per_phase_count: int = 4
    completion_fraction: float = 1.0
    mode: str = "even"  # or "random"

    def __post_init__(self):
        if not 0.0 < self.completion_fraction <= 1.0:
            raise ConfigError(f"completion fraction must lie in (0, 1], got {self.completion_fraction}")
        if not 0.0 < self.occlusion_ratio < 1.0:
            raise ConfigError(f"occlusion ratio must lie in (0, 1), got {self.occlusion_ratio}")
        if self.mode not in ("even", "random"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class VisionConfig:
    size: int = 128
    occlusion_near_mm: float = 350.0
    occlusion_ratio: float = 0.30
    flip_axis: str = "lr"
    d_max_mm: float = 4000.0
    sampling: str = "even"

    def __post_init__(self):
        if self.size % 8:
            raise ConfigError(f"image size must be divisible by 8, got {self.size}")
        if self.flip_axis not in ("lr", "ud"):
            raise ConfigError(f"flip axis must be 'lr' or 'ud', got {self.flip_axis!r}")
        if self.d_max_mm <= 0:
            raise ConfigError("d_max_mm must be positive")

    def policy(self, completion_fraction: float = 1.0, mode: str | None = None) -> SamplingPolicy:
        return SamplingPolicy(self.occlusion_near_mm, self.occlusion_ratio, 4,
                              completion_fraction, mode or self.sampling)


@dataclass
class VisualTensor:
    data: np.ndarray  # (8, H, W, 4) float32: R, G, B, depth
    sampled_indices: np.ndarray  # (8,) source frame indices


def filter_self_occluded(depth_frames, policy: SamplingPolicy = SamplingPolicy(), min_frames: int = N_STEPS,
                         max_retries: int = 5) -> list[int]:
    """Indices of frames not dominated by near-camera depth (the robot's own arm).

    If fewer than ``min_frames`` survive, the ratio threshold is relaxed by x1.25
    up to ``max_retries`` times.
    """
    depth = np.asarray(depth_frames)
    if len(depth) < min_frames:
        raise InsufficientFrames(f"{len(depth)} frames, need at least {min_frames}")
    near = (depth < policy.occlusion_near_mm).reshape(len(depth), -1).mean(axis=1)
    ratio = policy.occlusion_ratio
    for _ in range(max_retries + 1):
        keep = np.flatnonzero(near <= ratio)
        if len(keep) >= min_frames:
            return keep.tolist()
        ratio *= 1.25
    raise InsufficientFrames(f"only {len(keep)} unoccluded frames after relaxing to ratio {ratio / 1.25:.3f}")


def truncated_frame_count(timestamps, duration: float, fraction: float) -> int:
    """Number of leading frames with timestamp <= fraction * duration."""
    if fraction >= 1.0:
        return len(timestamps)
    return int(np.searchsorted(np.asarray(timestamps), fraction * duration + 1e-9, side="right"))


def _positional_split(retained: list[int]) -> list[tuple[int, int]]:
    n = len(retained)
    a, b = math.floor(0.4 * n + 0.5), math.floor(0.6 * n + 0.5)
    cuts = [0, a, b, n]
    ranges = []
    for lo, hi in zip(cuts, cuts[1:]):
        if hi <= lo:
            raise DegeneratePhase(f"positional split of {n} frames leaves an empty phase")
        ranges.append((retained[lo], retained[hi - 1] + 1))
    return ranges


def segment_phases(episode: Episode, retained: list[int] | None = None,
                   use_annotation: bool = True) -> list[tuple[int, int]]:
    """Half-open frame index ranges for approach, manipulate and retreat.

    Annotated phase times are mapped through ``frame_timestamps``; without an
    annotation the retained frames are split 40/20/40 by position.
    """
    if retained is None:
        retained = list(range(episode.n_frames))
    if not use_annotation or episode.phases is None:
        return _positional_split(list(retained))
    ts = episode.frame_timestamps
    ranges = []
    for k, name in enumerate(PHASE_NAMES):
        t0, t1 = episode.phases[name]
        last = k == len(PHASE_NAMES) - 1
        mask = (ts >= t0) & ((ts <= t1) if last else (ts < t1))
        if last:
            mask |= ts > t1
        hits = np.flatnonzero(mask)
        if t1 <= t0 or hits.size == 0:
            raise DegeneratePhase(f"{episode.id}: phase {name!r} [{t0}, {t1}] contains no frames")
        ranges.append((int(hits[0]), int(hits[-1]) + 1))
    return ranges


def _even_positions(m: int, k: int) -> list[int]:
    if k == 1:
        return [0]
    return [math.floor(j * (m - 1) / (k - 1) + 0.5) for j in range(k)]


def sample_frames(retained: list[int], phase_ranges: list[tuple[int, int]], policy: SamplingPolicy = SamplingPolicy(),
                  rng: np.random.Generator | None = None) -> list[int]:
    """Pick ``per_phase_count`` frames from the approach and from the retreat phase."""
    retained = np.asarray(retained)
    k = policy.per_phase_count
    out = []
    for lo, hi in (phase_ranges[0], phase_ranges[2]):
        pool = retained[(retained >= lo) & (retained < hi)]
        if pool.size == 0:
            raise InsufficientFrames(f"no retained frame in phase [{lo}, {hi})")
        if policy.mode == "random":
            if rng is None:
                raise ValueError("random sampling needs an rng")
            picks = np.sort(rng.choice(pool.size, size=k, replace=pool.size < k))
        else:
            picks = _even_positions(pool.size, k)
        out.extend(int(pool[p]) for p in picks)
    return out


def select_indices(episode: Episode, policy: SamplingPolicy = SamplingPolicy(),
                   rng: np.random.Generator | None = None) -> list[int]:
    """Occlusion filter, phase segmentation and sampling for one episode.

    With ``completion_fraction < 1`` only the leading part of the recording is
    visible; the annotated phases describe the full execution, so the visible
    frames are split by position instead.
    """
    n = truncated_frame_count(episode.frame_timestamps, episode.duration, policy.completion_fraction)
    if n < N_STEPS:
        raise InsufficientFrames(f"{episode.id}: {n} frames within completion fraction {policy.completion_fraction}")
    retained = filter_self_occluded(episode.depth_frames[:n], policy)
    ranges = segment_phases(episode, retained, use_annotation=policy.completion_fraction >= 1.0)
    return sample_frames(retained, ranges, policy, rng)


def _resize(stack: np.ndarray, size: int) -> np.ndarray:
    # stack: (T, H, W, C)
    if stack.shape[1] == size and stack.shape[2] == size:
        return stack
    t = torch.from_numpy(np.ascontiguousarray(stack.transpose(0, 3, 1, 2)))
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return t.numpy().transpose(0, 2, 3, 1)


def build_visual_tensor(episode: Episode, indices, size: int = 128, d_max_mm: float = 4000.0) -> VisualTensor:
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) != N_STEPS or idx.min() < 0 or idx.max() >= episode.n_frames:
        raise ValueError(f"need {N_STEPS} valid frame indices, got {idx.tolist()}")
    rgb = episode.rgb_frames[idx].astype(np.float32) / 255.0
    depth = np.clip(episode.depth_frames[idx].astype(np.float32), 0.0, d_max_mm) / np.float32(d_max_mm)
    stack = np.concatenate([rgb, depth[..., None]], axis=-1)
    data = np.clip(_resize(stack, size), 0.0, 1.0).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{episode.id}: non-finite value in visual tensor")
    return VisualTensor(data, idx)


def visual_input(episode: Episode, cfg: VisionConfig = VisionConfig(), completion_fraction: float = 1.0,
                 mode: str | None = None, rng: np.random.Generator | None = None) -> VisualTensor:
    idx = select_indices(episode, cfg.policy(completion_fraction, mode), rng)
    return build_visual_tensor(episode, idx, cfg.size, cfg.d_max_mm)


# ---------------------------------------------------------------------------
# augmentation

JITTER_P = 0.2
FLIP_P = 0.5


def _gray(rgb):
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    """Apply one jitter to a (T, H, W, 3) sequence; contrast pivots on each frame's mean gray."""
    out = np.clip(rgb * brightness, 0.0, 1.0)
    mean = _gray(out).mean(axis=(1, 2))[:, None, None, None]
    out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    g = _gray(out)[..., None]
    out = np.clip((out - g) * saturation + g, 0.0, 1.0)
    hsv = rgb_to_hsv(out)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def augment(tensor: VisualTensor, seed, flip_axis: str = "lr") -> VisualTensor:
    """Sequence-consistent training augmentation.

    ``seed`` may be an int or a ``numpy.random.Generator``.  Random draws are
    made in a fixed order so a seed fully determines the transform.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u_jitter, u_flip = rng.random(2)
    b, c, s = rng.uniform(0.8, 1.2, size=3)
    h = rng.uniform(-0.05, 0.05)
    data = tensor.data
    if u_jitter < JITTER_P:
        data = data.copy()
        data[..., :3] = color_jitter(data[..., :3].astype(np.float64), b, c, s, h)
    if u_flip < FLIP_P:
        data = np.flip(data, axis=2 if flip_axis == "lr" else 1)
    if data is tensor.data:
        return tensor
    return replace(tensor, data=np.ascontiguousarray(data, dtype=np.float32))
