"""Procedural tabletop episodes with controllable, modality-specific failure cues.

A head camera looks down on a table holding the manipulated (primary) object,
a secondary object and, depending on the action, a bowl, a stacking base or a
cup.  The gripper approaches, manipulates and retreats; the failure event
happens at ``cue_onset_fraction * duration``.

Randomness is split into independent streams (layout, pixel noise, audio
noise, pour grains, ...), so the same seed with a different label or cue
placement renders the same scene with only the event-specific content
changed.  That makes the success counterfactual of any episode available,
which the tests use as a construction oracle.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .data_model import ActionName, Episode, Label, check_legal, parse_action, parse_label, write_episode
from .errors import IoError, SchemaViolation

log = logging.getLogger(__name__)

SIZE = 128
FPS = 10
SR = 16000
CUE_PLACEMENTS = ("vision_only", "audio_only", "both")

TABLE_RGB = (150, 112, 72)
PRIMARY_TOP, PRIMARY_SIDE = (40, 80, 200), (230, 200, 40)
SECONDARY_TOP, SECONDARY_SIDE = (50, 160, 70), (240, 130, 30)
BASE_RGB = (130, 60, 150)
BOWL_RIM, BOWL_IN = (215, 215, 215), (70, 70, 80)
CONTENT = (245, 235, 205)
CUP_RGB = (200, 40, 40)
GRIPPER_RGB, ARM_RGB, OCCLUDER_RGB = (55, 55, 55), (120, 120, 125), (90, 90, 95)

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
TABLE_MM = np.full((SIZE, SIZE), 1000.0)  # head camera looking straight down at the table


@dataclass(frozen=True)
class ScenarioSpec:
    action: ActionName
    label: Label
    duration_s: float | None = None  # None: drawn from [7, 8] s
    cue_placement: str = "both"
    cue_onset_fraction: float | None = None  # None: drawn from [0.5, 0.65]
    pixel_noise: float = 3.0  # RGB noise sigma, 8-bit units
    depth_noise_mm: float = 2.0
    audio_snr_db: float = 25.0
    confusable_pour: bool = False  # spill rendered with the overflow signature
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "action", parse_action(self.action))
        object.__setattr__(self, "label", parse_label(self.label))
        check_legal(self.action, self.label)
        if self.cue_placement not in CUE_PLACEMENTS:
            raise SchemaViolation(f"cue placement must be one of {CUE_PLACEMENTS}")
        if self.cue_onset_fraction is not None and not 0.0 < self.cue_onset_fraction <= 1.0:
            raise SchemaViolation("cue onset fraction must lie in (0, 1]")
        if self.duration_s is not None and self.duration_s < 2.0:
            raise SchemaViolation("episodes shorter than 2 s cannot be sampled")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action"], d["label"] = self.action.value, self.label.value
        return d


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("layout", "pixels", "depth", "audio", "grains", "scatter", "impulse", "particles")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# scene layout and timeline


@dataclass
class _Layout:
    duration: float
    onset: float
    primary: np.ndarray
    target: np.ndarray
    secondary: np.ndarray
    knock: np.ndarray
    bowl: np.ndarray | None
    base: np.ndarray | None
    spill_center: np.ndarray
    occluded: tuple[int, ...]
    hum_f0: float
    n_frames: int


def _layout(spec: ScenarioSpec, rng: np.random.Generator) -> _Layout:
    u = rng.uniform
    duration = spec.duration_s if spec.duration_s is not None else float(u(7.0, 8.0))
    onset = spec.cue_onset_fraction if spec.cue_onset_fraction is not None else float(u(0.5, 0.65))
    primary = np.array([u(26, 40), u(52, 70)])
    bowl = base = None
    pot = np.array([u(84, 96), u(48, 66)])
    if spec.action in (ActionName.PUSH, ActionName.PICK_PLACE):
        target = primary + np.array([u(40, 50), u(-6, 6)])
    elif spec.action is ActionName.PUT_IN_CONTAINER:
        bowl, target = pot, pot.copy()
    elif spec.action is ActionName.STACK:
        base, target = pot, pot.copy()
    else:  # pour: primary is the cup, emptied next to the bowl
        bowl = pot
        target = pot + np.array([-20.0, 0.0])
    mid = (primary + target) / 2
    side = 1.0 if rng.random() < 0.5 else -1.0
    secondary = mid + np.array([u(-4, 4), side * u(20, 24)])
    knock = np.array([u(6, 10), side * u(8, 12)])
    spill_center = (bowl if bowl is not None else pot) + np.array([u(-14, -8), u(20, 24)])
    n_frames = int(math.floor(duration * FPS + 1e-9)) + 1
    approach_end = int(0.4 * duration * FPS)
    k = int(rng.integers(0, 3))
    occluded = tuple(sorted(rng.choice(np.arange(1, approach_end), size=k, replace=False).tolist()))
    return _Layout(duration, onset, primary, target, secondary, knock, bowl, base, spill_center,
                   occluded, float(u(90, 130)), n_frames)


def _lerp(a, b, s):
    s = min(max(s, 0.0), 1.0)
    return a + (b - a) * s


# ---------------------------------------------------------------------------
# drawing


class _Canvas:
    def __init__(self):
        self.rgb = np.empty((SIZE, SIZE, 3))
        self.rgb[:] = TABLE_RGB
        self.height = np.zeros((SIZE, SIZE))

    def paint(self, mask, color, height):
        self.rgb[mask] = color
        self.height[mask] = height


def _rect(c, w, h, angle=0.0):
    dx, dy = _XX - c[0], _YY - c[1]
    if angle:
        ca, sa = math.cos(angle), math.sin(angle)
        dx, dy = ca * dx + sa * dy, -sa * dx + ca * dy
    return (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)


def _disc(c, r):
    return (_XX - c[0]) ** 2 + (_YY - c[1]) ** 2 <= r * r


def _particles(rng: np.random.Generator, center, spread, n=45, ring=None):
    if ring is None:
        pts = center + rng.normal(0.0, spread, size=(n, 2))
    else:
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = ring + rng.uniform(1.0, 6.0, n)
        pts = center + np.stack([np.cos(ang) * rad, np.sin(ang) * rad], axis=1)
    order = rng.permutation(n)  # order in which particles land
    return np.clip(pts, 2, SIZE - 3), order


def _draw_box(cv: _Canvas, pos, size, top, side, height, lying=False, angle=0.0):
    if lying:
        cv.paint(_rect(pos, size * 1.7, size * 0.9, angle), side, height * 0.6)
    else:
        cv.paint(_rect(pos, size, size, angle), top, height)


class _Scene:
    """Evaluates the state of the scene at time ``t`` and renders it."""

    def __init__(self, spec: ScenarioSpec, lay: _Layout, vision_label: Label, particle_rng):
        self.spec, self.lay, self.label = spec, lay, vision_label
        d = lay.duration
        self.t_manip, self.t_retreat = 0.4 * d, 0.75 * d
        self.t_event = lay.onset * d
        self.home = np.array([64.0, 122.0])
        lab = vision_label
        self.pour_len = 2.0 if lab is Label.OVERFLOW else 1.0
        self.fill_final = {Label.OVERFLOW: 1.0, Label.SPILL: 0.2}.get(lab, 0.5)
        self.particles = None
        if lab is Label.OVERFLOW:
            self.particles = _particles(particle_rng, lay.bowl, 0, ring=14.0)
            self.particle_window = (self.t_event + 1.0, self.t_event + 2.0)
        elif lab is Label.SPILL:
            self.particles = _particles(particle_rng, lay.spill_center, 6.0)
            self.particle_window = (self.t_event, self.t_event + 1.2)

    def gripper(self, t):
        lay = self.lay
        start = lay.primary + np.array([0.0, 10.0])
        at_target = lay.target + np.array([0.0, 10.0])
        hold_until = self.t_retreat
        if self.spec.action is ActionName.POUR:
            hold_until = max(self.t_retreat, self.t_event + self.pour_len)
        if t <= self.t_manip:
            return _lerp(self.home, start, t / self.t_manip)
        if t <= self.t_event:
            return _lerp(start, at_target, (t - self.t_manip) / (self.t_event - self.t_manip))
        if t <= hold_until:
            return at_target
        return _lerp(at_target, self.home, (t - hold_until) / max(lay.duration - hold_until, 1e-6))

    def render(self, t: float, frame: int) -> tuple[np.ndarray, np.ndarray]:
        spec, lay, lab = self.spec, self.lay, self.label
        cv = _Canvas()
        event = t >= self.t_event
        g = self.gripper(t)
        carried = spec.action is not ActionName.PUSH and lab is not Label.MISS

        if self.particles is not None:
            pts, order = self.particles
            a, b = self.particle_window
            n = int(len(pts) * min(max((t - a) / (b - a), 0.0), 1.0))
            for p in pts[order[:n]]:
                cv.paint(_rect(p, 3, 3), CONTENT, 25.0)  # spilled grains heap up

        if lay.bowl is not None:
            cv.paint(_disc(lay.bowl, 14.0), BOWL_RIM, 110.0)
            cv.paint(_disc(lay.bowl, 11.0), BOWL_IN, 10.0)
            if spec.action is ActionName.POUR:
                fill = self.fill_final * min(max((t - self.t_event) / 1.0, 0.0), 1.0)
                if fill > 0:
                    cv.paint(_disc(lay.bowl, 11.0 * math.sqrt(fill)), CONTENT, 10.0 + 100.0 * fill)
        if lay.base is not None:
            cv.paint(_rect(lay.base, 16, 16), BASE_RGB, 80.0)

        knocked = lab is Label.COLLISION and event
        sec = lay.secondary + (lay.knock * min((t - self.t_event) / 0.3, 1.0) if knocked else 0.0)
        _draw_box(cv, sec, 12, SECONDARY_TOP, SECONDARY_SIDE, 100.0, lying=knocked)

        if spec.action is ActionName.POUR:
            cup = lay.primary if t <= self.t_manip else g - np.array([0.0, 10.0])
            pouring = self.t_event <= t <= self.t_event + self.pour_len
            if pouring:
                cv.paint(_rect(cup, 20, 10), CUP_RGB, 220.0)
                cv.paint(_rect(cup + np.array([6.0, 0.0]), 6, 6), CONTENT, 221.0)
            else:
                cv.paint(_disc(cup, 8.0), CUP_RGB, 220.0 if t > self.t_manip else 120.0)
        else:
            self._draw_primary(cv, t, g, carried, event)

        cv.paint(_rect(g, 10, 12), GRIPPER_RGB, 250.0)
        arm = _rect(np.array([g[0], (g[1] + 6 + SIZE) / 2]), 7, SIZE - g[1] - 6)
        cv.paint(arm & ~_rect(g, 10, 12), ARM_RGB, 330.0)

        if frame in lay.occluded:  # arm swept in front of the head camera, ~250 mm away
            mask = _rect(np.array([64.0, 96.0]), 128, 64)
            cv.rgb[mask] = OCCLUDER_RGB
            cv.height[mask] = TABLE_MM[mask] - 250.0
        return cv.rgb, cv.height

    def _draw_primary(self, cv, t, g, carried, event):
        lay, lab, action = self.lay, self.label, self.spec.action
        moving = self.t_manip < t <= self.t_event
        if lab is Label.MISS or t <= self.t_manip:
            pos = lay.primary
        elif moving:
            pos = g - np.array([0.0, 10.0])
        else:
            pos = lay.target
        lifted = 100.0 if (carried and moving) else 0.0
        if action is ActionName.STACK and lab is Label.OVERTURN and event:
            pos = lay.target + np.array([0.0, 16.0])  # toppled off the tower
        if action is ActionName.STACK and lab is not Label.MISS and event and lab is not Label.OVERTURN:
            lifted = 80.0  # resting on the base
        if action is ActionName.PUT_IN_CONTAINER and lab is not Label.MISS and event:
            cv.paint(_rect(pos, 8, 8), PRIMARY_TOP, 60.0)  # mostly hidden inside the bowl
            return
        overturned = lab is Label.OVERTURN and event
        angle = math.pi / 4 if (lab is Label.COLLISION and event) else 0.0
        _draw_box(cv, pos, 14, PRIMARY_TOP, PRIMARY_SIDE, 120.0 + lifted, lying=overturned, angle=angle)


# ---------------------------------------------------------------------------
# audio


def _grains(rng, start, stop, rate, freq, dur, amp, n, ramp=True):
    out = np.zeros(n)
    t = start + rng.exponential(1.0 / rate)
    glen = int(dur * SR)
    win = np.hanning(glen)
    while t < stop:
        i = int(t * SR)
        f = rng.uniform(*freq)
        a = amp * (0.5 + 0.5 * (t - start) / max(stop - start, 1e-6) if ramp else 1.0)
        seg = a * win * np.sin(2 * np.pi * f * np.arange(glen) / SR + rng.uniform(0, 2 * np.pi))
        j = min(i + glen, n)
        if i < n:
            out[i:j] += seg[: j - i]
        t += rng.exponential(1.0 / rate)
    return out


def _decay(n, t0, tau):
    tt = np.arange(n) / SR - t0
    env = np.where(tt >= 0, np.exp(-np.maximum(tt, 0) / tau), 0.0)
    return tt, env


_TAP_HZ = {ActionName.PUSH: 1800.0, ActionName.PICK_PLACE: 1500.0,
           ActionName.PUT_IN_CONTAINER: 900.0, ActionName.STACK: 2400.0}


def _audio(spec: ScenarioSpec, lay: _Layout, label: Label, st: dict) -> np.ndarray:
    n = int(round(lay.duration * SR))
    t = np.arange(n) / SR
    f0 = lay.hum_f0
    hum = sum((0.6 ** k) * np.sin(2 * np.pi * f0 * (k + 1) * t + k) for k in range(5))
    hum *= 0.03 * (1.0 + 0.2 * np.sin(2 * np.pi * 0.7 * t))
    noise_rms = np.sqrt(np.mean(hum ** 2)) / (10 ** (spec.audio_snr_db / 20))
    wave = hum + st["audio"].normal(0.0, noise_rms, n)
    te = lay.onset * lay.duration

    if spec.action is ActionName.POUR:
        stop = te + (2.0 if label is Label.OVERFLOW else 1.0)
        wave += _grains(st["grains"], te, stop, 250.0, (3000, 5000), 0.004, 0.04, n)
        if label is Label.SPILL:
            wave += _grains(st["scatter"], te + 0.2, te + 1.4, 60.0, (800, 1500), 0.008, 0.07, n, ramp=False)
        return wave
    if label is Label.COLLISION:
        _, env = _decay(n, te, 0.06)
        wave += 0.25 * env * st["impulse"].normal(0.0, 1.0, n)
    elif label is Label.OVERTURN:
        tt, env = _decay(n, te, 0.09)
        wave += 0.45 * env * (np.sin(2 * np.pi * 70 * tt) + 0.5 * np.sin(2 * np.pi * 140 * tt))
    elif label is Label.SUCCESS:
        tt, env = _decay(n, te, 0.02)
        wave += 0.15 * env * np.sin(2 * np.pi * _TAP_HZ[spec.action] * tt)
    # a miss makes no contact sound at all
    return wave


# ---------------------------------------------------------------------------
# public API


def _signature(spec: ScenarioSpec) -> Label:
    if spec.confusable_pour and spec.label is Label.SPILL:
        return Label.OVERFLOW
    return spec.label


def generate_episode(spec: ScenarioSpec, episode_id: str | None = None) -> Episode:
    """Render one episode; identical specs give bit-identical episodes."""
    st = _streams(spec.seed)
    lay = _layout(spec, st["layout"])
    sig = _signature(spec)
    vision_label = sig if spec.cue_placement in ("vision_only", "both") else Label.SUCCESS
    audio_label = sig if spec.cue_placement in ("audio_only", "both") else Label.SUCCESS

    scene = _Scene(spec, lay, vision_label, st["particles"])
    ts = np.arange(lay.n_frames) / FPS
    rgb = np.empty((lay.n_frames, SIZE, SIZE, 3), np.uint8)
    depth = np.empty((lay.n_frames, SIZE, SIZE), np.uint16)
    for i, t in enumerate(ts):
        col, height = scene.render(float(t), i)
        col = col + st["pixels"].normal(0.0, spec.pixel_noise, col.shape)
        rgb[i] = np.clip(np.round(col), 0, 255).astype(np.uint8)
        dep = TABLE_MM - height + st["depth"].normal(0.0, spec.depth_noise_mm, height.shape)
        depth[i] = np.clip(np.round(dep), 0, 65535).astype(np.uint16)

    audio = _audio(spec, lay, audio_label, st)
    audio = np.round(np.clip(audio, -1.0, 32767 / 32768) * 32768.0) / 32768.0  # PCM16-exact
    d = lay.duration
    phases = {"approach": (0.0, 0.4 * d), "manipulate": (0.4 * d, 0.75 * d), "retreat": (0.75 * d, d)}
    eid = episode_id or f"{spec.action.value}-{spec.label.value}-{spec.seed}"
    recorder = {"generator": "finonet.synth", "spec": spec.to_dict(), "cue_onset_s": lay.onset * d,
                "occluded_frames": list(lay.occluded)}
    return Episode(eid, spec.action, spec.label, rgb, depth, audio, ts, phases, recorder)


# Benchmark recipes: counts per (action, label).  The default keeps detection
# balanced (120 success / 120 fail) with 24 episodes per failure type.
RECIPES: dict[str, dict[tuple[str, str], int]] = {
    "default": {
        **{(a.value, "success"): 24 for a in ActionName},
        **{(a, "collision"): 6 for a in ("push", "pick_place", "put_in_container", "stack")},
        **{(a, "miss"): 6 for a in ("push", "pick_place", "put_in_container", "stack")},
        ("pour", "overflow"): 24,
        ("pour", "spill"): 24,
        **{(a, "overturn"): 8 for a in ("push", "pick_place", "stack")},
    },
    # stratified splitting still yields a validation episode per success stratum
    "small": {
        ("push", "success"): 8, ("pour", "success"): 8, ("push", "collision"): 4,
        ("pour", "overflow"): 4, ("pour", "spill"): 4, ("stack", "overturn"): 4,
    },
}

# Failure episodes cycle through these placements; half carry cues in both
# modalities, a quarter in vision only and a quarter in audio only.
PLACEMENT_CYCLE = ("both", "vision_only", "both", "audio_only")


def benchmark_specs(counts: dict, seed: int, placement_cycle=PLACEMENT_CYCLE, **spec_kw) -> list[ScenarioSpec]:
    items = []
    for (action, label), k in sorted(counts.items()):
        check_legal(action, label)
        items += [(action, label)] * int(k)
    children = np.random.SeedSequence(int(seed)).spawn(len(items))
    specs, n_fail = [], 0
    for (action, label), child in zip(items, children):
        placement = "both"
        if label != "success":
            placement = placement_cycle[n_fail % len(placement_cycle)]
            n_fail += 1
        specs.append(ScenarioSpec(action, label, cue_placement=placement,
                                  seed=int(child.generate_state(1)[0]), **spec_kw))
    return specs


def generate_benchmark(counts, seed: int, out, jobs: int = 1, **spec_kw) -> Path:
    """Write a dataset root (episode directories + manifest.json) and return its path.

    ``counts`` is either a recipe name or a mapping (action, label) -> count.
    """
    recipe = counts if isinstance(counts, str) else "custom"
    if isinstance(counts, str):
        if counts not in RECIPES:
            raise SchemaViolation(f"unknown recipe {counts!r}; known: {sorted(RECIPES)}")
        counts = RECIPES[counts]
    specs = benchmark_specs(counts, seed, **spec_kw)
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc

    def work(k_spec):
        k, spec = k_spec
        eid = f"ep{k:04d}_{spec.action.value}_{spec.label.value}"
        ep = generate_episode(spec, eid)
        try:
            write_episode(ep, out)
        except OSError as exc:
            raise IoError(f"{out / eid}: {exc}") from exc
        return {"id": eid, **spec.to_dict(), "cue_onset_s": ep.recorder["cue_onset_s"],
                "duration_s": ep.duration, "occluded_frames": ep.recorder["occluded_frames"]}

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        entries = list(pool.map(work, enumerate(specs)))
    manifest = {"recipe": recipe, "seed": int(seed), "n_episodes": len(entries), "episodes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log.info("synth wrote %d episodes to %s", len(entries), out)
    return out


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def counterfactual(spec: ScenarioSpec) -> ScenarioSpec:
    """The success episode sharing this spec's scene and noise."""
    return replace(spec, label=Label.SUCCESS, cue_placement="both")


COMPOUND_SCENARIO = (("pour", "success"), ("put_in_container", "success"), ("push", "overturn"))


def generate_compound(seed: int, steps=COMPOUND_SCENARIO) -> tuple[Episode, list[dict]]:
    """Concatenate several manipulations into one stream.

    Returns the stream (no phase annotation) and one segment record per
    manipulation with its time span, phases relative to the segment start,
    and ground-truth label.
    """
    children = np.random.SeedSequence(int(seed)).spawn(len(steps))
    parts = [generate_episode(ScenarioSpec(a, l, seed=int(c.generate_state(1)[0])), f"compound{k}")
             for k, ((a, l), c) in enumerate(zip(steps, children))]
    rgb, depth, audio, ts, segments = [], [], [], [], []
    offset = 0.0
    for ep in parts:
        span = (ep.n_frames) / FPS
        rgb.append(ep.rgb_frames)
        depth.append(ep.depth_frames)
        pad = int(round(span * SR)) - len(ep.audio)
        audio.append(np.concatenate([ep.audio, np.zeros(max(pad, 0))])[: int(round(span * SR))])
        ts.append(ep.frame_timestamps + offset)
        segments.append({"start_s": offset, "end_s": offset + span, "action": ep.action.value,
                         "label": ep.label.value, "phases": {k: list(v) for k, v in ep.phases.items()}})
        offset += span
    stream = Episode("compound", ActionName.PUSH, Label.SUCCESS, np.concatenate(rgb), np.concatenate(depth),
                     np.concatenate(audio), np.concatenate(ts), None, {"segments": segments})
    return stream, segments


def cut_segments(stream: Episode, segments: list[dict]) -> list[Episode]:
    """Split a stream into per-manipulation episodes using segment records."""
    out = []
    for k, seg in enumerate(segments):
        t0, t1 = float(seg["start_s"]), float(seg["end_s"])
        sel = np.flatnonzero((stream.frame_timestamps >= t0 - 1e-9) & (stream.frame_timestamps < t1 - 1e-9))
        a0, a1 = int(round(t0 * stream.sample_rate)), int(round(t1 * stream.sample_rate))
        phases = seg.get("phases")
        if phases is not None:
            end = max(float(phases["retreat"][1]), float(stream.frame_timestamps[sel[-1]] - t0))
            phases = {**phases, "retreat": (phases["retreat"][0], end)}
        out.append(Episode(f"{stream.id}-seg{k}", seg.get("action", "push"), seg.get("label", "success"),
                           stream.rgb_frames[sel], stream.depth_frames[sel], stream.audio[a0:a1],
                           stream.frame_timestamps[sel] - t0, phases, {"segment": k}))
    return out
