import numpy as np
import pytest

from finonet.data_model import Episode, EpisodeRef, ActionName, Label

# Per-action success / failure-type counts of the reference recording campaign;
# failure totals per action match the action table, 324 episodes in all.
TABLE_COUNTS = {
    ("push", "success"): 30, ("push", "collision"): 2, ("push", "miss"): 6, ("push", "overturn"): 23,
    ("pick_place", "success"): 15, ("pick_place", "collision"): 23, ("pick_place", "miss"): 7,
    ("pick_place", "overturn"): 2,
    ("pour", "success"): 49, ("pour", "overflow"): 25, ("pour", "spill"): 21,
    ("put_in_container", "success"): 44, ("put_in_container", "collision"): 33,
    ("put_in_container", "miss"): 7,
    ("stack", "success"): 13, ("stack", "collision"): 19, ("stack", "miss"): 2, ("stack", "overturn"): 3,
}


def table_refs(counts=TABLE_COUNTS):
    refs = []
    for (a, l), n in sorted(counts.items()):
        refs += [EpisodeRef(f"{a}-{l}-{k:03d}", ActionName(a), Label(l)) for k in range(n)]
    return refs


def make_episode(n=20, size=16, eid="ep", action="push", label="success", phases="auto", depth_mm=1500,
                 fps=10.0, seed=0, audio_s=None):
    rng = np.random.default_rng(seed)
    ts = np.arange(n) / fps
    dur = n / fps
    if phases == "auto":
        phases = {"approach": (0.0, 0.4 * dur), "manipulate": (0.4 * dur, 0.6 * dur), "retreat": (0.6 * dur, dur)}
    audio_s = dur if audio_s is None else audio_s
    return Episode(
        eid, action, label,
        rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8),
        np.full((n, size, size), depth_mm, dtype=np.uint16),
        np.round(rng.normal(0, 0.05, int(audio_s * 16000)) * 32768) / 32768,
        ts, phases, {"source": "test"},
    )


@pytest.fixture
def episode():
    return make_episode()


TINY_LABELS = [("push", "success")] * 10 + [("push", "collision")] * 5 + [("pour", "spill")] * 5


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """20 small random episodes on disk (content carries no signal)."""
    from finonet.data_model import write_episode

    root = tmp_path_factory.mktemp("tiny")
    for k, (a, l) in enumerate(TINY_LABELS):
        write_episode(make_episode(n=20, size=16, eid=f"t{k:02d}", action=a, label=l, seed=k), root)
    return root


@pytest.fixture(scope="session")
def tiny_pipeline():
    from finonet.audio import AudioFrontEndConfig
    from finonet.pipeline import PipelineConfig
    from finonet.vision import VisionConfig

    return PipelineConfig(VisionConfig(size=16), AudioFrontEndConfig(t_a=16))


TINY_MODEL = dict(channel_plan=(2, 2, 2), fusion_hidden=8, audio_filters=4, audio_kernel=4, audio_hidden=8)
