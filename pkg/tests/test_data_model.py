import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finonet.data_model import (LEGAL_PAIRS, ActionName, DatasetIndex, EpisodeRef, Label, derive_detection_label,
                                is_legal, load_episode, make_splits, read_index, scan_dataset, write_episode,
                                write_index)
from finonet.errors import CorruptEpisode, EmptyDataset, MissingModality, SchemaViolation
from scipy.io import wavfile

from conftest import TABLE_COUNTS, make_episode, table_refs


def test_detection_label():
    assert derive_detection_label("success") == "success"
    for lab in ("collision", "miss", "overflow", "spill", "overturn"):
        assert derive_detection_label(lab) == "fail"


def test_legal_pairs():
    assert not is_legal("pour", "overturn")
    assert not is_legal("put_in_container", "overturn")
    assert not is_legal("push", "spill")
    assert is_legal("pour", "overflow")
    assert sum(len(v) for v in LEGAL_PAIRS.values()) == 18
    assert set(TABLE_COUNTS) == {(a.value, l.value) for a, ls in LEGAL_PAIRS.items() for l in ls}


def test_round_trip(tmp_path):
    ep = make_episode(n=120, eid="ep1", action="pour", label="spill", audio_s=9.6)
    write_episode(ep, tmp_path)
    back = load_episode(tmp_path / "ep1")
    assert back.n_frames == 120 and back.label is Label.SPILL and back.action is ActionName.POUR
    assert np.array_equal(back.rgb_frames, ep.rgb_frames)
    assert np.array_equal(back.depth_frames, ep.depth_frames)
    assert back.depth_frames.dtype == np.uint16
    assert np.array_equal(back.audio, ep.audio)
    assert np.array_equal(back.frame_timestamps, ep.frame_timestamps)
    assert back.phases == ep.phases
    # second write of the loaded episode is byte-identical
    write_episode(back, tmp_path / "again")
    for sub in ("rgb/000007.png", "depth/000119.png", "audio.wav", "meta.json"):
        assert (tmp_path / "ep1" / sub).read_bytes() == (tmp_path / "again" / "ep1" / sub).read_bytes()


def test_illegal_meta(tmp_path):
    write_episode(make_episode(eid="bad", action="pour", label="spill"), tmp_path)
    meta = json.loads((tmp_path / "bad" / "meta.json").read_text())
    meta["label"] = "overturn"
    (tmp_path / "bad" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SchemaViolation):
        load_episode(tmp_path / "bad")


def test_frame_count_mismatch(tmp_path):
    write_episode(make_episode(eid="e"), tmp_path)
    (tmp_path / "e" / "depth" / "000019.png").unlink()
    with pytest.raises(CorruptEpisode):
        load_episode(tmp_path / "e")


def test_missing_stream(tmp_path):
    write_episode(make_episode(eid="e"), tmp_path)
    (tmp_path / "e" / "audio.wav").unlink()
    with pytest.raises(MissingModality):
        load_episode(tmp_path / "e")


def test_resampled_audio(tmp_path):
    write_episode(make_episode(eid="e"), tmp_path)
    t = np.arange(8000) / 8000
    wavfile.write(tmp_path / "e" / "audio.wav", 8000, (np.sin(2 * np.pi * 200 * t) * 10000).astype(np.int16))
    ep = load_episode(tmp_path / "e")
    assert len(ep.audio) == 16000


def test_episode_invariants():
    with pytest.raises(CorruptEpisode):
        ep = make_episode()
        ep.frame_timestamps[3] = ep.frame_timestamps[2]
        ep.validate()
    with pytest.raises(SchemaViolation):
        make_episode(phases={"approach": (0, 1), "manipulate": (1.5, 2), "retreat": (2, 2)})
    with pytest.raises(SchemaViolation):
        make_episode(phases={"approach": (0.5, 1), "manipulate": (1, 1.5), "retreat": (1.5, 2)})


def test_scan_dataset(tmp_path):
    for k in range(3):
        write_episode(make_episode(eid=f"e{k}", n=10), tmp_path)
    refs = scan_dataset(tmp_path)
    assert [r.id for r in refs] == ["e0", "e1", "e2"]
    with pytest.raises(EmptyDataset):
        scan_dataset(tmp_path / "e0" / "rgb")


def test_table_split_sizes():
    refs = table_refs()
    assert len(refs) == 324
    sizes = make_splits(refs, 7).sizes()
    assert sum(sizes.values()) == 324
    assert abs(sizes["train"] - 227) <= 18 and abs(sizes["val"] - 32) <= 18 and abs(sizes["test"] - 65) <= 18
    # frozen from an exact-fraction largest-remainder count over the 18 strata
    assert sizes == {"train": 229, "val": 30, "test": 65}


def test_single_stratum_exact_ratio():
    refs = [EpisodeRef(f"e{k}", ActionName.PUSH, Label.SUCCESS) for k in range(10)]
    assert make_splits(refs, 0).sizes() == {"train": 7, "val": 1, "test": 2}


def test_split_deterministic_and_seed_dependent():
    refs = table_refs()
    a, b = make_splits(refs, 3), make_splits(list(reversed(refs)), 3)
    assert a.split_assignment == b.split_assignment
    assert make_splits(refs, 4).split_assignment != a.split_assignment


def test_split_empty():
    with pytest.raises(EmptyDataset):
        make_splits([], 0)


def test_unstratified_flag():
    idx = make_splits(table_refs(), 1, stratify=False)
    assert idx.sizes() == {"train": 227, "val": 32, "test": 65}
    assert not idx.stratified


def test_index_json_round_trip(tmp_path):
    idx = make_splits(table_refs(), 5)
    write_index(idx, tmp_path / "index.json")
    back = read_index(tmp_path / "index.json")
    assert back.split_assignment == idx.split_assignment and back.seed == 5
    assert isinstance(back, DatasetIndex)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.sampled_from(sorted(TABLE_COUNTS)), st.integers(1, 40), min_size=1),
       st.integers(0, 2**31))
def test_split_properties(counts, seed):
    idx = make_splits(table_refs(counts), seed)
    assert set(idx.split_assignment) == {r.id for r in idx.episodes}
    per = Counter()
    for r in idx.episodes:
        per[(r.action, r.label, idx.split_assignment[r.id])] += 1
    for (a, l), n in counts.items():
        a, l = ActionName(a), Label(l)
        train, val, test = (per[(a, l, s)] for s in ("train", "val", "test"))
        assert train + val + test == n
        for got, ratio in ((train, 0.7), (val, 0.1), (test, 0.2)):
            assert abs(got - ratio * n) < 1.0 + 1e-9
        if n >= 3:
            assert train >= 1 and test >= 1
        if n >= 10:
            assert 0.6 <= train / n <= 0.8
