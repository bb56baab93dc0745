import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from finonet import evaluation as ev
from finonet.data_model import DatasetIndex, scan_dataset
from finonet.errors import ConfigMismatch
from finonet.network import ModelConfig
from finonet.synth import cut_segments, generate_compound
from finonet.training import TrainConfig, train

from conftest import TINY_MODEL


@pytest.fixture(scope="module")
def tiny_index(tiny_root):
    refs = scan_dataset(tiny_root)
    # every class in every split: ids t00-t09 success, t10-t14 collision, t15-t19 spill
    test = {"t00", "t01", "t10", "t11", "t15", "t16"}
    val = {"t02", "t12", "t17"}
    assignment = {r.id: "test" if r.id in test else "val" if r.id in val else "train" for r in refs}
    return DatasetIndex(tuple(refs), assignment, 0, False)


@pytest.fixture(scope="module")
def ckpts(tiny_index, tiny_pipeline, tmp_path_factory):
    out = {}
    root = tmp_path_factory.mktemp("ckpts")
    for task, mods in (("detection", "rgb,d,a"), ("standalone", "rgb,d,a"), ("cascaded", "rgb,d,a"),
                       ("detection", "a")):
        cfg = ModelConfig(modalities=mods, task=task, **TINY_MODEL)
        rep, _ = train(cfg, tiny_index, TrainConfig(learning_rate=1e-2, epochs=2, batch_size=4), tiny_pipeline,
                       out_dir=root / f"{task}-{mods}")
        out[(task, mods)] = rep.checkpoint
    return out


def test_evaluate_reports_test_split(ckpts, tiny_index):
    rep, preds = ev.evaluate(ckpts[("detection", "rgb,d,a")], tiny_index)
    assert rep.support.tolist() == [2, 4]
    assert [p["id"] for p in preds] == ["t00", "t01", "t10", "t11", "t15", "t16"]
    assert all(abs(sum(p["probs"]) - 1) < 1e-5 for p in preds)


def test_task_mismatch(ckpts, tiny_index):
    with pytest.raises(ConfigMismatch):
        ev.evaluate(ckpts[("detection", "rgb,d,a")], tiny_index, task="standalone")


def test_confusion_orders(ckpts, tiny_index, tmp_path):
    std = ev.confusion_analysis(ckpts[("standalone", "rgb,d,a")], tiny_index, "standalone", tmp_path / "s")
    assert std.classes == ("success", "collision", "miss", "overflow", "spill", "overturn")
    assert std.confusion.shape == (6, 6)
    casc = ev.confusion_analysis(ckpts[("cascaded", "rgb,d,a")], tiny_index, "cascaded", tmp_path / "c")
    assert "success" not in casc.classes and casc.confusion.shape == (5, 5)
    assert casc.confusion.sum() == 4
    for d in ("s", "c"):
        assert (tmp_path / d / "confusion.png").stat().st_size > 0
        rows = (tmp_path / d / "confusion.csv").read_text().splitlines()
        assert len(rows) == (7 if d == "s" else 6)
    with pytest.raises(ConfigMismatch):
        ev.confusion_analysis(ckpts[("detection", "rgb,d,a")], tiny_index, "cascaded")


def test_failure_rows_of_standalone_matrix(ckpts, tiny_index):
    rep, preds = ev.evaluate(ckpts[("standalone", "rgb,d,a")], tiny_index)
    failures = [p for p in preds if p["true"] != "success"]
    acc = np.mean([p["pred"] == p["true"] for p in failures])
    rows = rep.confusion[1:]
    assert acc == pytest.approx(np.trace(rep.confusion[1:, 1:]) / rows.sum())


def test_ablations(ckpts, tiny_index, tmp_path):
    rows = ev.evaluate_ablations(tiny_index, {"RGB-D-A": ckpts[("detection", "rgb,d,a")],
                                              "A": ckpts[("detection", "a")]}, "detection")
    assert [r["variant"] for r in rows] == ["A", "RGB-D-A"]
    path = ev.write_ablation_table({"detection": rows}, tmp_path / "t.csv")
    assert path.read_text().splitlines()[0] == "variant,detection_precision,detection_recall,detection_f1"
    with pytest.raises(ConfigMismatch):
        ev.evaluate_ablations(tiny_index, {"RGB": ckpts[("detection", "rgb,d,a")]}, "detection")
    with pytest.raises(ConfigMismatch):
        ev.evaluate_ablations(tiny_index, {"RGB-D-A": ckpts[("standalone", "rgb,d,a")]}, "detection")


def test_completion_curve(ckpts, tiny_index, tmp_path):
    ck = ckpts[("detection", "rgb,d,a")]
    curve = ev.completion_rate_analysis(ck, tiny_index, (1.0, 0.25, 0.5, 0.75), tmp_path)
    assert curve.x == [0.25, 0.5, 0.75, 1.0]
    full, _ = ev.evaluate(ck, tiny_index)
    # 20 frames: a quarter leaves 5 frames, too few to sample 8 -> missing point
    assert curve.reports[0] is None and curve.f1[0] is None
    assert curve.f1[-1] == full.macro_f1
    assert (tmp_path / "curves.csv").read_text().count("\n") == 5
    assert (tmp_path / "curves.png").exists()
    with pytest.raises(ValueError):
        ev.completion_rate_analysis(ck, tiny_index, (0.0,))


@given(st.floats(0.0, 1.0), st.integers(1, 60))
def test_summarize_identical_scores_have_zero_std(x, n):
    assert ev.summarize([x] * n)["std"] == 0.0


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60))
def test_summarize_matches_numpy(vals):
    s = ev.summarize(vals)
    assert s["mean"] == pytest.approx(np.mean(vals), abs=1e-12)
    assert s["std"] == pytest.approx(np.std(vals), abs=1e-12)


def test_resampling_variance(ckpts, tiny_index, tmp_path):
    ck = ckpts[("detection", "rgb,d,a")]
    even = ev.resampling_variance(ck, tiny_index, n_resamples=5, mode="even")
    assert even["f1"]["std"] == 0.0
    a = ev.resampling_variance(ck, tiny_index, n_resamples=5, seed=3, out_dir=tmp_path)
    b = ev.resampling_variance(ck, tiny_index, n_resamples=5, seed=3)
    assert a["f1"] == b["f1"] and len(a["f1"]["values"]) == 5
    assert json.loads((tmp_path / "variance.json").read_text())["n_resamples"] == 5


def _rigged(path, verdict):
    lm = ev.load_model(path)
    with torch.no_grad():
        lm.model.head.fc2.weight.zero_()
        lm.model.head.fc2.bias.copy_(torch.tensor([5.0, -5.0] if verdict == "success" else [-5.0, 5.0]))
    return lm


def test_predict_gating(ckpts):
    stream, segments = generate_compound(1)
    parts = cut_segments(stream, segments)
    cls = ckpts[("cascaded", "rgb,d,a")]
    # pipelines of the tiny models use 16x16 frames; the compound stream is 128x128 and is resized
    ok = ev.predict_on_demand(parts, _rigged(ckpts[("detection", "rgb,d,a")], "success"), cls)
    assert len(ok) == 3
    assert all(not r.classifier_invoked and r.classification == "success" for r in ok)
    assert all(r.class_probs is None and r.latency_ms > 0 for r in ok)
    bad = ev.predict_on_demand(parts, _rigged(ckpts[("detection", "rgb,d,a")], "fail"), cls)
    assert all(r.classifier_invoked and r.classification in ("collision", "miss", "overflow", "spill", "overturn")
               for r in bad)
    assert all(len(r.class_probs) == 5 for r in bad)
    with pytest.raises(ConfigMismatch):
        ev.predict_on_demand(parts, ckpts[("standalone", "rgb,d,a")])


def test_predict_standalone_mode(ckpts):
    stream, segments = generate_compound(2)
    res = ev.predict_on_demand(cut_segments(stream, segments)[:1], ckpts[("detection", "rgb,d,a")],
                               ckpts[("standalone", "rgb,d,a")], mode="standalone")
    assert res[0].classifier_invoked and len(res[0].class_probs) == 6


def test_confusable_pour_concentrates_confusion():
    from finonet.audio import AudioFrontEndConfig
    from finonet.data_model import EpisodeRef
    from finonet.metrics import compute_metrics
    from finonet.pipeline import FeatureCache, PipelineConfig, episode_inputs
    from finonet.synth import ScenarioSpec, generate_episode
    from finonet.training import predict_logits
    from finonet.vision import VisionConfig

    pipe = PipelineConfig(VisionConfig(size=8), AudioFrontEndConfig(t_a=256))
    cache = FeatureCache(pipe)
    kinds = [("push", "collision"), ("push", "miss"), ("push", "overturn"), ("pour", "overflow"), ("pour", "spill")]
    refs, assignment = [], {}
    for a, l in kinds:
        for k in range(14):
            spec = ScenarioSpec(a, l, confusable_pour=True, seed=1000 + k)
            ep = generate_episode(spec, f"{l}{k:02d}")
            cache.put(ep.id, episode_inputs(ep, pipe))
            refs.append(EpisodeRef(ep.id, ep.action, ep.label))
            assignment[ep.id] = "train" if k < 6 else "val" if k < 8 else "test"
    index = DatasetIndex(tuple(refs), assignment, 0, True)
    # dropout off: with 30 training clips the 0.4 rate keeps the small audio net from fitting at all
    cfg = ModelConfig(modalities="a", task="cascaded", audio_filters=16, audio_hidden=16, dropout=0.0)
    _, model = train(cfg, index, TrainConfig(learning_rate=3e-3, epochs=40, batch_size=8), pipe, cache=cache)
    test = index.split("test")
    pred = predict_logits(model, [cache.get(r) for r in test]).argmax(1)
    rep = compute_metrics([r.label.value for r in test], [model_classes[p] for p in pred], model_classes)
    cm = rep.confusion
    o, s = model_classes.index("overflow"), model_classes.index("spill")
    off = cm.sum() - np.trace(cm)
    block = cm[o, s] + cm[s, o]
    assert off > 0
    assert block / off >= 0.75, cm


model_classes = ("collision", "miss", "overflow", "spill", "overturn")
