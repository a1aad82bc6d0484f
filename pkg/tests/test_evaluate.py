import numpy as np
import pytest
import torch
from sklearn.metrics import silhouette_score

from ctpa_pe.errors import DataError
from ctpa_pe.evaluate import (
    StudyRecord,
    attention_ratio,
    compute_cam,
    embed_bags_2d,
    evaluate_predictions,
    roc_auc,
)
from ctpa_pe.data import StudyLabels
from ctpa_pe.labels import STUDY_LABELS
from ctpa_pe.stage1 import Stage1Model

from oracles import mann_whitney_auc


def test_auc_examples():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]).auc == 1.0
    assert roc_auc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]).auc == 0.0
    assert roc_auc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]).auc == 0.5
    with pytest.raises(DataError, match="undefined"):
        roc_auc([1, 1, 1], [0.1, 0.2, 0.3])


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.uniform(0, 1, n)
        assert roc_auc(y, s).auc == pytest.approx(mann_whitney_auc(y.tolist(), s.tolist()), abs=1e-12)


def test_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 50)
    s = rng.uniform(0.01, 0.99, 50)
    base = roc_auc(y, s).auc
    assert roc_auc(y, np.log(s / (1 - s))).auc == pytest.approx(base, abs=1e-12)
    assert roc_auc(y, s ** 3 + 7).auc == pytest.approx(base, abs=1e-12)


def test_roc_endpoints():
    rng = np.random.default_rng(2)
    r = roc_auc(rng.integers(0, 2, 30) | np.eye(30, dtype=int)[0], rng.uniform(size=30))
    assert (r.fpr[0], r.tpr[0], r.fpr[-1], r.tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(r.fpr) >= 0) and np.all(np.diff(r.tpr) >= 0)


def _record(sid, neg_prob, image):
    probs = np.full(9, 0.1)
    probs[0] = neg_prob
    return StudyRecord(sid, probs, probs.copy(), np.asarray(image, float), np.full(len(image), 1 / len(image)))


def _labels(pe, n=2):
    study = {k: 0 for k in STUDY_LABELS}
    study["negative_for_pe" if not pe else "leftsided"] = 1
    if pe:
        study["rvlv_lt_1"] = 1
    return StudyLabels(np.r_[1, np.zeros(n - 1)] if pe else np.zeros(n), study)


def test_evaluate_predictions_rows():
    recs = [_record("a", 0.9, [0.1, 0.2]), _record("b", 0.2, [0.9, 0.1]), _record("c", 0.7, [0.3, 0.4])]
    labs = {"a": _labels(False), "b": _labels(True), "c": _labels(False)}
    report = evaluate_predictions(recs, labs)
    assert report.auc("pe_present") == 1.0
    rows = {r["label"]: r for r in report.rows}
    assert rows["chronic"]["auc"] is None and rows["chronic"]["n_pos"] == 0
    assert "chronic,skipped,0,3" in report.to_csv()
    assert report.auc("pe_present_on_image") == pytest.approx(1.0)


def test_single_class_pe_split_is_error():
    recs = [_record("a", 0.9, [0.1]), _record("b", 0.8, [0.2])]
    with pytest.raises(DataError, match="undefined AUC"):
        evaluate_predictions(recs, {"a": _labels(False, 1), "b": _labels(False, 1)})


def test_attention_ratio():
    rec = StudyRecord("a", np.zeros(9), np.zeros(9), np.zeros(4), np.array([0.4, 0.4, 0.1, 0.1]))
    assert attention_ratio([rec], {"a": StudyLabels([1, 1, 0, 0], _labels(True).study)}) == pytest.approx(4.0)


def test_cam_shapes_and_range():
    torch.manual_seed(0)
    model = Stage1Model("small_cnn", embed_dim=16, image_size=(32, 32))
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    cams = compute_cam(model, x)
    assert len(cams) == 2
    for c in cams:
        assert c.overlay.shape == (32, 32) and c.heatmap.min() >= 0
        assert 0.0 <= c.overlay.min() and c.overlay.max() <= 1.0
    single = compute_cam(model, x[0])
    np.testing.assert_allclose(single.overlay, cams[0].overlay, atol=1e-6)


def test_cam_constant_input_is_flat():
    torch.manual_seed(0)
    model = Stage1Model("small_cnn", embed_dim=16, image_size=(32, 32))
    cam = compute_cam(model, np.zeros((3, 32, 32), np.float32))
    assert cam.upsampled.min() >= 0
    assert np.ptp(cam.upsampled) <= 1e-5 * max(1.0, cam.upsampled.max())


def _clusters(seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 10, (3, 8))
    x = np.concatenate([c + rng.normal(0, 0.5, (15, 8)) for c in centers])
    return x, np.repeat(np.arange(3), 15)


@pytest.mark.parametrize("method", ["tsne", "pca"])
def test_bag_embedding(method):
    x, y = _clusters()
    a = embed_bags_2d(x, seed=3, method=method)
    b = embed_bags_2d(x, seed=3, method=method)
    assert a.shape == (45, 2)
    np.testing.assert_allclose(a, b)
    assert silhouette_score(a, y) > 0.5
