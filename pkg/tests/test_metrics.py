import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from _oracles import brute_iou, brute_match
from conftest import make_dataset
from istdkd import TAGS
from istdkd.errors import DataError, ShapeError
from istdkd.metrics import (
    Counts, attention_table, iou, match_targets, niou, pd_fa, report_from_predictions, write_attention_csv,
)

masks16 = hnp.arrays(bool, (16, 16), elements=st.booleans())


def test_iou_examples():
    m = np.zeros((4, 4), bool)
    m[0, :3] = True
    assert iou(m, m) == 1.0
    assert iou(m, np.roll(m, 2, axis=0)) == 0.0
    a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
    a[0, :4] = True
    b[0, 2:4] = True
    b[1, :2] = True
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_iou_shape_error():
    with pytest.raises(ShapeError):
        iou(np.zeros((3, 3)), np.zeros((3, 4)))


def test_niou_examples(rng):
    m = np.ones((4, 4), bool)
    assert niou([m, m], [m, m]) == 1.0
    assert niou([m, m], [m, ~m]) == 0.5
    pairs = [(rng.random((8, 8)) > 0.5, rng.random((8, 8)) > 0.5) for _ in range(3)]
    assert niou(*zip(*pairs)) == pytest.approx(np.mean([brute_iou(p, g) for p, g in pairs]))
    with pytest.raises(ValueError):
        niou([], [])


def test_pd_fa_examples():
    pred, gt = np.zeros((20, 20), bool), np.zeros((20, 20), bool)
    pred[9:12, 9:12] = True
    gt[10:13, 9:12] = True
    assert pd_fa([pred], [gt]) == (1.0, 0.0)
    pred, gt = np.zeros((100, 100), bool), np.zeros((100, 100), bool)
    gt[50, 50] = pred[50, 50] = True
    pred[5, 5:10] = True
    pd, fa = pd_fa([pred], [gt])
    assert pd == 1.0 and fa * 1e6 == pytest.approx(500)
    assert pd_fa([np.zeros((8, 8), bool)], [gt[:8, :8] | np.eye(8, dtype=bool)]) == (0.0, 0.0)


def test_each_prediction_matches_one_target():
    gt = np.zeros((20, 20), bool)
    gt[5, 5] = gt[5, 8] = True
    pred = np.zeros((20, 20), bool)
    pred[5, 6:8] = True
    assert match_targets(pred, gt) == (2, 1, 0)


@settings(max_examples=200, deadline=None)
@given(masks16, masks16)
def test_metrics_match_brute_force(pred, gt):
    assert iou(pred, gt) == brute_iou(pred, gt)
    assert match_targets(pred, gt) == brute_match(pred, gt)


@settings(max_examples=100, deadline=None)
@given(masks16, masks16)
def test_iou_symmetric(pred, gt):
    assert iou(pred, gt) == iou(gt, pred)


@settings(max_examples=100, deadline=None)
@given(masks16, masks16, st.integers(0, 255))
def test_iou_monotone(pred, gt, k):
    r, c = divmod(k, 16)
    if not gt[r, c] or pred[r, c]:
        return
    more = pred.copy()
    more[r, c] = True
    assert iou(more, gt) >= iou(pred, gt)


@settings(max_examples=100, deadline=None)
@given(masks16, masks16, st.integers(0, 4), st.integers(0, 4))
def test_pd_monotone_in_threshold(pred, gt, a, b):
    lo, hi = sorted((a, b))
    assert pd_fa([pred], [gt], lo)[0] <= pd_fa([pred], [gt], hi)[0]


def test_fa_ignores_gt_inside_matched_region():
    pred = np.zeros((16, 16), bool)
    pred[4:7, 4:7] = True
    pred[12, 12] = True
    gt1 = np.zeros((16, 16), bool)
    gt1[5, 5] = True
    gt2 = gt1.copy()
    gt2[4:7, 5] = True
    assert pd_fa([pred], [gt1])[1] == pd_fa([pred], [gt2])[1] == 1 / 256


def test_pooling_consistency():
    ds = make_dataset(n_train=12, n_test=40, size=32, seed=3)
    samples = ds.subset("test")
    rng = np.random.default_rng(0)
    preds = [s.gt_mask ^ (rng.random(s.gt_mask.shape) > 0.97) for s in samples]
    rep = report_from_predictions(preds, samples)
    overall = rep.rows["Overall"]
    assert overall["n"] == sum(rep.rows[t]["n"] for t in TAGS) == 40
    inter = sum(int((p & s.gt_mask).sum()) for p, s in zip(preds, samples))
    union = sum(int((p | s.gt_mask).sum()) for p, s in zip(preds, samples))
    assert overall["IoU"] == 100 * (inter / union)
    assert overall["nIoU"] == pytest.approx(100 * np.mean([brute_iou(p, s.gt_mask) for p, s in zip(preds, samples)]))
    tot = [brute_match(p, s.gt_mask) for p, s in zip(preds, samples)]
    assert overall["Pd"] == 100 * (sum(t[1] for t in tot) / sum(t[0] for t in tot))
    assert overall["Fa"] == 1e6 * (sum(t[2] for t in tot) / sum(s.gt_mask.size for s in samples))


def test_single_tag_overall_equals_tag(small_dataset):
    salient = [s for s in small_dataset.subset("train") if s.tag == "Salient"]
    rep = report_from_predictions([s.gt_mask for s in salient], salient)
    assert list(rep.rows) == ["Overall", "Salient"]
    assert rep.rows["Overall"] == rep.rows["Salient"]
    assert rep.rows["Overall"]["IoU"] == rep.rows["Overall"]["nIoU"] == rep.rows["Overall"]["Pd"] == 100
    assert rep.rows["Overall"]["Fa"] == 0


def test_unknown_tag(small_dataset):
    s = small_dataset.subset("test")[0]
    bad = type(s)(**{**s.__dict__, "tag": "Mystery"})
    with pytest.raises(DataError):
        report_from_predictions([s.gt_mask], [bad])


def test_counts_merge():
    a, b = Counts(), Counts()
    m = np.eye(4, dtype=bool)
    a.add(m, m)
    b.add(m, ~m)
    merged = a.merge(b)
    assert merged.images == 2 and merged.row()["nIoU"] == 50.0


def test_report_csv(tmp_path, small_dataset):
    samples = small_dataset.subset("test")
    rep = report_from_predictions([s.gt_mask for s in samples], samples)
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "split,tag,IoU,nIoU,Pd,Fa,n"
    assert "Overall" in rep.table()


def test_attention_table_cases(tmp_path):
    u = np.full(16, 1 / 16)
    t = attention_table([u, u, u], ["Salient"] * 3)
    assert t["Salient"]["H_norm_mean"] == pytest.approx(100) and t["Salient"]["H_norm_std"] == pytest.approx(0)
    one = np.eye(4)[0]
    half = np.array([0.5, 0.5, 0, 0])
    t = attention_table([one, half], ["Faint", "Camouflaged"])
    assert t["Faint"]["H_norm_std"] == 0 and t["Faint"]["EffN_mean"] == pytest.approx(1)
    assert t["Camouflaged"]["H_norm_mean"] == pytest.approx(50) and t["Camouflaged"]["EffN_mean"] == pytest.approx(2)
    write_attention_csv(tmp_path / "a.csv", t)
    assert (tmp_path / "a.csv").read_text().splitlines()[0].startswith("tag,H_norm_mean")


def test_attention_table_brute_force(rng):
    vecs = [rng.dirichlet(np.ones(6)) for _ in range(7)]
    tags = ["Salient", "Faint"] * 3 + ["Salient"]
    t = attention_table(vecs, tags)
    sal = [v for v, g in zip(vecs, tags) if g == "Salient"]
    ent = [-(v * np.log(v)).sum() for v in sal]
    assert t["Salient"]["n"] == 4
    assert t["Salient"]["H_norm_mean"] == pytest.approx(100 * np.mean(ent) / np.log(6))
    assert t["Salient"]["EffN_std"] == pytest.approx(np.std(np.exp(ent)))
    assert t["Salient"]["p_max_mean"] == pytest.approx(100 * np.mean([v.max() for v in sal]))
