import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hpcfnet.data import ImagePair
from hpcfnet.metrics import ConfusionCounts, aggregate, confusion, evaluate, f_score, parse_report
from hpcfnet.model import HPCFNet, ModelConfig, predict_from_logits
from hpcfnet.tensor import ShapeError, Tensor


def tally(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def f1_oracle(tp, fp, fn):
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 2 * p * r / (p + r)


class TestConfusion:
    def test_agreement(self, rng):
        gt = rng.integers(0, 2, (6, 6))
        c = confusion(gt, gt)
        assert c.fp == c.fn == 0 and c.total == 36

    def test_disagreement(self, rng):
        gt = rng.integers(0, 2, (6, 6))
        c = confusion(1 - gt, gt)
        assert c.tp == c.tn == 0

    def test_tally_oracle(self):
        rng = np.random.default_rng(16)
        pred, gt = rng.integers(0, 2, (16, 16)), rng.integers(0, 2, (16, 16))
        c = confusion(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == tally(pred, gt)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))


class TestFScore:
    def test_eight_two_two(self):
        rep = f_score(ConfusionCounts(tp=8, fp=2, fn=2, tn=0))
        assert rep.precision == pytest.approx(0.8) and rep.recall == pytest.approx(0.8)
        assert rep.f_score == pytest.approx(0.8)

    def test_perfect(self):
        assert f_score(ConfusionCounts(tp=5, tn=3)).f_score == 1.0

    def test_zero_tp(self):
        rep = f_score(ConfusionCounts(tp=0, fp=3, fn=1))
        assert (rep.precision, rep.recall, rep.f_score) == (0.0, 0.0, 0.0)

    def test_all_empty(self):
        assert f_score(ConfusionCounts(tn=10)).f_score == 0.0

    def test_beta(self):
        rep = f_score(ConfusionCounts(tp=1, fp=1, fn=0), beta=2.0)
        assert rep.f_score == pytest.approx(5 * 0.5 * 1 / (4 * 0.5 + 1))

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            f_score(ConfusionCounts(tp=1), beta=0)

    @given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
    def test_symmetric(self, tp, fp, fn):
        assert f_score(ConfusionCounts(tp, fp, fn)).f_score == pytest.approx(
            f_score(ConfusionCounts(tp, fn, fp)).f_score, abs=1e-15)

    @given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
    def test_monotone_in_tp(self, tp, fp, fn):
        assert f_score(ConfusionCounts(tp + 1, fp, fn)).f_score >= f_score(ConfusionCounts(tp, fp, fn)).f_score

    @given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500))
    def test_between_precision_and_recall(self, tp, fp, fn):
        rep = f_score(ConfusionCounts(tp, fp, fn))
        assert min(rep.precision, rep.recall) - 1e-12 <= rep.f_score <= max(rep.precision, rep.recall) + 1e-12


class TestAggregate:
    def test_micro_two_thirds(self):
        # image 1: TP 1, FN 1; image 2: TP 1, FP 1
        preds = [np.array([1, 0, 0]), np.array([1, 1, 0])]
        gts = [np.array([1, 1, 0]), np.array([1, 0, 0])]
        rep = aggregate(preds, gts, ids=["a", "b"])
        assert rep.f_score == pytest.approx(2 / 3)
        assert [r["id"] for r in rep.per_image] == ["a", "b"]

    def test_random_maps_match_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            h, w = (int(v) for v in rng.integers(1, 7, 2))
            pred, gt = rng.integers(0, 2, (h, w)), rng.integers(0, 2, (h, w))
            tp, fp, fn, tn = tally(pred, gt)
            rep = aggregate([pred], [gt])
            assert (rep.counts.tp, rep.counts.fp, rep.counts.fn, rep.counts.tn) == (tp, fp, fn, tn)
            assert rep.f_score == pytest.approx(f1_oracle(tp, fp, fn), abs=1e-15)

    def test_report_formats(self):
        rep = aggregate([np.array([[1, 0]])], [np.array([[1, 1]])], ids=["img"])
        lines = rep.to_jsonl().splitlines()
        assert json.loads(lines[0])["id"] == "img"
        agg = parse_report(rep.to_jsonl())
        assert agg["tp"] == 1 and agg["fn"] == 1 and agg["f_score"] == pytest.approx(2 / 3)
        assert "aggregate" in rep.table().splitlines()[-1]

    def test_parse_missing_aggregate(self):
        with pytest.raises(ValueError):
            parse_report('{"id": "x"}\n')


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_f_score_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    rep = aggregate([rng.integers(0, 2, (4, 4))], [rng.integers(0, 2, (4, 4))])
    assert 0.0 <= rep.f_score <= 1.0


@pytest.fixture(scope="module")
def model():
    return HPCFNet(ModelConfig(width_scale=1 / 16, input_size=(32, 32), dtype="float64", seed=1))


class TestEvaluate:
    def _pairs(self, model, n):
        rng = np.random.default_rng(3)
        pairs = []
        for i in range(n):
            t0, t1 = rng.random((3, 32, 32)), rng.random((3, 32, 32))
            logits = model(Tensor(t0[None]), Tensor(t1[None]), "eval").data
            pairs.append(ImagePair(t0, t1, predict_from_logits(logits)[0].astype(np.uint8), f"p{i}"))
        return pairs

    def test_self_labelled_is_perfect(self, model):
        pairs = self._pairs(model, 1)
        assert pairs[0].mask.any()
        assert evaluate(model, pairs).f_score == 1.0

    def test_batched_equals_single(self, model):
        pairs = self._pairs(model, 3)
        for p in pairs:
            p.mask[:4] = 1
        a, b = evaluate(model, pairs, batch_size=2), evaluate(model, pairs, batch_size=1)
        assert a.counts == b.counts and len(a.per_image) == 3

    def test_empty(self, model):
        with pytest.raises(ValueError):
            evaluate(model, [])
