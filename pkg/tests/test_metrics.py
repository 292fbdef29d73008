import csv
import json

import numpy as np
import pytest

from jpave.Classes import Prediction
from jpave.Classes import ProductInstance
from jpave.Exceptions import DataError
from jpave.Metrics import Scores
from jpave.Metrics import evaluate
from jpave.Metrics import instance_acc
from jpave.Metrics import joint_acc
from jpave.Metrics import joint_f1
from jpave.Metrics import micro_f1
from jpave.Metrics import partitioned_f1
from jpave.Metrics import per_attribute_scores

UNIVERSE = [(a, v) for a in ("color", "material", "style") for v in ("x", "y", "z")]


def _random_sets(rng, n_instances):
    def draw():
        k = int(rng.integers(0, 5))
        return {UNIVERSE[int(i)] for i in rng.choice(len(UNIVERSE), size=k, replace=False)}

    ids = [f"i{k}" for k in range(n_instances)]
    gold = {i: draw() for i in ids}
    pred = {}
    for i in ids:
        # mix exact copies in so joint accuracy is not always zero
        pred[i] = set(gold[i]) if rng.random() < 0.3 else draw()
    return pred, gold


def _brute_micro(pred, gold):
    crt = sum(1 for i in gold for x in pred[i] if x in gold[i])
    n_pred = sum(len(pred[i]) for i in gold)
    n_gold = sum(len(gold[i]) for i in gold)
    p = crt / n_pred if n_pred else 0.0
    r = crt / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _brute_instance(pred, gold):
    jacc = iacc = jf1 = 0.0
    for i in gold:
        p, g = pred[i], gold[i]
        jacc += 1.0 if p == g else 0.0
        crt = len([x for x in p if x in g])
        iacc += crt / len(g) if g else (1.0 if not p else 0.0)
        if not p and not g:
            jf1 += 1.0
        else:
            prec = crt / len(p) if p else 0.0
            rec = crt / len(g) if g else 0.0
            jf1 += 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    n = len(gold)
    return jacc / n, iacc / n, jf1 / n


def test_hand_case_micro_f1():
    pred = {"a": {("color", "x"), ("color", "y"), ("style", "z")}}
    gold = {"a": {("color", "x"), ("color", "y"), ("material", "x"), ("material", "y")}}
    precision, recall, f1 = micro_f1(pred, gold)
    assert precision == pytest.approx(2 / 3, abs=1e-12)
    assert recall == pytest.approx(1 / 2, abs=1e-12)
    assert f1 == pytest.approx(4 / 7, abs=1e-12)


def test_micro_f1_conventions():
    gold = {"a": {("color", "x")}}
    assert micro_f1(gold, gold) == (1.0, 1.0, 1.0)
    assert micro_f1({"a": set()}, gold) == (0.0, 0.0, 0.0)
    assert Scores().f1 == 0.0


def test_value_under_wrong_attribute_is_wrong():
    assert micro_f1({"a": {("material", "x")}}, {"a": {("color", "x")}}) == (0.0, 0.0, 0.0)


def test_mismatched_ids_and_empty_sets():
    with pytest.raises(DataError):
        micro_f1({"a": set()}, {"b": set()})
    with pytest.raises(DataError):
        joint_acc({}, {})


def test_instance_hand_cases():
    pred = {"a": {("color", "x")}}
    gold = {"a": {("color", "x"), ("color", "y")}}
    assert instance_acc(pred, gold) == pytest.approx(0.5)
    assert joint_f1(pred, gold) == pytest.approx(2 / 3, abs=1e-12)
    assert joint_acc(pred, gold) == 0.0

    two = {"a": {("color", "x")}, "b": {("style", "z")}}
    assert joint_acc({"a": {("color", "x")}, "b": set()}, two) == 0.5


def test_empty_gold_conventions():
    assert instance_acc({"a": set()}, {"a": set()}) == 1.0
    assert instance_acc({"a": {("color", "x")}}, {"a": set()}) == 0.0
    assert joint_f1({"a": set()}, {"a": set()}) == 1.0
    assert joint_f1({"a": {("color", "x")}}, {"a": set()}) == 0.0


def test_metrics_match_brute_force(rng):
    for _ in range(500):
        pred, gold = _random_sets(rng, int(rng.integers(1, 6)))
        expected_micro = _brute_micro(pred, gold)
        jacc, iacc, jf1 = _brute_instance(pred, gold)
        assert np.allclose(micro_f1(pred, gold), expected_micro, atol=1e-12, rtol=0)
        assert joint_acc(pred, gold) == pytest.approx(jacc, abs=1e-12)
        assert instance_acc(pred, gold) == pytest.approx(iacc, abs=1e-12)
        assert joint_f1(pred, gold) == pytest.approx(jf1, abs=1e-12)
        assert joint_acc(pred, gold) <= instance_acc(pred, gold) + 1e-12
        assert joint_acc(pred, gold) <= joint_f1(pred, gold) + 1e-12


def test_partitioned_f1_matches_filtered_recomputation(rng):
    for _ in range(500):
        pred, gold = _random_sets(rng, int(rng.integers(1, 6)))
        unseen = {x for x in UNIVERSE if rng.random() < 0.3}
        seen_scores, unseen_scores = partitioned_f1(pred, gold, unseen)

        seen_expected = _brute_micro(
            {i: {x for x in p if x not in unseen} for i, p in pred.items()},
            {i: {x for x in g if x not in unseen} for i, g in gold.items()},
        )
        unseen_expected = _brute_micro(
            {i: {x for x in p if x in unseen} for i, p in pred.items()},
            {i: {x for x in g if x in unseen} for i, g in gold.items()},
        )
        got_seen = (seen_scores.precision, seen_scores.recall, seen_scores.f1)
        got_unseen = (unseen_scores.precision, unseen_scores.recall, unseen_scores.f1)
        assert np.allclose(got_seen, seen_expected, atol=1e-12, rtol=0)
        assert np.allclose(got_unseen, unseen_expected, atol=1e-12, rtol=0)


def test_partitioned_f1_edges(rng):
    pred, gold = _random_sets(rng, 4)
    seen_scores, unseen_scores = partitioned_f1(pred, gold, set())
    assert (seen_scores.precision, seen_scores.recall, seen_scores.f1) == micro_f1(pred, gold)
    assert unseen_scores.pred_total == 0

    seen_scores, unseen_scores = partitioned_f1(pred, gold, set(UNIVERSE))
    assert (unseen_scores.precision, unseen_scores.recall, unseen_scores.f1) == micro_f1(pred, gold)
    assert seen_scores.gold_total == 0


def test_micro_f1_ignores_instance_order(rng):
    pred, gold = _random_sets(rng, 5)
    reversed_pred = dict(reversed(list(pred.items())))
    reversed_gold = dict(reversed(list(gold.items())))
    assert micro_f1(reversed_pred, reversed_gold) == micro_f1(pred, gold)


def test_per_attribute_scores():
    pred = {"a": {("color", "x"), ("style", "y")}}
    gold = {"a": {("color", "x"), ("style", "z")}}
    table = per_attribute_scores(pred, gold, ["color", "style", "material"])
    assert table["color"].f1 == 1.0
    assert table["style"].f1 == 0.0
    assert table["material"].pred_total == 0


@pytest.fixture
def gold_instances():
    return [
        ProductInstance("1", ("red", "silk"), {"color": ["red"], "material": ["silk"]}),
        ProductInstance("2", ("blue", "shirt"), {"color": ["blue"]}),
    ]


def test_evaluate_perfect_predictions(gold_instances, tmp_path):
    predictions = [Prediction(g.id, frozenset(g.attributes()), frozenset(g.pairs())) for g in gold_instances]
    report = evaluate(predictions, gold_instances, unseen={("color", "blue")})
    assert report.n_total == 2
    assert report.value.f1 == 1.0
    assert report.attribute.f1 == 1.0
    assert report.jacc == report.iacc == report.jf1 == 1.0
    assert report.unseen.recall == 1.0
    assert list(report.per_attribute) == ["color", "material"]

    report.write_json(tmp_path / "report.json")
    report.write_csv(tmp_path / "per_attribute.csv")
    assert json.loads((tmp_path / "report.json").read_text())["value"]["f1"] == 1.0
    with (tmp_path / "per_attribute.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["attribute"] for r in rows] == ["color", "material"]
    assert rows[0]["unseen_recall"] == "1.000000"
    assert rows[1]["unseen_recall"] == "0.000000"


def test_evaluate_scores_attributes_separately(gold_instances):
    predictions = [
        Prediction("1", frozenset({"color"}), frozenset({("color", "red"), ("material", "wool")})),
        Prediction("2", frozenset({"color", "material"}), frozenset()),
    ]
    report = evaluate(predictions, gold_instances)
    assert report.value.pred_crt == 1
    assert report.value.pred_total == 2
    assert report.value.gold_total == 3
    assert report.attribute.precision == pytest.approx(2 / 3)
    assert report.attribute.recall == pytest.approx(2 / 3)
    assert report.seen is None
    assert report.jacc == 0.0


def test_evaluate_rejects_duplicate_ids(gold_instances):
    predictions = [Prediction("1", frozenset(), frozenset())] * 2
    with pytest.raises(DataError):
        evaluate(predictions, gold_instances)
