"""Exact-match scoring of (attribute, value) predictions.

Every function takes per-instance sets keyed by instance id. The unit of
scoring is whatever the sets hold: ``(attribute, value)`` pairs for value
scores and attribute names for attribute scores. A value predicted under the
wrong attribute is therefore wrong.
"""
import csv
import json
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import AbstractSet
from typing import Dict
from typing import Hashable
from typing import Iterable
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple
from typing import Union

from .Classes import Pair
from .Classes import Prediction
from .Classes import ProductInstance
from .Exceptions import DataError

InstanceSets = Mapping[str, AbstractSet[Hashable]]
PathLike = Union[str, Path]


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


@dataclass
class Scores:
    """Micro-averaged counts; precision, recall and F1 derive from them."""

    pred_crt: int = 0
    pred_total: int = 0
    gold_total: int = 0

    def update(self, pred: AbstractSet[Hashable], gold: AbstractSet[Hashable]) -> None:
        self.pred_crt += len(pred & gold)
        self.pred_total += len(pred)
        self.gold_total += len(gold)

    @property
    def precision(self) -> float:
        return _ratio(self.pred_crt, self.pred_total)

    @property
    def recall(self) -> float:
        return _ratio(self.pred_crt, self.gold_total)

    @property
    def f1(self) -> float:
        return _f1(self.precision, self.recall)

    def to_json(self) -> dict:
        return {
            "pred_crt": self.pred_crt,
            "pred_total": self.pred_total,
            "gold_total": self.gold_total,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def _aligned(pred: InstanceSets, gold: InstanceSets) -> Iterable[Tuple[AbstractSet, AbstractSet]]:
    if set(pred) != set(gold):
        missing = sorted(set(gold) - set(pred))[:3]
        extra = sorted(set(pred) - set(gold))[:3]
        raise DataError(
            f"Prediction and gold instance ids differ (missing {missing}, unexpected {extra}).",
            context={"missing": missing, "unexpected": extra},
        )
    return ((pred[k], gold[k]) for k in sorted(gold))


def micro_scores(pred: InstanceSets, gold: InstanceSets) -> Scores:
    scores = Scores()
    for p, g in _aligned(pred, gold):
        scores.update(set(p), set(g))
    return scores


def micro_f1(pred: InstanceSets, gold: InstanceSets) -> Tuple[float, float, float]:
    """Micro precision, recall and F1 with 0 for empty denominators."""
    scores = micro_scores(pred, gold)
    return scores.precision, scores.recall, scores.f1


def _per_instance(pred: InstanceSets, gold: InstanceSets) -> Sequence[Tuple[AbstractSet, AbstractSet]]:
    pairs = list(_aligned(pred, gold))
    if not pairs:
        raise DataError("Cannot score an empty test set.")
    return pairs


def joint_acc(pred: InstanceSets, gold: InstanceSets) -> float:
    """Share of instances whose predicted set equals the gold set."""
    pairs = _per_instance(pred, gold)
    return sum(set(p) == set(g) for p, g in pairs) / len(pairs)


def _ins_acc(p: AbstractSet, g: AbstractSet) -> float:
    if not g:
        return 1.0 if not p else 0.0
    return len(set(p) & set(g)) / len(g)


def _ins_f1(p: AbstractSet, g: AbstractSet) -> float:
    if not p and not g:
        return 1.0
    crt = len(set(p) & set(g))
    return _f1(_ratio(crt, len(p)), _ratio(crt, len(g)))


def instance_acc(pred: InstanceSets, gold: InstanceSets) -> float:
    """Mean over instances of correctly predicted gold values / gold values.

    An instance with no gold values scores 1 if nothing is predicted for it
    and 0 otherwise.
    """
    pairs = _per_instance(pred, gold)
    return sum(_ins_acc(p, g) for p, g in pairs) / len(pairs)


def joint_f1(pred: InstanceSets, gold: InstanceSets) -> float:
    """Mean per-instance F1; empty prediction against empty gold scores 1."""
    pairs = _per_instance(pred, gold)
    return sum(_ins_f1(p, g) for p, g in pairs) / len(pairs)


def partitioned_f1(
    pred: InstanceSets, gold: InstanceSets, unseen: AbstractSet[Hashable]
) -> Tuple[Scores, Scores]:
    """Split scoring into seen and unseen values.

    A predicted or gold item counts toward the unseen report iff it is in
    ``unseen``, and toward the seen report otherwise.

    Returns:
        ``(seen, unseen)`` scores.
    """
    seen_scores, unseen_scores = Scores(), Scores()
    for p, g in _aligned(pred, gold):
        p, g = set(p), set(g)
        seen_scores.update(p - unseen, g - unseen)
        unseen_scores.update(p & unseen, g & unseen)
    return seen_scores, unseen_scores


def per_attribute_scores(
    pred: Mapping[str, AbstractSet[Pair]],
    gold: Mapping[str, AbstractSet[Pair]],
    attributes: Sequence[str],
    restrict: Optional[AbstractSet[Pair]] = None,
) -> Dict[str, Scores]:
    """Value scores per attribute, optionally over ``restrict`` pairs only."""
    table = {a: Scores() for a in attributes}
    for p, g in _aligned(pred, gold):
        if restrict is not None:
            p, g = set(p) & restrict, set(g) & restrict
        for attribute, scores in table.items():
            scores.update({x for x in p if x[0] == attribute}, {x for x in g if x[0] == attribute})
    return table


@dataclass
class AttributeRow:
    attribute: Scores
    value: Scores
    unseen: Optional[Scores] = None

    def to_json(self) -> dict:
        row = {"attribute": self.attribute.to_json(), "value": self.value.to_json()}
        if self.unseen is not None:
            row["unseen"] = self.unseen.to_json()
        return row


@dataclass
class EvalReport:
    """Value, attribute and instance-level scores of one prediction run."""

    n_total: int
    value: Scores
    attribute: Scores
    jacc: float
    iacc: float
    jf1: float
    per_attribute: Dict[str, AttributeRow] = field(default_factory=dict)
    seen: Optional[Scores] = None
    unseen: Optional[Scores] = None

    def __repr__(self) -> str:
        return f"EvalReport(n={self.n_total}, value_f1={self.value.f1:.4f}, attribute_f1={self.attribute.f1:.4f})"

    def to_json(self) -> dict:
        json_data = {
            "n_total": self.n_total,
            "value": self.value.to_json(),
            "attribute": self.attribute.to_json(),
            "jacc": self.jacc,
            "iacc": self.iacc,
            "jf1": self.jf1,
            "per_attribute": {a: row.to_json() for a, row in self.per_attribute.items()},
        }
        if self.seen is not None and self.unseen is not None:
            json_data["seen"] = self.seen.to_json()
            json_data["unseen"] = self.unseen.to_json()
        return json_data

    def write_json(self, path: PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path: PathLike) -> None:
        """One row per attribute: attribute P/R/F1, value P/R/F1, unseen P/R/F1."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ["attribute"]
        for group in ("attr", "value", "unseen"):
            header += [f"{group}_precision", f"{group}_recall", f"{group}_f1"]
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for name, row in self.per_attribute.items():
                cells = [name]
                for scores in (row.attribute, row.value, row.unseen):
                    if scores is None:
                        cells += ["", "", ""]
                    else:
                        cells += [f"{scores.precision:.6f}", f"{scores.recall:.6f}", f"{scores.f1:.6f}"]
                writer.writerow(cells)


def value_sets(predictions: Iterable[Prediction]) -> Dict[str, Set[Pair]]:
    return {p.instance_id: set(p.values) for p in predictions}


def attribute_sets(predictions: Iterable[Prediction]) -> Dict[str, Set[str]]:
    return {p.instance_id: set(p.attributes) for p in predictions}


def evaluate(
    predictions: Sequence[Prediction],
    gold: Sequence[ProductInstance],
    attributes: Optional[Sequence[str]] = None,
    unseen: Optional[AbstractSet[Pair]] = None,
) -> EvalReport:
    """Score predictions against gold instances.

    Args:
        predictions: One prediction per gold instance.
        gold: The gold instances.
        attributes (optional): Attribute order of the per-attribute table;
            attributes of the gold data in first-seen order otherwise.
        unseen (optional): Pairs that count as unseen values. Adds the
            seen/unseen split and the per-attribute unseen columns.

    Raises:
        DataError: If the ids differ or there is nothing to score.
    """
    pred_values = value_sets(predictions)
    gold_values = {g.id: g.pairs() for g in gold}
    if len(pred_values) != len(predictions) or len(gold_values) != len(gold):
        raise DataError("Instance ids must be unique.")
    pred_attrs = attribute_sets(predictions)
    gold_attrs = {g.id: g.attributes() for g in gold}

    if attributes is None:
        attributes = list(dict.fromkeys(a for g in gold for a in g.gold))

    value_table = per_attribute_scores(pred_values, gold_values, attributes)
    unseen_table = (
        per_attribute_scores(pred_values, gold_values, attributes, unseen) if unseen is not None else {}
    )
    per_attribute = {}
    for a in attributes:
        attr_scores = micro_scores(
            {k: v & {a} for k, v in pred_attrs.items()}, {k: v & {a} for k, v in gold_attrs.items()}
        )
        per_attribute[a] = AttributeRow(attr_scores, value_table[a], unseen_table.get(a))

    seen_scores, unseen_scores = (None, None)
    if unseen is not None:
        seen_scores, unseen_scores = partitioned_f1(pred_values, gold_values, unseen)

    return EvalReport(
        n_total=len(gold),
        value=micro_scores(pred_values, gold_values),
        attribute=micro_scores(pred_attrs, gold_attrs),
        jacc=joint_acc(pred_values, gold_values),
        iacc=instance_acc(pred_values, gold_values),
        jf1=joint_f1(pred_values, gold_values),
        per_attribute=per_attribute,
        seen=seen_scores,
        unseen=unseen_scores,
    )
