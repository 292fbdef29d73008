from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import FrozenSet
from typing import Iterable
from typing import List
from typing import Optional
from typing import Set
from typing import Tuple

from .Exceptions import DataError

Pair = Tuple[str, str]


@dataclass(frozen=True)
class ValueEntry:
    """One schema value, tagged with the attribute that owns it."""

    attribute: str
    value: str

    @property
    def pair(self) -> Pair:
        return (self.attribute, self.value)


@dataclass
class Schema:
    """Ordered attribute and value inventories of a dataset.

    Args:
        attributes: The ``N_attr`` attribute names, in index order.
        values: The ``N_value`` values, in index order.

    Raises:
        DataError: If a name repeats or a value's owner is not an attribute.
    """

    attributes: List[str]
    values: List[ValueEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.attributes)) != len(self.attributes):
            raise DataError("Attribute names in schema must be unique.")
        if len({v.pair for v in self.values}) != len(self.values):
            raise DataError("Values in schema must be unique per attribute.")
        known = set(self.attributes)
        for entry in self.values:
            if entry.attribute not in known:
                raise DataError(
                    f"Value {entry.value!r} belongs to unknown attribute {entry.attribute!r}.",
                    context={"attribute": entry.attribute, "value": entry.value},
                )
        self._attr_index = {a: i for i, a in enumerate(self.attributes)}
        self._value_index = {v.pair: i for i, v in enumerate(self.values)}

    def __repr__(self) -> str:
        return f"Schema(n_attr={self.n_attr}, n_value={self.n_value})"

    @property
    def n_attr(self) -> int:
        return len(self.attributes)

    @property
    def n_value(self) -> int:
        return len(self.values)

    def value_index(self, pair: Pair) -> Optional[int]:
        return self._value_index.get(pair)

    def has_attribute(self, attribute: str) -> bool:
        return attribute in self._attr_index

    def restricted_to(self, pairs: Iterable[Pair]) -> "Schema":
        """Same attributes, only the values in ``pairs``, original order kept."""
        keep = set(pairs)
        return Schema(list(self.attributes), [v for v in self.values if v.pair in keep])

    def to_json(self) -> dict:
        return {
            "attributes": list(self.attributes),
            "values": [{"attribute": v.attribute, "value": v.value} for v in self.values],
        }

    @classmethod
    def from_json(cls, json_data: dict) -> "Schema":
        try:
            attributes = list(json_data["attributes"])
            values = [ValueEntry(v["attribute"], v["value"]) for v in json_data.get("values", [])]
        except (KeyError, TypeError) as e:
            raise DataError(f"Malformed schema: {e}") from None
        return cls(attributes, values)

    @classmethod
    def from_instances(cls, instances: Iterable["ProductInstance"]) -> "Schema":
        """Infer a schema in first-seen order from gold annotations."""
        attributes: List[str] = []
        values: List[ValueEntry] = []
        seen_attr: Set[str] = set()
        seen_value: Set[Pair] = set()
        for instance in instances:
            for attribute, vals in instance.gold.items():
                if attribute not in seen_attr:
                    seen_attr.add(attribute)
                    attributes.append(attribute)
                for value in vals:
                    if (attribute, value) not in seen_value:
                        seen_value.add((attribute, value))
                        values.append(ValueEntry(attribute, value))
        return cls(attributes, values)


@dataclass(frozen=True)
class ProductInstance:
    """One product text and its gold attribute-to-values mapping."""

    id: str
    tokens: Tuple[str, ...]
    gold: Dict[str, List[str]] = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"ProductInstance(id={self.id})"

    def __len__(self) -> int:
        return len(self.tokens)

    def pairs(self) -> Set[Pair]:
        return {(a, v) for a, vals in self.gold.items() for v in vals}

    def attributes(self) -> Set[str]:
        return {a for a, vals in self.gold.items() if vals}

    def validate(self, schema: Schema, l_max: int) -> None:
        if not 1 <= len(self.tokens) <= l_max:
            raise DataError(
                f"Instance {self.id} has {len(self.tokens)} tokens, expected 1..{l_max}.",
                context={"id": self.id},
            )
        for attribute, vals in self.gold.items():
            if not schema.has_attribute(attribute):
                raise DataError(
                    f"Instance {self.id} uses unknown attribute {attribute!r}.",
                    context={"id": self.id},
                )
            if not vals or len(set(vals)) != len(vals):
                raise DataError(
                    f"Instance {self.id} has an empty or duplicated value list for {attribute!r}.",
                    context={"id": self.id},
                )

    def to_json(self, joiner: str) -> dict:
        return {
            "id": self.id,
            "text": joiner.join(self.tokens),
            "labels": [{"attribute": a, "values": list(v)} for a, v in self.gold.items()],
        }


@dataclass(frozen=True)
class TargetSequence:
    """Composed, ``[EOS]``-terminated value sequence of one attribute."""

    attribute_index: int
    token_ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class Prediction:
    """Model output for one instance."""

    instance_id: str
    attributes: FrozenSet[str]
    values: FrozenSet[Pair]

    def __repr__(self) -> str:
        return f"Prediction(id={self.instance_id}, n_values={len(self.values)})"

    def to_json(self, attribute_order: List[str]) -> dict:
        grouped: Dict[str, List[str]] = {}
        for attribute, value in sorted(self.values):
            grouped.setdefault(attribute, []).append(value)
        return {
            "id": self.instance_id,
            "attributes": [a for a in attribute_order if a in self.attributes],
            "labels": [
                {"attribute": a, "values": grouped[a]} for a in attribute_order if a in grouped
            ],
        }

    @classmethod
    def from_json(cls, json_data: dict) -> "Prediction":
        """Read the ``to_json`` shape; ``attributes`` defaults to the labelled ones."""
        try:
            labels = json_data.get("labels", [])
            values = frozenset((label["attribute"], v) for label in labels for v in label["values"])
            attributes = json_data.get("attributes")
            if attributes is None:
                attributes = [label["attribute"] for label in labels if label["values"]]
            return cls(str(json_data["id"]), frozenset(attributes), values)
        except (KeyError, TypeError, AttributeError) as e:
            raise DataError(f"Malformed prediction: {e}") from None
