"""Vocabulary, dataset ingestion, target sequences and corpus tooling."""
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple
from typing import Union

import numpy as np

from .Classes import Pair
from .Classes import Prediction
from .Classes import ProductInstance
from .Classes import Schema
from .Classes import TargetSequence
from .Classes import ValueEntry
from .Constants import EOS_ID
from .Constants import L_MAX
from .Constants import SEP_ID
from .Constants import SPECIAL_TOKENS
from .Constants import UNK_ID
from .Enums import TokenizeMode
from .Exceptions import ConfigError
from .Exceptions import DataError

logger = logging.getLogger(__name__)

Dataset = List[ProductInstance]
PathLike = Union[str, Path]


def tokenize(text: str, mode: TokenizeMode = TokenizeMode.CHAR) -> List[str]:
    """Split text into surface tokens.

    ``CHAR`` yields one token per non-whitespace character, which is the
    right unit for Chinese product text. ``WHITESPACE`` splits on runs of
    whitespace.
    """
    if mode is TokenizeMode.CHAR:
        return [c for c in text if not c.isspace()]
    return text.split()


def normalize_value(value: str, mode: TokenizeMode = TokenizeMode.CHAR) -> str:
    """The surface form ``parse_generated`` produces for ``value``.

    >>> normalize_value("old fashion", TokenizeMode.CHAR)
    'oldfashion'
    >>> normalize_value(" dark   blue ", TokenizeMode.WHITESPACE)
    'dark blue'
    """
    return mode.joiner.join(tokenize(value, mode))


def normalize_schema(schema: Schema, mode: TokenizeMode = TokenizeMode.CHAR) -> Schema:
    """Normalize every value; values that collapse onto one keep the first slot."""
    values: List[ValueEntry] = []
    seen: Set[Pair] = set()
    for entry in schema.values:
        normalized = ValueEntry(entry.attribute, normalize_value(entry.value, mode))
        if normalized.value and normalized.pair not in seen:
            seen.add(normalized.pair)
            values.append(normalized)
    return Schema(list(schema.attributes), values)


class Vocab:
    """Bidirectional token/id map with the reserved special tokens first.

    Ids 0..4 are always ``[PAD]``, ``[UNK]``, ``[SEP]``, ``[EOS]``, ``[BOS]``.
    """

    def __init__(self, tokens: Iterable[str] = ()) -> None:
        self.id_to_token: List[str] = list(SPECIAL_TOKENS)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        for token in tokens:
            self.add(token)

    def __repr__(self) -> str:
        return f"Vocab(size={len(self)})"

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id_to_token[i] for i in ids]

    def to_json(self) -> List[str]:
        return list(self.id_to_token)

    @classmethod
    def from_json(cls, tokens: List[str]) -> "Vocab":
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("Vocabulary does not start with the reserved special tokens.")
        if len(set(tokens)) != len(tokens):
            raise DataError("Vocabulary contains duplicated tokens.")
        return cls(tokens[len(SPECIAL_TOKENS) :])


def build_vocab(
    instances: Iterable[ProductInstance],
    min_freq: int = 1,
    schema: Optional[Schema] = None,
    mode: TokenizeMode = TokenizeMode.CHAR,
) -> Vocab:
    """Collect corpus tokens seen at least ``min_freq`` times.

    Tokens of schema attribute names and values are always added, regardless
    of frequency, so every known value can be generated.
    """
    counts: Counter = Counter()
    order: List[str] = []
    for instance in instances:
        for token in instance.tokens:
            if token not in counts:
                order.append(token)
            counts[token] += 1

    vocab = Vocab(t for t in order if counts[t] >= min_freq)
    if schema is not None:
        for attribute in schema.attributes:
            for token in tokenize(attribute, mode):
                vocab.add(token)
        for entry in schema.values:
            for token in tokenize(entry.value, mode):
                vocab.add(token)
    return vocab


def compose_target(
    values: Sequence[str],
    vocab: Vocab,
    t_max: int,
    mode: TokenizeMode = TokenizeMode.CHAR,
    attribute_index: int = 0,
) -> TargetSequence:
    """Join values as ``v1 [SEP] v2 ... [EOS]`` capped at ``t_max`` ids.

    Truncation keeps the leftmost ids and forces ``[EOS]`` as the final one;
    a ``[SEP]`` left dangling in front of it is dropped.
    """
    if t_max < 1:
        raise ConfigError(f"t_max must be at least 1, got {t_max}")

    ids: List[int] = []
    for value in values:
        value_ids = vocab.encode(tokenize(value, mode))
        if not value_ids:
            continue
        if ids:
            ids.append(SEP_ID)
        ids.extend(value_ids)

    ids = ids[: t_max - 1]
    while ids and ids[-1] == SEP_ID:
        ids.pop()
    ids.append(EOS_ID)
    return TargetSequence(attribute_index, tuple(ids))


def parse_generated(
    token_ids: Sequence[int], vocab: Vocab, mode: TokenizeMode = TokenizeMode.CHAR
) -> List[str]:
    """Split generated ids on ``[SEP]`` up to the first ``[EOS]``."""
    values: List[str] = []
    current: List[str] = []

    def flush() -> None:
        text = mode.joiner.join(current).strip()
        if text and text not in values:
            values.append(text)
        current.clear()

    for token_id in token_ids:
        if token_id == EOS_ID:
            break
        if token_id == SEP_ID:
            flush()
        elif vocab.id_to_token[token_id] not in SPECIAL_TOKENS:
            current.append(vocab.id_to_token[token_id])
    flush()
    return values


def targets_for(
    instance: ProductInstance,
    schema: Schema,
    vocab: Vocab,
    t_max: int,
    mode: TokenizeMode = TokenizeMode.CHAR,
) -> List[TargetSequence]:
    """One target per schema attribute; absent attributes get ``[EOS]`` alone."""
    return [
        compose_target(instance.gold.get(attribute, []), vocab, t_max, mode, i)
        for i, attribute in enumerate(schema.attributes)
    ]


def find_span(tokens: Sequence[str], needle: Sequence[str]) -> int:
    """Start of the first contiguous occurrence of ``needle``, or -1."""
    n = len(needle)
    if n == 0:
        return -1
    for start in range(len(tokens) - n + 1):
        if tuple(tokens[start : start + n]) == tuple(needle):
            return start
    return -1


def permute_text(
    instance: ProductInstance, seed: int, mode: TokenizeMode = TokenizeMode.CHAR
) -> ProductInstance:
    """Shuffle word order while keeping each gold value contiguous and ordered.

    Gold value spans (first match per value) become atomic blocks; overlapping
    blocks are merged. Blocks and the remaining single tokens are then
    shuffled with a generator seeded by ``seed``.

    Raises:
        DataError: If a gold value is not found as a contiguous span.
    """
    tokens = instance.tokens
    spans: List[Tuple[int, int]] = []
    for attribute, values in instance.gold.items():
        for value in values:
            needle = tokenize(value, mode)
            start = find_span(tokens, needle)
            if start < 0:
                raise DataError(
                    f"Value {value!r} of instance {instance.id} is not a contiguous span.",
                    context={"id": instance.id, "attribute": attribute, "value": value},
                )
            spans.append((start, start + len(needle)))

    blocks: List[Tuple[int, int]] = []
    for start, end in sorted(spans):
        if blocks and start < blocks[-1][1]:
            blocks[-1] = (blocks[-1][0], max(end, blocks[-1][1]))
        else:
            blocks.append((start, end))

    units: List[Tuple[int, int]] = []
    position = 0
    for start, end in blocks:
        units.extend((i, i + 1) for i in range(position, start))
        units.append((start, end))
        position = end
    units.extend((i, i + 1) for i in range(position, len(tokens)))

    order = np.random.default_rng(seed).permutation(len(units))
    shuffled = tuple(t for k in order for t in tokens[units[k][0] : units[k][1]])
    return ProductInstance(instance.id, shuffled, {a: list(v) for a, v in instance.gold.items()})


def permute_dataset(
    instances: Sequence[ProductInstance], seed: int, mode: TokenizeMode = TokenizeMode.CHAR
) -> Dataset:
    """Permute every instance with its own seed drawn from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**32, size=len(instances))
    return [permute_text(inst, int(s), mode) for inst, s in zip(instances, seeds)]


def gold_pairs(instances: Iterable[ProductInstance]) -> Set[Pair]:
    pairs: Set[Pair] = set()
    for instance in instances:
        pairs |= instance.pairs()
    return pairs


def zero_shot_split(
    train: Iterable[ProductInstance], test: Iterable[ProductInstance]
) -> Tuple[Set[Pair], Set[Pair]]:
    """Partition test gold ``(attribute, value)`` pairs into seen and unseen."""
    train_pairs = gold_pairs(train)
    test_pairs = gold_pairs(test)
    unseen = test_pairs - train_pairs
    return test_pairs - unseen, unseen


def _instance_from_json(
    json_data: dict, mode: TokenizeMode, l_max: int, where: str
) -> ProductInstance:
    try:
        instance_id = str(json_data["id"])
        text = json_data["text"]
        labels = json_data.get("labels", [])
    except (KeyError, TypeError) as e:
        raise DataError(f"{where}: malformed instance, missing {e}") from None

    tokens = tuple(tokenize(text, mode))
    if not tokens:
        raise DataError(f"{where}: instance {instance_id} has empty text.")
    if len(tokens) > l_max:
        tokens = tokens[:l_max]

    gold: Dict[str, List[str]] = {}
    for label in labels:
        try:
            attribute, values = label["attribute"], label["values"]
        except (KeyError, TypeError) as e:
            raise DataError(f"{where}: malformed label, missing {e}") from None
        kept = gold.setdefault(attribute, [])
        for raw in values:
            value = normalize_value(raw, mode)
            if value in kept:
                continue
            if find_span(tokens, tokenize(value, mode)) < 0:
                logger.warning(
                    "%s: dropping value %r of %s, not a span of the (truncated) text",
                    where,
                    raw,
                    instance_id,
                )
                continue
            kept.append(value)
    gold = {a: v for a, v in gold.items() if v}
    return ProductInstance(instance_id, tokens, gold)


def load_jsonl(
    path: PathLike, mode: TokenizeMode = TokenizeMode.CHAR, l_max: int = L_MAX
) -> Dataset:
    """Read one instance per line.

    Each line has the shape ``{"id": str, "text": str, "labels":
    [{"attribute": str, "values": [str, ...]}, ...]}``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Dataset file {path} does not exist.")
    instances: Dataset = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                json_data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            instances.append(_instance_from_json(json_data, mode, l_max, f"{path}:{lineno}"))
    return instances


def save_jsonl(
    path: PathLike, instances: Iterable[ProductInstance], mode: TokenizeMode = TokenizeMode.CHAR
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for instance in instances:
            fh.write(json.dumps(instance.to_json(mode.joiner), ensure_ascii=False) + "\n")


def save_predictions(path: PathLike, predictions: Iterable[Prediction], attribute_order: List[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for prediction in predictions:
            fh.write(json.dumps(prediction.to_json(attribute_order), ensure_ascii=False) + "\n")


def load_predictions(path: PathLike, mode: TokenizeMode = TokenizeMode.CHAR) -> List[Prediction]:
    """Read a predictions JSONL, normalizing values the way gold values are."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Predictions file {path} does not exist.")
    predictions = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                prediction = Prediction.from_json(json.loads(line))
                values = frozenset((a, normalize_value(v, mode)) for a, v in prediction.values)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            except (TypeError, AttributeError):
                raise DataError(f"{path}:{lineno}: prediction values must be strings") from None
            predictions.append(Prediction(prediction.instance_id, prediction.attributes, values))
    return predictions


def load_schema(path: PathLike, mode: TokenizeMode = TokenizeMode.CHAR) -> Schema:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Schema file {path} does not exist.")
    try:
        json_data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e.msg})") from None
    return normalize_schema(Schema.from_json(json_data), mode)


def save_schema(path: PathLike, schema: Schema) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(schema.to_json(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def check_dataset(instances: Iterable[ProductInstance], schema: Schema, l_max: int) -> None:
    for instance in instances:
        instance.validate(schema, l_max)


ATTRIBUTE_NAMES = ("color", "material", "style", "pattern", "technology", "season", "fit", "collar")
_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthConfig:
    """Shape of a synthetic corpus.

    Values are built from per-attribute morpheme pools, so a held-out value is
    a new combination of tokens that do occur in training text.
    """

    n_attributes: int = 5
    values_per_attribute: int = 4
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    heldout_fraction: float = 0.0
    l_max: int = 20
    morphemes_per_attribute: int = 6
    max_value_tokens: int = 2
    max_values_per_attribute: int = 2
    attribute_rate: float = 0.5
    n_fillers: int = 40
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_attributes < 1:
            raise ConfigError("n_attributes must be at least 1.")
        if self.values_per_attribute < 1:
            raise ConfigError("values_per_attribute must be at least 1.")
        if self.morphemes_per_attribute < 1 or self.max_value_tokens < 1:
            raise ConfigError("Need at least one morpheme and one token per value.")
        m = self.morphemes_per_attribute
        capacity = sum(math.perm(m, k) for k in range(1, min(m, self.max_value_tokens) + 1))
        if capacity < self.values_per_attribute:
            raise ConfigError(
                f"Only {capacity} distinct values can be built per attribute, "
                f"{self.values_per_attribute} requested."
            )
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in [0, 1).")
        if self.values_per_attribute - self.heldout_per_attribute < 1:
            raise ConfigError("Every attribute needs at least one value seen in training.")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ConfigError("Split sizes must be non-negative and n_train at least 1.")
        if self.n_train < self.n_attributes * (self.values_per_attribute - self.heldout_per_attribute):
            raise ConfigError("n_train is too small to cover every training value once.")
        if self.l_max < self.max_value_tokens:
            raise ConfigError("l_max cannot fit a single value.")
        if self.max_values_per_attribute < 1 or self.n_fillers < 1:
            raise ConfigError("max_values_per_attribute and n_fillers must be at least 1.")
        if not 0.0 < self.attribute_rate <= 1.0:
            raise ConfigError("attribute_rate must lie in (0, 1].")

    @property
    def heldout_per_attribute(self) -> int:
        if self.heldout_fraction == 0.0:
            return 0
        return max(1, int(round(self.heldout_fraction * self.values_per_attribute)))


def _words(rng: np.random.Generator, count: int, taken: Set[str]) -> List[str]:
    words: List[str] = []
    while len(words) < count:
        length = int(rng.integers(2, 4))
        word = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(length)
        )
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def _attribute_name(index: int) -> str:
    if index < len(ATTRIBUTE_NAMES):
        return ATTRIBUTE_NAMES[index]
    return f"attribute{index}"


def _synth_instance(
    rng: np.random.Generator,
    instance_id: str,
    pools: List[List[str]],
    fillers: List[str],
    config: SynthConfig,
    forced: Optional[Tuple[int, str]] = None,
) -> ProductInstance:
    present = [a for a in range(config.n_attributes) if rng.random() < config.attribute_rate]
    if forced is not None:
        present = [forced[0]] + [a for a in present if a != forced[0]]
    if not present:
        present = [int(rng.integers(config.n_attributes))]

    chosen_by_attr: Dict[int, List[str]] = {}
    blocks: List[List[str]] = []
    budget = config.l_max
    for a in present:
        pool = pools[a]
        k = int(rng.integers(1, min(config.max_values_per_attribute, len(pool)) + 1))
        chosen = [pool[int(i)] for i in sorted(rng.choice(len(pool), size=k, replace=False))]
        if forced is not None and forced[0] == a and forced[1] not in chosen:
            chosen[0] = forced[1]
        for value in chosen:
            words = value.split()
            # every block after the first needs one filler in front of it
            cost = len(words) + (1 if blocks else 0)
            if cost > budget:
                continue
            budget -= cost
            chosen_by_attr.setdefault(a, []).append(value)
            blocks.append(words)

    n_filler = len(blocks) - 1 + int(rng.integers(0, budget + 1))
    filler_tokens = [fillers[int(i)] for i in rng.integers(len(fillers), size=n_filler)]
    slots = sorted(int(s) for s in rng.choice(n_filler + 1, size=len(blocks), replace=False))
    order = rng.permutation(len(blocks))

    tokens: List[str] = []
    placed = 0
    for position in range(n_filler + 1):
        if placed < len(blocks) and slots[placed] == position:
            tokens.extend(blocks[int(order[placed])])
            placed += 1
        if position < n_filler:
            tokens.append(filler_tokens[position])

    gold = {_attribute_name(a): chosen_by_attr[a] for a in sorted(chosen_by_attr)}
    return ProductInstance(instance_id, tuple(tokens), gold)


def synth_generate(config: SynthConfig) -> Tuple[Dataset, Dataset, Dataset, Schema]:
    """Generate deterministic train/val/test splits and their schema."""
    rng = np.random.default_rng(config.seed)
    taken: Set[str] = set()
    morphemes = [_words(rng, config.morphemes_per_attribute, taken) for _ in range(config.n_attributes)]
    fillers = _words(rng, config.n_fillers, taken)

    all_values: List[List[str]] = []
    for a in range(config.n_attributes):
        values: List[str] = []
        seen: Set[str] = set()
        while len(values) < config.values_per_attribute:
            n_tokens = int(rng.integers(1, config.max_value_tokens + 1))
            value = " ".join(morphemes[a][int(i)] for i in rng.integers(len(morphemes[a]), size=n_tokens))
            if value not in seen and len(set(value.split())) == n_tokens:
                seen.add(value)
                values.append(value)
        all_values.append(values)

    heldout = config.heldout_per_attribute
    train_pools = [values[: len(values) - heldout] for values in all_values]
    coverage = [(a, v) for a, pool in enumerate(train_pools) for v in pool]

    train = [
        _synth_instance(
            rng,
            f"train-{i:05d}",
            train_pools,
            fillers,
            config,
            coverage[i] if i < len(coverage) else None,
        )
        for i in range(config.n_train)
    ]
    val = [_synth_instance(rng, f"val-{i:05d}", all_values, fillers, config) for i in range(config.n_val)]
    test = [_synth_instance(rng, f"test-{i:05d}", all_values, fillers, config) for i in range(config.n_test)]

    schema = Schema(
        [_attribute_name(a) for a in range(config.n_attributes)],
        [ValueEntry(_attribute_name(a), v) for a, values in enumerate(all_values) for v in values],
    )
    return train, val, test, schema


def heldout_values(config: SynthConfig, schema: Schema) -> Set[Pair]:
    """The ``(attribute, value)`` pairs a synthetic config keeps out of training."""
    result: Set[Pair] = set()
    per_attr: Dict[str, List[str]] = {}
    for entry in schema.values:
        per_attr.setdefault(entry.attribute, []).append(entry.value)
    for attribute, values in per_attr.items():
        cut = len(values) - config.heldout_per_attribute
        result |= {(attribute, v) for v in values[cut:]}
    return result
