import json
from pathlib import Path
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple
from typing import Union

import numpy as np

from .AbstractJpave import AbstractJpave
from .AttributePredictor import AttributeDecision
from .AttributePredictor import attribute_loss
from .AttributePredictor import attribute_probabilities
from .AttributePredictor import predict_attribute
from .Classes import Pair
from .Classes import ProductInstance
from .Classes import TargetSequence
from .Data import parse_generated
from .Data import targets_for
from .Encoder import EncoderOutput
from .Enums import Variant
from .Generator import DecodeTrace
from .Generator import generate_sequence
from .Generator import register_generator
from .Generator import teacher_forced_nll
from .Numkit import DenseTensor
from .Numkit import ModelParams
from .Numkit import no_grad


class JpaveGen(AbstractJpave):
    """Generation variant: a copy-augmented GRU decoder emits the values."""

    variant = Variant.GEN

    def _register_head(self, params: ModelParams, rng: np.random.Generator) -> None:
        register_generator(params, self.config.d_a, rng, self.config.init_range)

    def targets(self, instance: ProductInstance) -> List[TargetSequence]:
        return targets_for(
            instance, self.schema, self.vocab, self.config.t_max, self.config.tokenize
        )

    def instance_losses(
        self, instance: ProductInstance, order: Optional[Sequence[int]] = None
    ) -> Tuple[DenseTensor, DenseTensor]:
        enc = self.encode(instance)
        value_loss, contexts = teacher_forced_nll(
            self.targets(instance), enc, self.params, self.config.no_copy, order
        )
        probabilities = [attribute_probabilities(c, self.params) for c in contexts]
        return attribute_loss(probabilities, self.attribute_labels(instance)), value_loss

    def decode(self, instance: ProductInstance) -> List[DecodeTrace]:
        """Greedy traces of every attribute, in attribute order."""
        with no_grad():
            return self._decode(self.encode(instance))

    def write_traces(self, path: Union[str, Path], instances: Iterable[ProductInstance]) -> None:
        """One JSON line per instance with every attribute's greedy trace."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for instance in instances:
                traces = [
                    {"attribute": self.schema.attributes[t.attribute_index], **t.to_json()}
                    for t in self.decode(instance)
                ]
                fh.write(json.dumps({"id": instance.id, "traces": traces}, ensure_ascii=False) + "\n")

    def _decode(self, enc: EncoderOutput) -> List[DecodeTrace]:
        return [
            generate_sequence(i, enc, self.params, self.config.t_max, self.config.no_copy)
            for i in range(self.schema.n_attr)
        ]

    def _predict_encoded(
        self, instance: ProductInstance, enc: EncoderOutput
    ) -> Tuple[List[AttributeDecision], Set[Pair]]:
        decisions = []
        pairs: Set[Pair] = set()
        for trace in self._decode(enc):
            i = trace.attribute_index
            decisions.append(predict_attribute(trace.first_context, self.params, i))
            attribute = self.schema.attributes[i]
            for value in parse_generated(trace.token_ids, self.vocab, self.config.tokenize):
                pairs.add((attribute, value))
        return decisions, pairs
