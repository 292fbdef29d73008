from typing import List
from typing import Set
from typing import Tuple

import numpy as np

from .AbstractJpave import AbstractJpave
from .AbstractJpave import value_key
from .AttributePredictor import AttributeDecision
from .AttributePredictor import attribute_loss
from .AttributePredictor import attribute_probabilities
from .AttributePredictor import decoder_free_context
from .AttributePredictor import predict_attribute
from .Classes import Pair
from .Classes import ProductInstance
from .Classifier import ValueHead
from .Classifier import classify_values
from .Classifier import multi_hot
from .Classifier import register_value_head
from .Classifier import selected_values
from .Classifier import value_attention
from .Classifier import value_bce_loss
from .Constants import SEP_TOKEN
from .Data import tokenize
from .Encoder import EMBEDDING
from .Encoder import EncoderOutput
from .Enums import Variant
from .Exceptions import ConfigError
from .Numkit import DenseTensor
from .Numkit import ModelParams
from .Numkit import uniform
from .Storage import overwrite_rows


class JpaveCls(AbstractJpave):
    """Classification variant: value-wise attention and one sigmoid per schema value.

    Only values listed in the schema can ever be predicted.
    """

    variant = Variant.CLS

    def _register_head(self, params: ModelParams, rng: np.random.Generator) -> None:
        config = self.config
        if self.schema.n_value == 0:
            raise ConfigError("The classification variant needs at least one schema value.")
        table = uniform(rng, (self.schema.n_value, config.d_a), config.init_range)
        if config.value_embedding_file:
            keys = [value_key(v.attribute, v.value) for v in self.schema.values]
            overwrite_rows(table, keys, config.value_embedding_file)
        elif not config.rand_value_emb:
            texts = [
                tokenize(v.attribute, config.tokenize) + [SEP_TOKEN] + tokenize(v.value, config.tokenize)
                for v in self.schema.values
            ]
            table = self.text_rows(params[EMBEDDING].data, texts, table)
        register_value_head(params, table, rng, config.init_range, config.freeze_value_emb)

    @property
    def head(self) -> ValueHead:
        return ValueHead.lookup(self.params)

    def gold_vector(self, instance: ProductInstance) -> np.ndarray:
        indices = [self.schema.value_index(p) for p in instance.pairs()]
        return multi_hot([i for i in indices if i is not None], self.schema.n_value)

    def value_probabilities(self, enc: EncoderOutput) -> DenseTensor:
        _, p_valueaware = value_attention(enc, self.head)
        return classify_values(p_valueaware, self.head)

    def instance_losses(self, instance: ProductInstance) -> Tuple[DenseTensor, DenseTensor]:
        enc = self.encode(instance)
        probabilities = [
            attribute_probabilities(decoder_free_context(enc, i, self.params), self.params)
            for i in range(self.schema.n_attr)
        ]
        attr_loss = attribute_loss(probabilities, self.attribute_labels(instance))
        value_loss = value_bce_loss(self.value_probabilities(enc), self.gold_vector(instance))
        return attr_loss, value_loss

    def _predict_encoded(
        self, instance: ProductInstance, enc: EncoderOutput
    ) -> Tuple[List[AttributeDecision], Set[Pair]]:
        decisions = [
            predict_attribute(decoder_free_context(enc, i, self.params), self.params, i)
            for i in range(self.schema.n_attr)
        ]
        chosen = selected_values(self.value_probabilities(enc), self.config.threshold)
        return decisions, {self.schema.values[i].pair for i in chosen}
