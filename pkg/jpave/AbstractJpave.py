import logging
from abc import ABC
from abc import abstractmethod
from typing import TYPE_CHECKING
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple

import numpy as np

from .AttributePredictor import ATTR_EMBEDDING
from .AttributePredictor import AttributeDecision
from .AttributePredictor import register_attribute_predictor
from .Classes import Pair
from .Classes import Prediction
from .Classes import ProductInstance
from .Classes import Schema
from .Constants import SEP_TOKEN
from .Data import Vocab
from .Data import tokenize
from .Encoder import EMBEDDING
from .Encoder import EncoderOutput
from .Encoder import encode
from .Encoder import register_encoder
from .Enums import AttributeClass
from .Enums import Variant
from .Exceptions import ConfigError
from .Numkit import DenseTensor
from .Numkit import ModelParams
from .Numkit import no_grad
from .Numkit import uniform
from .Storage import overwrite_rows

if TYPE_CHECKING:
    from .Training import TrainConfig

logger = logging.getLogger(__name__)


def value_key(attribute: str, value: str) -> str:
    """Row key of a value in a value-embedding file."""
    return f"{attribute} {SEP_TOKEN} {value}"


class AbstractJpave(ABC):
    """An abstract class (abc) for both JPAVE variants.

    Holds what the variants share: the embedding table, the Bi-GRU text
    encoder, the attribute embeddings ``E_attr`` and the attribute
    predictor. Subclasses add their value head and decide how values are
    produced.

    Args:
        config: Training configuration; sizes, flags and the init seed.
        vocab: Vocabulary the embedding rows follow.
        schema: Attribute and value inventories.
        params (optional): An existing registry, e.g. from a checkpoint.
            Fresh parameters are initialised from ``config.seed`` otherwise.
    """

    variant: Variant

    def __init__(
        self,
        config: "TrainConfig",
        vocab: Vocab,
        schema: Schema,
        params: Optional[ModelParams] = None,
    ) -> None:
        if config.variant is not self.variant:
            raise ConfigError(
                f"{type(self).__name__} needs variant {self.variant.value}, "
                f"got {config.variant.value}"
            )
        if schema.n_attr == 0:
            raise ConfigError("The schema has no attributes.")
        self.config = config
        self.vocab = vocab
        self.schema = schema
        self.params = params if params is not None else self._init_params()

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(vocab={len(self.vocab)}, n_attr={self.schema.n_attr}, "
            f"n_value={self.schema.n_value}, params={self.params.size()})"
        )

    def _init_params(self) -> ModelParams:
        config = self.config
        rng = np.random.default_rng(config.seed)
        params = ModelParams()
        register_encoder(params, len(self.vocab), config.encoder_hidden, rng, config.init_range)
        E = params[EMBEDDING].data
        if config.embedding_file:
            hits = overwrite_rows(E, self.vocab.id_to_token, config.embedding_file)
            logger.info("Loaded %d of %d vocabulary embeddings", hits, len(self.vocab))

        attr_table = uniform(rng, (self.schema.n_attr, config.d_a), config.init_range)
        if config.attr_embedding_file:
            overwrite_rows(attr_table, self.schema.attributes, config.attr_embedding_file)
        elif not config.rand_attr_emb:
            names = [tokenize(a, config.tokenize) for a in self.schema.attributes]
            attr_table = self.text_rows(E, names, attr_table)
        params.add(ATTR_EMBEDDING, attr_table, frozen=config.freeze_attr_emb)

        register_attribute_predictor(params, config.d_a, rng, config.init_range)
        self._register_head(params, rng)
        return params

    def text_rows(
        self, E: np.ndarray, texts: Sequence[Sequence[str]], fallback: np.ndarray
    ) -> np.ndarray:
        """Mean vocabulary embedding of each token list.

        A row whose text yields no tokens keeps its ``fallback`` row.
        """
        table = fallback.copy()
        for row, tokens in enumerate(texts):
            ids = self.vocab.encode(tokens)
            if ids:
                table[row] = E[ids].mean(axis=0)
        return table

    @abstractmethod
    def _register_head(self, params: ModelParams, rng: np.random.Generator) -> None:
        """Adds the variant's value head to ``params``."""
        raise NotImplementedError

    @abstractmethod
    def instance_losses(self, instance: ProductInstance) -> Tuple[DenseTensor, DenseTensor]:
        """Computes the attribute and value losses of one instance.

        Returns:
            ``(L^attr, L^value)`` as differentiable scalars.
        """
        raise NotImplementedError

    @abstractmethod
    def _predict_encoded(
        self, instance: ProductInstance, enc: EncoderOutput
    ) -> Tuple[List[AttributeDecision], Set[Pair]]:
        """Attribute decisions and candidate values for an encoded instance."""
        raise NotImplementedError

    def token_ids(self, instance: ProductInstance) -> List[int]:
        return self.vocab.encode(instance.tokens)

    def encode(self, instance: ProductInstance) -> EncoderOutput:
        return encode(self.token_ids(instance), self.params, self.config.l_max)

    def attribute_labels(self, instance: ProductInstance) -> List[AttributeClass]:
        present = instance.attributes()
        return [
            AttributeClass.EXIST if a in present else AttributeClass.NONE
            for a in self.schema.attributes
        ]

    def predict(self, instance: ProductInstance) -> Prediction:
        """Predicts the attributes and (attribute, value) pairs of one instance.

        With ``gate_values`` set, values are kept only for attributes the
        attribute predictor marks as existing.
        """
        with no_grad():
            decisions, pairs = self._predict_encoded(instance, self.encode(instance))
        attributes = frozenset(
            self.schema.attributes[d.attribute_index] for d in decisions if d.exists
        )
        if self.config.gate_values:
            pairs = {p for p in pairs if p[0] in attributes}
        return Prediction(instance.id, attributes, frozenset(pairs))

    def predict_dataset(self, instances: Iterable[ProductInstance]) -> List[Prediction]:
        return [self.predict(instance) for instance in instances]
