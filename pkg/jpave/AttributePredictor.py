"""Two-class (exist/none) predictor per attribute, shared by both variants."""
from dataclasses import dataclass
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np

from .Encoder import EncoderOutput
from .Encoder import attend
from .Enums import AttributeClass
from .Exceptions import ContractError
from .Numkit import DenseTensor
from .Numkit import ModelParams
from .Numkit import add_all
from .Numkit import cross_entropy
from .Numkit import gather_rows
from .Numkit import matmul
from .Numkit import softmax
from .Numkit import uniform

ATTR_EMBEDDING = "attribute.E_attr"
ATTR_WEIGHT = "attribute_predictor.W"


@dataclass
class AttributeDecision:
    """Probabilities ``(exist, none)`` for one attribute and its gold class."""

    attribute_index: int
    probabilities: np.ndarray
    label: Optional[int] = None

    def __repr__(self) -> str:
        return f"AttributeDecision(attribute={self.attribute_index}, exists={self.exists})"

    @property
    def decision(self) -> AttributeClass:
        return AttributeClass(int(np.argmax(self.probabilities)))

    @property
    def exists(self) -> bool:
        return self.decision is AttributeClass.EXIST


def register_attribute_predictor(
    params: ModelParams, d_a: int, rng: np.random.Generator, init_range: float
) -> None:
    params.add(ATTR_WEIGHT, uniform(rng, (len(AttributeClass), d_a), init_range))


def attribute_probabilities(context, params: ModelParams) -> DenseTensor:
    """``softmax(W_c^attr . c_i1)`` as a differentiable 2-vector."""
    return softmax(matmul(params[ATTR_WEIGHT], context))


def predict_attribute(
    context, params: ModelParams, attribute_index: int = 0, label: Optional[int] = None
) -> AttributeDecision:
    probs = attribute_probabilities(context, params)
    return AttributeDecision(attribute_index, probs.data.copy(), label)


def _class_index(gold: Union[int, Sequence[float], np.ndarray]) -> int:
    if isinstance(gold, (int, np.integer)):
        return int(gold)
    one_hot = np.asarray(gold)
    if one_hot.shape != (len(AttributeClass),) or one_hot.sum() != 1:
        raise ContractError(f"Attribute gold must be a class index or one-hot 2-vector, got {gold}")
    return int(np.argmax(one_hot))


def attribute_loss(
    probabilities: Sequence[DenseTensor], gold: Sequence[Union[int, Sequence[float]]]
) -> DenseTensor:
    """``sum_i -log C_i(a_i)`` over all attributes, log-floored."""
    if len(probabilities) != len(gold):
        raise ContractError(
            f"attribute_loss needs one gold label per attribute, got {len(probabilities)} vs {len(gold)}"
        )
    return add_all([cross_entropy(p, _class_index(g)) for p, g in zip(probabilities, gold)])


def decoder_free_context(enc: EncoderOutput, attribute_index: int, params: ModelParams) -> DenseTensor:
    """First-step context without a decoder: ``E_attr[i]`` queries the encoder."""
    _, context = attend(gather_rows(params[ATTR_EMBEDDING], attribute_index), enc)
    return context
