"""Multi-label value classifier with value-wise attention."""
from dataclasses import dataclass
from typing import List
from typing import Tuple

import numpy as np

from .Constants import THRESHOLD
from .Encoder import EncoderOutput
from .Exceptions import ContractError
from .Numkit import DenseTensor
from .Numkit import ModelParams
from .Numkit import Parameter
from .Numkit import add
from .Numkit import binary_cross_entropy
from .Numkit import matmul
from .Numkit import mean
from .Numkit import sigmoid
from .Numkit import softmax
from .Numkit import transpose
from .Numkit import uniform

VALUE_EMBEDDING = "classifier.W_v"
OUTPUT_WEIGHT = "classifier.W_out"
OUTPUT_BIAS = "classifier.b_out"


@dataclass
class ValueHead:
    W_v: Parameter
    W_out: Parameter
    b_out: Parameter

    def __post_init__(self) -> None:
        n_value, d_a = self.W_v.shape
        if self.W_out.shape != [n_value, d_a] or self.b_out.shape != [n_value]:
            raise ContractError(
                f"Value head shapes disagree: W_v {self.W_v.shape}, "
                f"W_out {self.W_out.shape}, b_out {self.b_out.shape}"
            )

    @property
    def n_value(self) -> int:
        return self.W_v.shape[0]

    @classmethod
    def lookup(cls, params: ModelParams) -> "ValueHead":
        return cls(params[VALUE_EMBEDDING], params[OUTPUT_WEIGHT], params[OUTPUT_BIAS])


def register_value_head(
    params: ModelParams,
    value_embedding: np.ndarray,
    rng: np.random.Generator,
    init_range: float,
    freeze_value_embedding: bool = False,
) -> ValueHead:
    n_value, d_a = value_embedding.shape
    params.add(VALUE_EMBEDDING, value_embedding, frozen=freeze_value_embedding)
    params.add(OUTPUT_WEIGHT, uniform(rng, (n_value, d_a), init_range))
    params.add(OUTPUT_BIAS, uniform(rng, (n_value,), init_range))
    return ValueHead.lookup(params)


def value_attention(enc: EncoderOutput, head: ValueHead) -> Tuple[DenseTensor, DenseTensor]:
    """Value-wise attention over the encoded text.

    Returns:
        ``Attn_v`` (N_value x L), each row a softmax over tokens, and
        ``P_valueaware`` (d_a), the mean over values of ``Attn_v . H_enc``.
    """
    attn = softmax(matmul(head.W_v, transpose(enc.H_enc)))
    return attn, mean(matmul(attn, enc.H_enc), axis=0)


def classify_values(p_valueaware, head: ValueHead) -> DenseTensor:
    """Independent sigmoid probability per value, ``sigmoid(W_out . P + b_out)``."""
    return sigmoid(add(matmul(head.W_out, p_valueaware), head.b_out))


def selected_values(probs: DenseTensor, threshold: float = THRESHOLD) -> List[int]:
    """Indices whose probability is strictly above ``threshold``."""
    return [int(i) for i in np.flatnonzero(probs.data > threshold)]


def value_bce_loss(y_pred, y_gold) -> DenseTensor:
    """Summed binary cross-entropy over all ``N_value`` entries."""
    return binary_cross_entropy(y_pred, y_gold)


def multi_hot(indices, n_value: int) -> np.ndarray:
    y = np.zeros(n_value)
    y[list(indices)] = 1.0
    return y
