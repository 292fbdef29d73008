"""GRU value generator with a copy mechanism over the input text.

Each attribute is decoded independently. The decoder state starts from the
product representation ``e_L`` and the first input is the attribute
embedding ``E_attr[i]``; later inputs are the word embeddings of the
previous (gold or predicted) token.
"""
import logging
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .AttributePredictor import ATTR_EMBEDDING
from .Classes import TargetSequence
from .Constants import EOS_ID
from .Constants import T_MAX
from .Encoder import EMBEDDING
from .Encoder import EncoderOutput
from .Encoder import attend
from .Exceptions import ContractError
from .Numkit import DenseTensor
from .Numkit import GruCellParams
from .Numkit import ModelParams
from .Numkit import add
from .Numkit import add_all
from .Numkit import concat
from .Numkit import cross_entropy
from .Numkit import gather_rows
from .Numkit import gru_cell
from .Numkit import matmul
from .Numkit import mul
from .Numkit import no_grad
from .Numkit import scatter_add
from .Numkit import sigmoid
from .Numkit import softmax
from .Numkit import sub
from .Numkit import uniform

logger = logging.getLogger(__name__)

DECODER_GRU = "generator.gru"
COPY_WEIGHT = "generator.W_cm"
COPY_BIAS = "generator.b_cm"


@dataclass
class DecodeStep:
    h_dec: DenseTensor
    p_vocab: DenseTensor
    p_input: DenseTensor
    p_gen: DenseTensor
    context: DenseTensor
    p_final: DenseTensor

    def __repr__(self) -> str:
        return f"DecodeStep(p_gen={float(self.p_gen.data.reshape(-1)[0]):.4f})"


@dataclass
class DecodeTrace:
    """Greedy decoding of one attribute, ``[EOS]`` included when reached."""

    attribute_index: int
    token_ids: List[int] = field(default_factory=list)
    steps: List[DecodeStep] = field(default_factory=list)

    def __repr__(self) -> str:
        return f"DecodeTrace(attribute={self.attribute_index}, length={len(self.token_ids)})"

    @property
    def first_context(self) -> DenseTensor:
        return self.steps[0].context

    @property
    def finished(self) -> bool:
        return bool(self.token_ids) and self.token_ids[-1] == EOS_ID

    def to_json(self) -> dict:
        return {
            "attribute_index": self.attribute_index,
            "token_ids": list(self.token_ids),
            "p_gen": [float(s.p_gen.data.reshape(-1)[0]) for s in self.steps],
        }


def register_generator(
    params: ModelParams, d_a: int, rng: np.random.Generator, init_range: float
) -> None:
    GruCellParams.register(params, DECODER_GRU, d_a, d_a, rng, init_range)
    params.add(COPY_WEIGHT, uniform(rng, (1, 3 * d_a), init_range))
    params.add(COPY_BIAS, uniform(rng, (1,), init_range))


def decode_step(
    prev_embedding,
    h_prev,
    enc: EncoderOutput,
    params: ModelParams,
    no_copy: bool = False,
    p_gen_override: Optional[float] = None,
) -> DecodeStep:
    """One decoder step.

    ``p_final = p_gen * p_vocab + (1 - p_gen) * copy`` where ``copy``
    scatter-adds the input attention onto the vocabulary ids of the input
    tokens, so repeated tokens accumulate.

    Args:
        prev_embedding: Embedding of the previous token, or ``E_attr[i]``
            at the first step.
        h_prev: Previous decoder state, ``e_L`` at the first step.
        enc: Encoder output of the product text.
        params: Model registry.
        no_copy (optional): Drop the copy path, ``p_final = p_vocab``.
        p_gen_override (optional): Use this constant instead of the learned
            gate.

    Raises:
        ContractError: If ``p_gen_override`` is outside ``[0, 1]``.
    """
    E = params[EMBEDDING]
    h = gru_cell(prev_embedding, h_prev, GruCellParams.lookup(params, DECODER_GRU))
    p_vocab = softmax(matmul(E, h))
    p_input, context = attend(h, enc)

    if no_copy:
        return DecodeStep(h, p_vocab, p_input, DenseTensor([1.0]), context, p_vocab)

    if p_gen_override is not None:
        if not 0.0 <= p_gen_override <= 1.0:
            raise ContractError(f"p_gen override must lie in [0, 1], got {p_gen_override}")
        p_gen = DenseTensor([p_gen_override])
    else:
        gate_input = concat([h, prev_embedding, context])
        p_gen = sigmoid(add(matmul(params[COPY_WEIGHT], gate_input), params[COPY_BIAS]))

    copy = scatter_add(p_input, enc.token_ids, E.shape[0])
    p_final = add(mul(p_gen, p_vocab), mul(sub(1.0, p_gen), copy))
    return DecodeStep(h, p_vocab, p_input, p_gen, context, p_final)


def generate_sequence(
    attribute_index: int,
    enc: EncoderOutput,
    params: ModelParams,
    t_max: int = T_MAX,
    no_copy: bool = False,
) -> DecodeTrace:
    """Greedy decoding until ``[EOS]`` or ``t_max`` tokens."""
    if t_max < 1:
        raise ContractError(f"t_max must be positive, got {t_max}")
    trace = DecodeTrace(attribute_index)
    with no_grad():
        E = params[EMBEDDING]
        prev = gather_rows(params[ATTR_EMBEDDING], attribute_index)
        h = enc.e_L
        for _ in range(t_max):
            step = decode_step(prev, h, enc, params, no_copy=no_copy)
            token = int(np.argmax(step.p_final.data))
            trace.steps.append(step)
            trace.token_ids.append(token)
            if token == EOS_ID:
                break
            h = step.h_dec
            prev = gather_rows(E, token)
    if not trace.finished:
        logger.debug("Attribute %d hit t_max=%d without [EOS]", attribute_index, t_max)
    return trace


def teacher_forced_nll(
    targets: Sequence[TargetSequence],
    enc: EncoderOutput,
    params: ModelParams,
    no_copy: bool = False,
    order: Optional[Sequence[int]] = None,
) -> Tuple[DenseTensor, List[DenseTensor]]:
    """Summed ``-log p_final(y_j)`` over all attributes and steps.

    Args:
        targets: One composed target per attribute, in attribute order.
        order (optional): Positions of ``targets`` in the order they are
            decoded. The total is always summed in attribute order.

    Returns:
        The value loss and each attribute's first-step context ``c_i1``,
        indexed like ``targets``.
    """
    positions = list(range(len(targets))) if order is None else list(order)
    if sorted(positions) != list(range(len(targets))):
        raise ContractError(f"order must be a permutation of 0..{len(targets) - 1}")

    E_attr = params[ATTR_EMBEDDING]
    E = params[EMBEDDING]
    losses: List[Optional[DenseTensor]] = [None] * len(targets)
    contexts: List[Optional[DenseTensor]] = [None] * len(targets)
    for k in positions:
        target = targets[k]
        if not target.token_ids:
            raise ContractError(f"Empty target for attribute {target.attribute_index}")
        prev = gather_rows(E_attr, target.attribute_index)
        h = enc.e_L
        step_losses = []
        for j, y in enumerate(target.token_ids):
            step = decode_step(prev, h, enc, params, no_copy=no_copy)
            if j == 0:
                contexts[k] = step.context
            step_losses.append(cross_entropy(step.p_final, y))
            h = step.h_dec
            prev = gather_rows(E, y)
        losses[k] = add_all(step_losses)
    return add_all(losses), contexts
