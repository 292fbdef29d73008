"""Embedding layer and bidirectional GRU text encoder."""
from dataclasses import dataclass
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from .Exceptions import ContractError
from .Numkit import DenseTensor
from .Numkit import GruCellParams
from .Numkit import ModelParams
from .Numkit import concat
from .Numkit import gather_rows
from .Numkit import gru_cell
from .Numkit import matmul
from .Numkit import softmax
from .Numkit import stack
from .Numkit import uniform

EMBEDDING = "embedding.E"
GRU_FWD = "encoder.gru_fwd"
GRU_BWD = "encoder.gru_bwd"


@dataclass
class EncoderOutput:
    """Token representations ``H_enc`` (L x d_a) and product representation ``e_L``."""

    H_enc: DenseTensor
    e_L: DenseTensor
    token_ids: Tuple[int, ...]

    def __repr__(self) -> str:
        return f"EncoderOutput(L={self.length}, d_a={self.d_a})"

    @property
    def length(self) -> int:
        return self.H_enc.shape[0]

    @property
    def d_a(self) -> int:
        return self.H_enc.shape[1]


def register_encoder(
    params: ModelParams,
    vocab_size: int,
    hidden_size: int,
    rng: np.random.Generator,
    init_range: float,
) -> None:
    d_a = 2 * hidden_size
    params.add(EMBEDDING, uniform(rng, (vocab_size, d_a), init_range))
    GruCellParams.register(params, GRU_FWD, d_a, hidden_size, rng, init_range)
    GruCellParams.register(params, GRU_BWD, d_a, hidden_size, rng, init_range)


def encode(
    token_ids: Sequence[int], params: ModelParams, l_max: Optional[int] = None
) -> EncoderOutput:
    """Run the Bi-GRU over ``token_ids`` at their true length.

    Row ``t`` of ``H_enc`` is ``[forward state at t; backward state at t]``
    and ``e_L`` is ``[last forward state; last backward state]``.

    Raises:
        ContractError: On an empty or over-long input or an out-of-range id.
    """
    ids = tuple(int(i) for i in token_ids)
    E = params[EMBEDDING]
    if not ids or (l_max is not None and len(ids) > l_max):
        raise ContractError(f"encode needs 1..{l_max or 'L_max'} tokens, got {len(ids)}")
    if min(ids) < 0 or max(ids) >= E.shape[0]:
        raise ContractError(f"Token id out of range for vocabulary of {E.shape[0]}")

    fwd = GruCellParams.lookup(params, GRU_FWD)
    bwd = GruCellParams.lookup(params, GRU_BWD)
    inputs = [gather_rows(E, i) for i in ids]

    h = DenseTensor(np.zeros(fwd.hidden_size))
    forward_states = []
    for x in inputs:
        h = gru_cell(x, h, fwd)
        forward_states.append(h)

    h = DenseTensor(np.zeros(bwd.hidden_size))
    backward_states = [h] * len(ids)
    for t in reversed(range(len(ids))):
        h = gru_cell(inputs[t], h, bwd)
        backward_states[t] = h

    H_enc = stack([concat([f, b]) for f, b in zip(forward_states, backward_states)])
    e_L = concat([forward_states[-1], backward_states[0]])
    return EncoderOutput(H_enc, e_L, ids)


def attend(query, enc: EncoderOutput) -> Tuple[DenseTensor, DenseTensor]:
    """Generator-encoder attention.

    Returns:
        The weights ``softmax(H_enc . query)`` over the L tokens and the
        context vector ``weights^T . H_enc``.
    """
    weights = softmax(matmul(enc.H_enc, query))
    return weights, matmul(weights, enc.H_enc)
