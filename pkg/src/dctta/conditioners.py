"""Domain-conditioner generation from the class token, plus the static ablation."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConditionerTriple(NamedTuple):
    """Query, key and value conditioners, each [..., 1, d]."""

    q: Tensor
    k: Tensor
    v: Tensor


def generate(class_token: Tensor, weight: Tensor, bias: Tensor) -> ConditionerTriple:
    """Affine map class_token @ W + b, split into contiguous (q, k, v) chunks of width d."""
    d = class_token.shape[-1]
    if weight.shape != (d, 3 * d) or bias.shape != (3 * d,):
        raise ValueError(f"generator expects weight ({d}, {3 * d}) and bias ({3 * d},), "
                         f"got {weight.shape} and {bias.shape}")
    out = ag.matmul(class_token, weight) + bias
    axis = out.ndim - 1
    return ConditionerTriple(*(ag.slice_rows(out, i * d, (i + 1) * d, axis=axis) for i in range(3)))


def init_generator(config) -> list[tuple[Tensor, Tensor]]:
    """One zero-initialised (weight [d, 3d], bias [3d]) pair per layer."""
    d = config.embed_dim
    return [(Tensor(np.zeros((d, 3 * d)), name=f"gen.{layer}.weight"),
             Tensor(np.zeros(3 * d), name=f"gen.{layer}.bias"))
            for layer in range(config.depth)]


def static_conditioners(vectors, batch: int) -> ConditionerTriple:
    """Broadcast learnable per-layer (q, k, v) vectors to every sample of a batch.

    The vectors do not depend on the input; this is the no-generator ablation.
    """
    if vectors is None:
        raise ValueError("static conditioners requested but the model has none (not in ablation mode)")
    out = []
    for vec in vectors:
        zeros = Tensor(np.zeros((batch, 1, vec.shape[-1]), dtype=vec.data.dtype))
        out.append(ag.add(zeros, vec))
    return ConditionerTriple(*out)
