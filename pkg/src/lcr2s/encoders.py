"""Toy two-stage encoders: tanh hidden layer, linear head.

Each modality gets its own parameter set with identical architecture.  The
hidden activation is exposed as the low-stage embedding and the linear head
as the high-stage embedding, so losses can align both depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul


@dataclass
class EncoderParams:
    W1: Tensor  # (input_dim, d1)
    b1: Tensor  # (d1,)
    W2: Tensor  # (d1, d)
    b2: Tensor  # (d,)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def d1(self) -> int:
        return self.W1.shape[1]

    @property
    def d(self) -> int:
        return self.W2.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass(frozen=True)
class StageFeatures:
    low: Tensor  # (..., d1)
    high: Tensor  # (..., d)


def xavier_uniform(rng: np.random.Generator, fan_in: int,
                   fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder(input_dim: int, d1: int, d: int, seed: int) -> EncoderParams:
    """Uniform Glorot weights, zero biases; deterministic per seed."""
    if min(input_dim, d1, d) < 1:
        raise ValueError("encoder dims must be positive")
    rng = np.random.default_rng(seed)
    return EncoderParams(
        W1=Tensor(xavier_uniform(rng, input_dim, d1), requires_grad=True),
        b1=Tensor(np.zeros(d1), requires_grad=True),
        W2=Tensor(xavier_uniform(rng, d1, d), requires_grad=True),
        b2=Tensor(np.zeros(d), requires_grad=True),
    )


def encode(params: EncoderParams, x) -> StageFeatures:
    """Forward one vector or a stack of row vectors through both stages.

    low = tanh(x W1 + b1), high = low W2 + b2.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = xt.data.ndim == 1
    if squeeze:
        xt = xt.reshape(1, -1)
    if xt.shape[-1] != params.input_dim:
        raise ValueError(
            f"input dim {xt.shape[-1]} != encoder dim {params.input_dim}")
    low = (matmul(xt, params.W1) + params.b1).tanh()
    high = matmul(low, params.W2) + params.b2
    if squeeze:
        low, high = low.reshape(-1), high.reshape(-1)
    return StageFeatures(low=low, high=high)
