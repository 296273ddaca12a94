"""Multi-head attentional fusion of an anchor embedding with its support set.

The input is a (K+1, d) stack of embeddings, anchor first.  Each head
projects the stack three ways, self-attends, and the concatenated head
outputs pass through a row-wise affine layer; the fused vector is the mean
of the input rows plus the summed affine rows.  Mean-pooling and
cross-attention variants are available as alternative fusion strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import xavier_uniform
from .tensor import Tensor, concat, matmul, mean_rows, softmax_rows, sum_rows

FUSION_MHAF = "mhaf"
FUSION_MEAN = "mean"
FUSION_CROSS_ATTENTION = "cross-attention"
FUSION_STRATEGIES = (FUSION_MHAF, FUSION_MEAN, FUSION_CROSS_ATTENTION)


@dataclass
class MhafParams:
    Wx: list[Tensor]  # per head, (d, d_c)
    Wy: list[Tensor]
    Wz: list[Tensor]
    fc_W: Tensor  # (d, d)
    fc_b: Tensor  # (d,)
    # attention logits divided by sqrt(attn_scale_dim); defaults to d
    attn_scale_dim: int

    @property
    def H(self) -> int:
        return len(self.Wx)

    @property
    def d(self) -> int:
        return self.fc_W.shape[0]

    @property
    def d_c(self) -> int:
        return self.Wx[0].shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for h in range(self.H):
            out[f"Wx{h}"] = self.Wx[h]
            out[f"Wy{h}"] = self.Wy[h]
            out[f"Wz{h}"] = self.Wz[h]
        out["fc_W"] = self.fc_W
        out["fc_b"] = self.fc_b
        return out


def init_mhaf(d: int, H: int, seed: int,
              attn_scale_dim: int | None = None) -> MhafParams:
    """Glorot head projections; fc starts near zero so the module opens
    close to plain mean pooling."""
    if d % H != 0:
        raise ValueError(f"head count {H} must divide embedding dim {d}")
    d_c = d // H
    rng = np.random.default_rng(seed)
    mk = lambda: Tensor(xavier_uniform(rng, d, d_c), requires_grad=True)
    Wx = [mk() for _ in range(H)]
    Wy = [mk() for _ in range(H)]
    Wz = [mk() for _ in range(H)]
    fc_W = Tensor(rng.normal(0.0, 0.02, size=(d, d)), requires_grad=True)
    fc_b = Tensor(np.zeros(d), requires_grad=True)
    return MhafParams(Wx=Wx, Wy=Wy, Wz=Wz, fc_W=fc_W, fc_b=fc_b,
                      attn_scale_dim=d if attn_scale_dim is None else attn_scale_dim)


def _check_input(params: MhafParams, E: Tensor) -> None:
    if E.shape[-1] != params.d:
        raise ValueError(f"row length {E.shape[-1]} != fused dim {params.d}")


def mhaf_fuse(params: MhafParams, E) -> Tensor:
    """Fuse a (K+1, d) anchor-first stack into a single (d,) embedding."""
    E = E if isinstance(E, Tensor) else Tensor(E)
    _check_input(params, E)
    scale = 1.0 / np.sqrt(params.attn_scale_dim)
    heads = []
    for h in range(params.H):
        Xh = matmul(E, params.Wx[h])
        Yh = matmul(E, params.Wy[h])
        Zh = matmul(E, params.Wz[h])
        Ah = softmax_rows(matmul(Xh, Yh.T) * scale)
        heads.append(matmul(Ah, Zh))
    Ehat = concat(heads, axis=-1)
    fc = matmul(Ehat, params.fc_W) + params.fc_b
    return mean_rows(E) + sum_rows(fc)


def mhaf_fuse_batch(params: MhafParams, E) -> Tensor:
    """Batched fusion: (B, K+1, d) -> (B, d), row b fused independently."""
    E = E if isinstance(E, Tensor) else Tensor(E)
    _check_input(params, E)
    scale = 1.0 / np.sqrt(params.attn_scale_dim)
    heads = []
    for h in range(params.H):
        Xh = matmul(E, params.Wx[h])
        Yh = matmul(E, params.Wy[h])
        Zh = matmul(E, params.Wz[h])
        Ah = softmax_rows(matmul(Xh, Yh.transpose(0, 2, 1)) * scale)
        heads.append(matmul(Ah, Zh))
    Ehat = concat(heads, axis=-1)
    fc = matmul(Ehat, params.fc_W) + params.fc_b
    return E.mean(axis=1) + fc.sum(axis=1)


def mean_fuse_batch(E) -> Tensor:
    """Mean-pooling fusion ablation: (B, K+1, d) -> (B, d)."""
    E = E if isinstance(E, Tensor) else Tensor(E)
    return E.mean(axis=1)


def cross_attention_fuse_batch(params: MhafParams, E) -> Tensor:
    """Cross-attention ablation: the anchor row queries the whole stack.

    Per head the anchor projection attends over all rows' key/value
    projections; head outputs are concatenated, passed through the affine
    layer, and added to the anchor.
    """
    E = E if isinstance(E, Tensor) else Tensor(E)
    _check_input(params, E)
    scale = 1.0 / np.sqrt(params.attn_scale_dim)
    anchor = E[:, 0:1, :]  # (B, 1, d)
    heads = []
    for h in range(params.H):
        qh = matmul(anchor, params.Wx[h])  # (B, 1, d_c)
        Yh = matmul(E, params.Wy[h])
        Zh = matmul(E, params.Wz[h])
        Ah = softmax_rows(matmul(qh, Yh.transpose(0, 2, 1)) * scale)
        heads.append(matmul(Ah, Zh))  # (B, 1, d_c)
    att = concat(heads, axis=-1)
    fc = matmul(att, params.fc_W) + params.fc_b
    return (anchor + fc).sum(axis=1)


def fuse_batch(strategy: str, params: MhafParams | None, E) -> Tensor:
    """Dispatch on the configured fusion strategy."""
    if strategy == FUSION_MHAF:
        return mhaf_fuse_batch(params, E)
    if strategy == FUSION_MEAN:
        return mean_fuse_batch(E)
    if strategy == FUSION_CROSS_ATTENTION:
        return cross_attention_fuse_batch(params, E)
    raise ValueError(f"unknown fusion strategy {strategy!r}")
