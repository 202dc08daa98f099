"""Cross-view attention: the atom-level affinity matrix and the two attended
representations built from it.

Both views describe the same molecule with the same atom order, so the
affinity S is N x N with S[i, j] = <W2d h2d_i, W3d h3d_j>. Row-softmax of S
gives the weights xi used by 2D queries over 3D keys; column-softmax gives
zeta for the 3D-queried direction. No 1/sqrt(d) scaling is applied; an
optional temperature divides S before the softmaxes (default 1).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor


@dataclass
class AlignParams:
    w2d: Tensor  # (2h, p)
    w3d: Tensor  # (2h, p)


@dataclass
class AttentionOutput:
    s: Tensor  # (N, N)
    xi: Tensor  # row-stochastic
    zeta: Tensor  # column-stochastic
    h2d_attended: Tensor  # (N, 2h); row j aligned to 3D atom j
    h3d_attended: Tensor  # (N, 2h); row i aligned to 2D atom i


def affinity(h2d: Tensor, h3d: Tensor, params: AlignParams) -> Tensor:
    if h2d.shape[0] != h3d.shape[0]:
        raise T.ShapeMismatch(f"affinity: {h2d.shape[0]} vs {h3d.shape[0]} atoms")
    p2d = T.matmul(h2d, params.w2d)
    p3d = T.matmul(h3d, params.w3d)
    return T.matmul(p2d, T.transpose(p3d))


def attend_2d_queries(s: Tensor, h3d: Tensor) -> tuple[Tensor, Tensor]:
    """xi = row-softmax(S); attended 3D rows for each 2D query atom."""
    if s.shape[1] != h3d.shape[0]:
        raise T.ShapeMismatch(f"attend_2d_queries: {s.shape} vs {h3d.shape}")
    xi = T.softmax_rows(s)
    return xi, T.matmul(xi, h3d)


def attend_3d_queries(s: Tensor, h2d: Tensor) -> tuple[Tensor, Tensor]:
    """zeta = column-softmax(S); attended 2D rows for each 3D query atom."""
    if s.shape[0] != h2d.shape[0]:
        raise T.ShapeMismatch(f"attend_3d_queries: {s.shape} vs {h2d.shape}")
    zeta = T.softmax_cols(s)
    return zeta, T.matmul(T.transpose(zeta), h2d)


def cross_attend(h2d: Tensor, h3d: Tensor, params: AlignParams,
                 temperature: float = 1.0) -> AttentionOutput:
    s = affinity(h2d, h3d, params)
    if temperature != 1.0:
        s = T.scale(s, 1.0 / temperature)
    xi, h3d_att = attend_2d_queries(s, h3d)
    zeta, h2d_att = attend_3d_queries(s, h2d)
    return AttentionOutput(s=s, xi=xi, zeta=zeta,
                           h2d_attended=h2d_att, h3d_attended=h3d_att)
