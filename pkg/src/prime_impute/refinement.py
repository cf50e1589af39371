"""Series-conditioned prototype refinement and the final imputation head."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .numerics import activation, apply_linear, linear_bias, linear_weight, softmax_scaled


class RefineParams(nn.Module):
    def __init__(self, n_features: int, d: int, d_mlp: int | None = None, gelu_form: str = "exact"):
        super().__init__()
        d_mlp = d if d_mlp is None else d_mlp
        self.d = d
        self.gelu_form = gelu_form
        self.U_zeta = linear_weight(d, d)
        self.V_zeta = linear_weight(d, d)
        self.W_zeta = linear_weight(d, d)
        self.U_xi = linear_weight(d, d)
        self.V_xi = linear_weight(d, d)
        self.W_xi = linear_weight(d, d)
        self.mlp_w1 = linear_weight(d_mlp, 2 * d)
        self.mlp_b1 = linear_bias(d_mlp, 2 * d)
        self.mlp_w2 = linear_weight(n_features, d_mlp)
        self.mlp_b2 = linear_bias(n_features, d_mlp)


def refine_prototypes(prototypes: Tensor, H: Tensor, params: RefineParams, valid: Tensor | None = None):
    """Per-series refined prototypes ``[B, K, d]`` and their weights over steps ``[B, K, T]``.

    ``H`` is ``[B, T, d]``; ``valid`` (``[B, T]``) excludes padded steps.
    """
    query = apply_linear(params.V_zeta, prototypes)  # [K, d]
    keys = apply_linear(params.W_zeta, H)  # [B, T, d]
    scores = torch.einsum("kd,btd->bkt", query, keys)
    zeta = softmax_scaled(scores, 1.0 / math.sqrt(params.d), dim=-1,
                          valid=None if valid is None else valid[:, None, :])
    refined = zeta @ apply_linear(params.U_zeta, H)
    return refined, zeta


def attend_refined(H: Tensor, refined: Tensor, params: RefineParams):
    """Attention of every step over the (refined) prototypes; returns ``(H*, xi)``.

    ``refined`` is ``[B, K, d]`` or a shared ``[K, d]`` bank.
    """
    query = apply_linear(params.V_xi, H)  # [B, T, d]
    keys = apply_linear(params.W_xi, refined)
    vals = apply_linear(params.U_xi, refined)
    scores = query @ keys.transpose(-1, -2)  # [B, T, K]
    xi = softmax_scaled(scores, 1.0 / math.sqrt(params.d))
    return xi @ vals, xi


def impute_final(H: Tensor, H_star: Tensor, params: RefineParams) -> Tensor:
    """Two-layer GELU perceptron on ``(H | H*)``; predicts every entry."""
    hidden = activation("gelu", apply_linear(params.mlp_w1, torch.cat([H, H_star], dim=-1), params.mlp_b1),
                        gelu_form=params.gelu_form)
    return apply_linear(params.mlp_w2, hidden, params.mlp_b2)
