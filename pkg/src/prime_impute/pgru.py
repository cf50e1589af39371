"""Prototype gated recurrent unit and the bidirectional runner.

All step functions operate on a batch: ``x``, ``m`` and ``delta`` are
``[B, N]``, hidden states ``[B, d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .numerics import apply_linear, linear_bias, linear_weight, softmax_scaled

# exp(-80) stays a normal number in float32, so the decay never reaches 0
MAX_DECAY_EXPONENT = 80.0


class PGRUParams(nn.Module):
    """Parameters of one recurrent direction."""

    def __init__(self, n_features: int, d: int):
        super().__init__()
        n = n_features
        self.n_features = n
        self.d = d
        self.W_delta = linear_weight(d, n)
        self.W_h = linear_weight(n, d)
        self.W_f = linear_weight(n, n)
        # GRU cell on (x_f | m), input width 2N
        self.W_z = linear_weight(d, 2 * n)
        self.U_z = linear_weight(d, d)
        self.b_z = linear_bias(d, d)
        self.W_r = linear_weight(d, 2 * n)
        self.U_r = linear_weight(d, d)
        self.b_r = linear_bias(d, d)
        self.W_n = linear_weight(d, 2 * n)
        self.U_n = linear_weight(d, d)
        self.b_n = linear_bias(d, d)
        self.V_kappa = linear_weight(d, d)
        self.W_kappa = linear_weight(d, d)
        self.U_kappa = linear_weight(d, d)
        self.W_alpha = linear_weight(d, 2 * d)
        self.register_buffer("off_diagonal", 1.0 - torch.eye(n), persistent=False)
        self.project()

    @torch.no_grad()
    def project(self) -> None:
        """Re-zero the diagonal of the feature-correlation map."""
        self.W_f.fill_diagonal_(0.0)

    def feature_map(self) -> Tensor:
        return self.W_f * self.off_diagonal.to(self.W_f.dtype)


@dataclass
class StepOutput:
    h: Tensor
    h_intra: Tensor
    decay: Tensor
    pred_h: Tensor
    pred_f: Tensor
    x_h: Tensor
    x_f: Tensor
    kappa: Tensor | None = None
    alpha: Tensor | None = None


def decay_hidden(delta: Tensor, h_prev: Tensor, params: PGRUParams) -> tuple[Tensor, Tensor]:
    """Returns ``(decay, decay * h_prev)`` with ``decay = exp(-max(0, W_delta delta))``."""
    rate = torch.clamp(apply_linear(params.W_delta, delta), 0.0, MAX_DECAY_EXPONENT)
    decay = torch.exp(-rate)
    return decay, decay * h_prev


def impute_step(x: Tensor, m: Tensor, h_decayed: Tensor, params: PGRUParams):
    """History-based then feature-based imputation; returns ``(x_h, pred_h, x_f, pred_f)``."""
    pred_h = apply_linear(params.W_h, h_decayed)
    x_h = m * x + (1 - m) * pred_h
    pred_f = apply_linear(params.feature_map(), x_h)
    x_f = m * x + (1 - m) * pred_f
    return x_h, pred_h, x_f, pred_f


def gru_step(x_f: Tensor, m: Tensor, h: Tensor, params: PGRUParams) -> Tensor:
    u = torch.cat([x_f, m], dim=-1)
    p = params
    z = torch.sigmoid(apply_linear(p.W_z, u) + apply_linear(p.U_z, h) + p.b_z)
    r = torch.sigmoid(apply_linear(p.W_r, u) + apply_linear(p.U_r, h) + p.b_r)
    cand = torch.tanh(apply_linear(p.W_n, u) + apply_linear(p.U_n, r * h) + p.b_n)
    return (1 - z) * cand + z * h


def prototype_keys(prototypes: Tensor, params: PGRUParams) -> tuple[Tensor, Tensor]:
    """Projected keys ``W_kappa p`` and values ``U_kappa p``; constant over a sequence."""
    return apply_linear(params.W_kappa, prototypes), apply_linear(params.U_kappa, prototypes)


def prototype_attend(h_intra: Tensor, keys: Tensor, vals: Tensor, params: PGRUParams):
    """Scaled dot-product attention of the step state over prototypes.

    Returns ``(h_inter, kappa)`` with ``kappa`` of shape ``[B, K]``.
    """
    query = apply_linear(params.V_kappa, h_intra)
    kappa = softmax_scaled(query @ keys.T, 1.0 / math.sqrt(params.d))
    return kappa @ vals, kappa


def fuse(h_intra: Tensor, h_inter: Tensor, params: PGRUParams) -> tuple[Tensor, Tensor]:
    alpha = torch.sigmoid(apply_linear(params.W_alpha, torch.cat([h_intra, h_inter], dim=-1)))
    return alpha * h_intra + (1 - alpha) * h_inter, alpha


def pgru_step(x, m, delta, h_prev, params: PGRUParams, prototypes: Tensor | None = None, keys=None) -> StepOutput:
    decay, h_dec = decay_hidden(delta, h_prev, params)
    x_h, pred_h, x_f, pred_f = impute_step(x, m, h_dec, params)
    h_intra = gru_step(x_f, m, h_dec, params)
    out = StepOutput(h_intra, h_intra, decay, pred_h, pred_f, x_h, x_f)
    if prototypes is not None:
        if keys is None:
            keys = prototype_keys(prototypes, params)
        h_inter, out.kappa = prototype_attend(h_intra, *keys, params)
        out.h, out.alpha = fuse(h_intra, h_inter, params)
    return out


def run_direction(x, m, delta, params: PGRUParams, prototypes: Tensor | None = None, keep_attention=False):
    """Unroll one direction over ``[B, T, N]`` inputs; returns stacked per-step tensors.

    Same arithmetic as repeated :func:`pgru_step`, with the step-independent
    work (decay rates, gate weights, prototype keys) hoisted out of the loop.
    """
    B, T, _ = x.shape
    if T == 0:
        raise ValueError("cannot run a recurrent pass over zero steps")
    p = params
    d = p.d
    decay = torch.exp(-torch.clamp(apply_linear(p.W_delta, delta), 0.0, MAX_DECAY_EXPONENT))
    mx = m * x
    miss = 1 - m
    W_f = p.feature_map()
    # input-side gate pre-activations only depend on x_f, so W_z | W_r | W_n act as one map
    W_u = torch.cat([p.W_z, p.W_r, p.W_n], dim=0)
    U_zr = torch.cat([p.U_z, p.U_r], dim=0)
    b_zr = torch.cat([p.b_z, p.b_r])
    if prototypes is not None:
        keys, vals = prototype_keys(prototypes, p)
        scale = 1.0 / math.sqrt(d)
    # unbind keeps the backward of per-step indexing cheap
    decay_t, mx_t, miss_t, m_t_all = decay.unbind(1), mx.unbind(1), miss.unbind(1), m.unbind(1)
    h = x.new_zeros(B, d)
    fields = ("h", "h_intra", "pred_h", "pred_f", "x_h", "x_f")
    acc = {k: [] for k in fields}
    kappas, alphas = [], []
    for t in range(T):
        h_dec = decay_t[t] * h
        pred_h = apply_linear(p.W_h, h_dec)
        x_h = mx_t[t] + miss_t[t] * pred_h
        pred_f = apply_linear(W_f, x_h)
        x_f = mx_t[t] + miss_t[t] * pred_f
        gu_zr, gu_n = apply_linear(W_u, torch.cat([x_f, m_t_all[t]], dim=-1)).split([2 * d, d], dim=-1)
        z, r = torch.sigmoid(gu_zr + apply_linear(U_zr, h_dec, b_zr)).chunk(2, dim=-1)
        cand = torch.tanh(gu_n + apply_linear(p.U_n, r * h_dec, p.b_n))
        h_intra = cand + z * (h_dec - cand)
        h = h_intra
        if prototypes is not None:
            kappa = softmax_scaled(apply_linear(p.V_kappa, h_intra) @ keys.T, scale)
            h_inter = kappa @ vals
            alpha = torch.sigmoid(apply_linear(p.W_alpha, torch.cat([h_intra, h_inter], dim=-1)))
            h = h_inter + alpha * (h_intra - h_inter)
            if keep_attention:
                kappas.append(kappa)
                alphas.append(alpha)
        for k, v in zip(fields, (h, h_intra, pred_h, pred_f, x_h, x_f)):
            acc[k].append(v)
    res = {k: torch.stack(v, dim=1) for k, v in acc.items()}
    res["decay"] = decay
    if kappas:
        res["kappa"] = torch.stack(kappas, dim=1)
        res["alpha"] = torch.stack(alphas, dim=1)
    return res


def reverse_padded(t: Tensor, rev_index: Tensor) -> Tensor:
    """Reverse each sequence within its own length; padding stays at the end."""
    idx = rev_index[:, :, None].expand(-1, -1, t.shape[-1])
    return torch.gather(t, 1, idx)


class Bidirectional(nn.Module):
    """Forward and backward P-GRU plus the projection of both states into ``d``."""

    def __init__(self, n_features: int, d: int):
        super().__init__()
        self.fwd = PGRUParams(n_features, d)
        self.bwd = PGRUParams(n_features, d)
        self.W_bi = linear_weight(d, 2 * d)

    def project(self) -> None:
        self.fwd.project()
        self.bwd.project()

    def forward(self, x, m, delta_fwd, delta_bwd, rev_index, prototypes=None, keep_attention=False):
        """``delta_bwd`` must already be in per-sequence reversed order.

        Returns ``(H, fwd, bwd)``; backward outputs are re-aligned to forward
        time.
        """
        fwd = run_direction(x, m, delta_fwd, self.fwd, prototypes, keep_attention)
        xr, mr = reverse_padded(x, rev_index), reverse_padded(m, rev_index)
        bwd_r = run_direction(xr, mr, delta_bwd, self.bwd, prototypes, keep_attention)
        bwd = {k: reverse_padded(v, rev_index) for k, v in bwd_r.items()}
        H = apply_linear(self.W_bi, torch.cat([fwd["h"], bwd["h"]], dim=-1))
        return H, fwd, bwd

