"""The full imputation model and padded batches of series."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .config import TrainConfig
from .data import Series, compute_time_gaps
from .pgru import Bidirectional
from .prototypes import PrototypeBank
from .refinement import RefineParams, attend_refined, impute_final, refine_prototypes


@dataclass
class Batch:
    x: Tensor  # [B, T, N]
    m: Tensor  # [B, T, N]
    delta_fwd: Tensor  # [B, T, N]
    delta_bwd: Tensor  # [B, T, N], per-sequence reversed order
    rev_index: Tensor  # [B, T] long
    valid: Tensor  # [B, T] bool
    ids: tuple[str, ...]

    @property
    def observed(self) -> Tensor:
        return self.m * self.valid[..., None].to(self.m.dtype)


def make_batch(series: Sequence[Series], dtype=None) -> Batch:
    """Right-pad series to a common length; padded steps are fully missing."""
    if not series:
        raise ValueError("empty batch")
    dtype = dtype or torch.get_default_dtype()
    B = len(series)
    T = max(s.length for s in series)
    N = series[0].values.shape[1]
    x = np.zeros((B, T, N))
    m = np.zeros((B, T, N))
    df = np.zeros((B, T, N))
    db = np.zeros((B, T, N))
    rev = np.tile(np.arange(T), (B, 1))
    valid = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(series):
        L = s.length
        if L == 0:
            raise ValueError(f"series {s.id} has no steps")
        x[b, :L] = s.values * s.mask
        m[b, :L] = s.mask
        df[b, :L] = compute_time_gaps(s.timestamps, s.mask)
        db[b, :L] = compute_time_gaps(s.timestamps, s.mask, reverse=True)
        rev[b, :L] = np.arange(L)[::-1]
        valid[b, :L] = True
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return Batch(as_t(x), as_t(m), as_t(df), as_t(db), torch.as_tensor(rev, dtype=torch.long),
                 torch.as_tensor(valid), tuple(s.id for s in series))


class PRIME(nn.Module):
    """Bidirectional P-GRU, prototype bank and refinement head.

    ``prototypes_active`` switches the prototype attention in both the
    recurrent cells and the refinement head; when off, each step state is
    the plain GRU state and the holistic representation is zero.
    """

    def __init__(self, n_features: int, config: TrainConfig):
        super().__init__()
        d = config.hidden_size
        self.n_features = n_features
        self.config = config
        self.rnn = Bidirectional(n_features, d)
        self.head = RefineParams(n_features, d, config.d_mlp, config.gelu)
        self.bank = PrototypeBank(config.n_prototypes, d, config.effective_margin)

    def project(self) -> None:
        self.rnn.project()

    def prototypes_usable(self, active: bool) -> bool:
        return active and not self.config.disable_prototypes and self.bank.initialized

    def forward(self, batch: Batch, prototypes_active: bool = True, keep_attention: bool = False) -> dict:
        use = self.prototypes_usable(prototypes_active)
        P = self.bank.P if use else None
        H, fwd, bwd = self.rnn(batch.x, batch.m, batch.delta_fwd, batch.delta_bwd, batch.rev_index,
                               P, keep_attention)
        out = {"H": H, "fwd": fwd, "bwd": bwd}
        if use:
            if self.config.disable_refinement:
                H_star, xi = attend_refined(H, P, self.head)
            else:
                refined, zeta = refine_prototypes(P, H, self.head, batch.valid)
                H_star, xi = attend_refined(H, refined, self.head)
                if keep_attention:
                    out["zeta"] = zeta
            if keep_attention:
                out["xi"] = xi
        else:
            H_star = torch.zeros_like(H)
        out["H_star"] = H_star
        out["x_hat"] = impute_final(H, H_star, self.head)
        return out

    @torch.no_grad()
    def impute(self, batch: Batch, prototypes_active: bool = True) -> Tensor:
        """Final predictions with observed entries passed through."""
        x_hat = self.forward(batch, prototypes_active)["x_hat"]
        return batch.m * batch.x + (1 - batch.m) * x_hat

    def non_prototype_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("bank.")]
