"""Prototype memory: k-means initialisation, one-to-one assignment and the
prototype losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn


class PrototypeBank(nn.Module):
    """K learnable d-dimensional prototypes shared by both recurrent directions.

    Training requires K >= 2 for the separation loss; a single-prototype bank
    is accepted for the attention and cluster losses alone.
    """

    def __init__(self, n_prototypes: int, d: int, margin: float | None = None):
        super().__init__()
        if n_prototypes < 1:
            raise ValueError("need at least one prototype")
        self.K = n_prototypes
        self.d = d
        self.margin = 50.0 / math.sqrt(n_prototypes) if margin is None else float(margin)
        self.P = nn.Parameter(torch.zeros(n_prototypes, d))
        self.initialized = False

    def load_centroids(self, centroids) -> None:
        c = torch.as_tensor(np.asarray(centroids), dtype=self.P.dtype)
        if c.shape != self.P.shape:
            raise ValueError(f"centroids shape {tuple(c.shape)} != {tuple(self.P.shape)}")
        with torch.no_grad():
            self.P.copy_(c)
        self.initialized = True


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a centre
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(x, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6):
    """Lloyd iterations from k-means++ seeds. Returns ``(centroids, labels)``.

    A cluster that empties is re-seeded with the point farthest from its
    current centroid. Stops once no centroid moves more than ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("representations must be a 2-D array")
    if x.shape[0] < k:
        raise ValueError(
            f"k-means needs at least {k} representations, got {x.shape[0]}; "
            "use a larger warm-up sample or fewer prototypes"
        )
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_seeds(x, k, rng)
    labels = np.zeros(x.shape[0], dtype=int)
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(1)
        new = centroids.copy()
        taken = np.zeros(x.shape[0], dtype=bool)
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(0)
            else:
                far = d2[np.arange(x.shape[0]), labels]
                far = np.where(taken, -1.0, far)
                i = int(far.argmax())
                taken[i] = True
                new[j] = x[i]
                labels[i] = j
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        if shift < tol:
            break
    labels = _sq_dists(x, centroids).argmin(1)
    return centroids, labels


def init_kmeans(reps, n_prototypes: int, seed: int = 0, max_iters: int = 100, margin=None) -> PrototypeBank:
    reps = np.asarray(reps, dtype=np.float64)
    centroids, _ = kmeans(reps, n_prototypes, seed=seed, max_iters=max_iters)
    bank = PrototypeBank(n_prototypes, reps.shape[1], margin=margin)
    bank.load_centroids(centroids)
    return bank


# ---------------------------------------------------------------------------
# linear assignment
# ---------------------------------------------------------------------------


@dataclass
class Assignment:
    """``pairs[k] = (row, column)``; rows index prototypes, columns representations."""

    pairs: list[tuple[int, int]]
    cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=int)


def _augmenting_path_lap(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path solver for ``rows <= cols``; returns column per row.

    Dual variables keep every reduced cost non-negative, so each row is
    inserted with one Dijkstra-style search over the columns.
    """
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1)
    row4col = np.full(nc, -1)
    for cur in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1)
        seen_rows = np.zeros(nr, dtype=bool)
        seen_cols = np.zeros(nc, dtype=bool)
        i, min_val, sink = cur, 0.0, -1
        while sink < 0:
            seen_rows[i] = True
            reduced = min_val + cost[i] - u[i] - v
            better = ~seen_cols & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            cand = np.where(seen_cols, np.inf, shortest)
            low = cand.min()
            if not np.isfinite(low):
                raise ValueError("assignment problem is infeasible")
            ties = np.flatnonzero(cand == low)
            # prefer an unassigned column among equally short ones
            free = ties[row4col[ties] < 0]
            j = int(free[0] if free.size else ties[0])
            min_val = low
            seen_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = row4col[j]
        u[cur] += min_val
        others = seen_rows.copy()
        others[cur] = False
        u[others] += min_val - shortest[col4row[others]]
        v[seen_cols] -= min_val - shortest[seen_cols]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return col4row


def solve_lap(cost) -> Assignment:
    """Minimum-cost one-to-one assignment on a rectangular cost matrix.

    Every row is assigned when rows <= columns, otherwise every column.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
        raise ValueError(f"cost must be a non-empty 2-D matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")
    if c.shape[0] <= c.shape[1]:
        col4row = _augmenting_path_lap(c)
        pairs = [(i, int(j)) for i, j in enumerate(col4row)]
    else:
        row4col = _augmenting_path_lap(c.T)
        pairs = sorted((int(i), j) for j, i in enumerate(row4col))
    total = float(sum(c[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, cost=total)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pairwise_distances(a: Tensor, b: Tensor) -> Tensor:
    return torch.cdist(a, b, compute_mode="donot_use_mm_for_euclid_dist")


def loss_cluster(reps: Tensor, bank: PrototypeBank) -> tuple[Tensor, Tensor]:
    """Representation-to-prototype and prototype-to-representation losses.

    ``reps`` are detached here, so only the prototypes receive gradients.
    """
    if not bank.initialized:
        raise RuntimeError("prototype bank is not initialised")
    s = reps.detach().to(bank.P.dtype)
    dist = pairwise_distances(s, bank.P)  # [M, K]
    s_to_p = dist.min(dim=1).values.sum()
    assign = solve_lap(dist.detach().T.cpu().numpy())
    p_to_s = dist[torch.as_tensor(assign.cols), torch.as_tensor(assign.rows)].sum()
    return s_to_p, p_to_s


def loss_separation(bank: PrototypeBank) -> Tensor:
    """Hinge on every ordered pair of distinct prototypes closer than the margin."""
    if bank.K < 2:
        raise ValueError("separation loss needs at least two prototypes")
    P = bank.P
    dist = pairwise_distances(P, P)
    off = ~torch.eye(bank.K, dtype=torch.bool)
    return torch.clamp_min(bank.margin - dist[off], 0.0).sum()
