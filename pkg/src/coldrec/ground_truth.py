"""Ground-truth embeddings for abundant nodes via BPR matrix factorization.

High-degree targets get their reference embeddings from a dot-product
factorization trained on their observed interactions; masked test nodes get
initial embeddings from a transductive run over the merged (full train +
masked test) edge set. Both tables later seed the graph encoders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .graph import ITEM, USER, InteractionGraph, MetaSplit, mask_edges
from .optim import adam_step
from .seeds import rng_for


@dataclass
class GroundTruthModel:
    user_table: np.ndarray
    item_table: np.ndarray
    dim: int
    reg: float
    loss_history: list = field(default_factory=list)

    def score(self, u: int, i: int) -> float:
        return float(self.user_table[u] @ self.item_table[i])

    def embedding(self, side: str, node: int) -> np.ndarray:
        table = self.user_table if side == USER else self.item_table
        return table[node]


def bpr_loss(y_pos, y_neg, lam: float = 0.0, theta_norm_sq=0.0):
    """Pairwise ranking loss -ln σ(y_pos - y_neg) + lam * theta_norm_sq.

    Accepts floats or autodiff tensors; the tensor path stays on the tape.
    """
    if isinstance(y_pos, ad.Tensor) or isinstance(y_neg, ad.Tensor):
        y_pos = ad.as_tensor(y_pos)
        y_neg = ad.as_tensor(y_neg)
        loss = ad.softplus(ad.neg(ad.sub(y_pos, y_neg)))
        if lam != 0.0:
            loss = ad.add(loss, ad.scale(ad.as_tensor(theta_norm_sq), lam))
        return loss
    x = float(y_pos) - float(y_neg)
    # -ln σ(x) = softplus(-x), computed stably
    base = math.log1p(math.exp(-abs(x))) + max(-x, 0.0)
    return base + lam * float(theta_norm_sq)


def sample_negatives(rng: np.random.Generator, users: np.ndarray, observed: set,
                     num_items: int) -> np.ndarray:
    """Uniform negative item per user, never an observed (user, item) pair."""
    if num_items < 2:
        raise DataError("negative sampling needs at least 2 items")
    neg = rng.integers(0, num_items, size=len(users))
    for idx in range(len(users)):
        guard = 0
        while (int(users[idx]), int(neg[idx])) in observed:
            neg[idx] = rng.integers(0, num_items)
            guard += 1
            if guard > 10000:
                raise DataError(f"user {users[idx]} interacts with every item")
    return neg


def _train_bpr_mf(num_users: int, num_items: int, edges, d: int, epochs: int,
                  lr: float, lam: float, seed: int,
                  batch_size: int = 8192, plateau: float = 1e-4,
                  patience: int = 5) -> GroundTruthModel:
    if not edges:
        raise DataError("BPR training needs at least one edge")
    rng = rng_for(seed, "mf")
    user_table = rng.normal(0.0, 0.1, size=(num_users, d))
    item_table = rng.normal(0.0, 0.1, size=(num_items, d))
    users = np.array([u for u, i, *_ in edges], dtype=np.int64)
    items = np.array([i for u, i, *_ in edges], dtype=np.int64)
    observed = {(int(u), int(i)) for u, i in zip(users, items)}

    state: dict = {}
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(users))
        epoch_loss = 0.0
        for lo in range(0, len(perm), batch_size):
            sel = perm[lo:lo + batch_size]
            bu, bi = users[sel], items[sel]
            bj = sample_negatives(rng, bu, observed, num_items)
            pu, pi, pj = user_table[bu], item_table[bi], item_table[bj]
            x = np.einsum("nd,nd->n", pu, pi) - np.einsum("nd,nd->n", pu, pj)
            epoch_loss += float(np.sum(np.logaddexp(0.0, -x)))
            s = 1.0 / (1.0 + np.exp(np.clip(x, -500, 500)))  # σ(-x)
            gu = -s[:, None] * (pi - pj) + 2.0 * lam * pu
            gi = -s[:, None] * pu + 2.0 * lam * pi
            gj = s[:, None] * pu + 2.0 * lam * pj
            grad_u = np.zeros_like(user_table)
            grad_i = np.zeros_like(item_table)
            np.add.at(grad_u, bu, gu)
            np.add.at(grad_i, bi, gi)
            np.add.at(grad_i, bj, gj)
            adam_step({"u": user_table, "i": item_table},
                      {"u": grad_u, "i": grad_i}, state, lr)
        history.append(epoch_loss / len(users))
        if len(history) > patience:
            prev = history[-patience - 1]
            if prev > 0 and (prev - history[-1]) / prev < plateau:
                break
    return GroundTruthModel(user_table=user_table, item_table=item_table,
                            dim=d, reg=lam, loss_history=history)


def train_ground_truth(g: InteractionGraph, split: MetaSplit, d: int = 256,
                       epochs: int = 50, lr: float = 0.005, lam: float = 1e-5,
                       seed: int = 0) -> GroundTruthModel:
    """Factorize the abundant interactions of the split's target nodes."""
    if not split.d_t:
        raise DataError("train_ground_truth: empty target set")
    targets = set(split.d_t)
    edges = [(u, i, t) for u, i, t in g.edges
             if (u if split.side == USER else i) in targets]
    return _train_bpr_mf(g.num_users, g.num_items, edges, d, epochs, lr, lam, seed)


def merged_edges(g: InteractionGraph, train_nodes, keep_map: dict, side: str):
    """Full edges of the training nodes plus kept edges of masked nodes."""
    train_set = set(train_nodes)
    out = []
    for u, i, t in g.edges:
        own, other = (u, i) if side == USER else (i, u)
        if own in train_set:
            out.append((u, i, t))
        elif own in keep_map and other in keep_map[own]:
            out.append((u, i, t))
    return out


def train_transductive(g: InteractionGraph, train_nodes, keep_map: dict,
                       side: str = USER, d: int = 256, epochs: int = 50,
                       lr: float = 0.005, lam: float = 1e-5,
                       seed: int = 0) -> GroundTruthModel:
    """Factorize the merged train/masked-test edge set.

    The resulting tables provide the initial node embeddings consumed by
    the graph encoders; masked nodes are embedded from their few kept
    interactions only.
    """
    edges = merged_edges(g, train_nodes, keep_map, side)
    if not edges:
        raise DataError("train_transductive: merged edge set is empty")
    return _train_bpr_mf(g.num_users, g.num_items, edges, d, epochs, lr, lam, seed)


def masked_world(g: InteractionGraph, keep_map: dict, side: str) -> InteractionGraph:
    """Graph with masked nodes reduced to their kept neighbors."""
    return mask_edges(g, keep_map, side)
