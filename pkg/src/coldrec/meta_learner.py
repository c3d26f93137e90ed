"""Self-attention summary of a node's first-order neighbors.

One attention block, multi-head, no positional encoding (the neighbor set
is unordered) and no feed-forward sublayer: query/key/value projections,
scaled dot-product attention per head, head concatenation, then an
elementwise average over the neighbor axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError
from .graph import InteractionGraph, build_episode
from .optim import Adam
from .seeds import child_seed, rng_for


@dataclass
class MetaLearnerParams:
    dim: int
    heads: int
    wq: ad.Tensor
    wk: ad.Tensor
    wv: ad.Tensor

    def named(self, prefix: str = "meta") -> dict:
        return {f"{prefix}/wq": self.wq, f"{prefix}/wk": self.wk, f"{prefix}/wv": self.wv}

    def trainable(self) -> dict:
        return self.named()

    def set_trainable(self, flag: bool) -> None:
        for t in (self.wq, self.wk, self.wv):
            t.requires_grad = flag


def init_meta_learner(rng: np.random.Generator, dim: int, heads: int = 4) -> MetaLearnerParams:
    if dim % heads != 0:
        raise DataError(f"head count {heads} must divide embedding dim {dim}")
    return MetaLearnerParams(
        dim=dim, heads=heads,
        wq=ad.parameter(ad.xavier_uniform(rng, dim, dim)),
        wk=ad.parameter(ad.xavier_uniform(rng, dim, dim)),
        wv=ad.parameter(ad.xavier_uniform(rng, dim, dim)),
    )


def _attend(x: ad.Tensor, params: MetaLearnerParams) -> ad.Tensor:
    """Multi-head self-attention outputs for a (n, d) neighbor matrix."""
    q = ad.matmul(x, params.wq)
    k = ad.matmul(x, params.wk)
    v = ad.matmul(x, params.wv)
    width = params.dim // params.heads
    heads = []
    for h in range(params.heads):
        lo, hi = h * width, (h + 1) * width
        heads.append(ad.scaled_dot_attention(
            ad.slice_cols(q, lo, hi), ad.slice_cols(k, lo, hi), ad.slice_cols(v, lo, hi)))
    return heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)


def meta_embed(first_order_inits, params: MetaLearnerParams) -> ad.Tensor:
    """Meta embedding: averaged self-attention over first-order neighbors."""
    if isinstance(first_order_inits, ad.Tensor):
        x = first_order_inits
        if x.data.ndim != 2 or x.shape[0] == 0:
            raise DataError("meta_embed: need a nonempty (n, d) tensor")
    else:
        if not first_order_inits:
            raise DataError("meta_embed: empty neighbor set")
        x = ad.stack_rows(list(first_order_inits))
    return ad.mean_axis0(_attend(x, params))


def meta_embed_blocks(x: ad.Tensor, params: MetaLearnerParams, block: int) -> ad.Tensor:
    """Meta embeddings for many nodes at once: ``x`` stacks each node's
    ``block`` neighbor rows consecutively; returns one row per node."""
    if x.data.ndim != 2 or x.shape[0] % max(block, 1) != 0:
        raise DataError(f"meta_embed_blocks: {x.shape} not divisible into blocks of {block}")
    q = ad.matmul(x, params.wq)
    k = ad.matmul(x, params.wk)
    v = ad.matmul(x, params.wv)
    width = params.dim // params.heads
    heads = []
    for h in range(params.heads):
        lo, hi = h * width, (h + 1) * width
        heads.append(ad.block_attention(ad.slice_cols(q, lo, hi),
                                        ad.slice_cols(k, lo, hi),
                                        ad.slice_cols(v, lo, hi), block))
    att = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    groups = x.shape[0] // block
    seg = np.repeat(np.arange(groups), block)
    return ad.segment_mean(att, seg, groups)


def meta_learner_epoch(graph: InteractionGraph, targets: list, truth_table: np.ndarray,
                       tables, params: MetaLearnerParams, opt: Adam, *, k: int,
                       seed: int, epoch: int, side: str = "user",
                       batch_size: int = 64) -> float:
    """One pass fitting meta embeddings of K sampled first-order neighbors
    to the targets' reference embeddings under the cosine objective."""
    rng = rng_for(seed, "meta_order", epoch)
    targets = sorted(targets)
    other = "item" if side == "user" else "user"
    order = rng.permutation(len(targets))
    total = 0.0
    for lo in range(0, len(order), batch_size):
        batch = [targets[i] for i in order[lo:lo + batch_size]]
        hops = {t: build_episode(graph, t, k, 1, child_seed(seed, "metaep", epoch, t),
                                 side).hops[0] for t in batch}
        # group by neighbor count so each group is one blocked-attention call
        by_count: dict = {}
        for t in batch:
            by_count.setdefault(len(hops[t]), []).append(t)
        preds, owners = [], []
        for c, group in sorted(by_count.items()):
            ids = np.concatenate([np.asarray(hops[t], dtype=np.int64) for t in group])
            preds.append(meta_embed_blocks(ad.rows(tables.of(other), ids), params, c))
            owners.extend(group)
        h = preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)
        truth = ad.Tensor(truth_table[np.asarray(owners, dtype=np.int64)])
        loss = ad.rsub_const(1.0, ad.mean(ad.cosine_rows(h, truth)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(batch)
    return total / len(targets)


def train_meta_learner(graph: InteractionGraph, targets: list, truth_table: np.ndarray,
                       tables, params: MetaLearnerParams, *, k: int, epochs: int,
                       lr: float, seed: int, side: str = "user",
                       batch_size: int = 64) -> list:
    """Fit the attention projections; returns per-epoch mean loss history."""
    opt = Adam(params.trainable(), lr)
    return [meta_learner_epoch(graph, targets, truth_table, tables, params, opt,
                               k=k, seed=seed, epoch=e, side=side, batch_size=batch_size)
            for e in range(epochs)]
