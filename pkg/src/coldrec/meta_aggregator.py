"""Encoder variant that injects a meta embedding into every convolution step.

Each interior episode node gets a meta embedding computed by the
meta learner from the initial embeddings of its own sampled children, and
every convolution step concatenates (meta, self, pooled children). The
final projection step is unchanged from the basic encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import (NodeTables, _encode_batch, _first_row, init_gnn_params)
from .errors import DataError
from .graph import Episode
from .meta_learner import MetaLearnerParams, meta_embed_blocks


@dataclass
class MetaAggParams:
    """Triple-concat convolution weights plus the meta learner they wrap."""

    dim: int
    depth: int
    meta: MetaLearnerParams
    aggregator: str = "mean"
    activation: str = "sigmoid"
    conv_weights: list = field(default_factory=list)  # step l: (d, 3d)
    final_weight: ad.Tensor | None = None             # (d, d)
    attn_vectors: list = field(default_factory=list)

    def named(self, prefix: str = "agg") -> dict:
        out = {}
        for l, w in enumerate(self.conv_weights, start=1):
            out[f"{prefix}/conv_w{l}"] = w
        out[f"{prefix}/final_w"] = self.final_weight
        for l, a in enumerate(self.attn_vectors, start=1):
            out[f"{prefix}/attn_v{l}"] = a
        return out

    def trainable(self, include_meta: bool = False) -> dict:
        out = self.named()
        if include_meta:
            out.update(self.meta.trainable())
        return out


def init_meta_agg_params(rng: np.random.Generator, dim: int, depth: int,
                         meta: MetaLearnerParams, aggregator: str = "mean",
                         activation: str = "sigmoid") -> MetaAggParams:
    base = init_gnn_params(rng, dim, depth, aggregator, activation, concat_arity=3)
    return MetaAggParams(dim=dim, depth=depth, meta=meta, aggregator=aggregator,
                         activation=activation, conv_weights=base.conv_weights,
                         final_weight=base.final_weight, attn_vectors=base.attn_vectors)


def meta_conv_step(meta_vec: ad.Tensor, self_embed: ad.Tensor, neighbor_embeds,
                   w_l: ad.Tensor, aggregator: str = "mean",
                   activation: str = "sigmoid",
                   attn: ad.Tensor | None = None) -> ad.Tensor:
    """act(W^l · concat(meta, self, pooled neighbors))."""
    from .encoder import conv_step
    return conv_step(self_embed, neighbor_embeds, w_l, aggregator=aggregator,
                     activation=activation, attn=attn, meta_embed=meta_vec)


def _meta_rows_fn(params: MetaAggParams):
    """Per-depth meta embeddings of interior nodes from their children's inits.

    Nodes are grouped by child count so each group runs as one blocked
    attention call; childless rows get zero meta embeddings (they are
    pass-through rows in the convolution anyway)."""

    def fn(plan, inits, m):
        n_rows = plan.ids[m - 1].size
        child_init = inits[m + 1]
        seg = plan.child_seg[m - 1]
        child_rows = plan.child_rows[m - 1]
        counts = np.bincount(seg, minlength=n_rows)
        order = np.argsort(seg, kind="stable")
        offsets = np.concatenate([[0], np.cumsum(counts)])
        blocks: list = []
        owners: list = []
        for c in sorted(set(counts.tolist())):
            rows_with_c = np.nonzero(counts == c)[0]
            if c == 0:
                blocks.append(ad.Tensor(np.zeros((len(rows_with_c), params.dim))))
                owners.extend(rows_with_c.tolist())
                continue
            gather = np.concatenate([order[offsets[r]:offsets[r + 1]] for r in rows_with_c])
            x = ad.rows(child_init, child_rows[gather])
            blocks.append(meta_embed_blocks(x, params.meta, c))
            owners.extend(rows_with_c.tolist())
        stacked = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
        perm = np.empty(n_rows, dtype=np.int64)
        perm[np.asarray(owners, dtype=np.int64)] = np.arange(n_rows)
        return ad.rows(stacked, perm)

    return fn


def encode_batch_with_meta(episodes: list, tables: NodeTables,
                           params: MetaAggParams) -> ad.Tensor:
    return _encode_batch(episodes, tables, params.conv_weights, params.final_weight,
                         params.aggregator, params.activation, params.attn_vectors,
                         meta_fn=_meta_rows_fn(params))


def encode_with_meta(episode: Episode, tables: NodeTables,
                     params: MetaAggParams) -> ad.Tensor:
    """Predicted target embedding with meta-augmented convolution steps."""
    if episode.depth < 1:
        raise DataError("encode_with_meta: episode has no hops")
    return _first_row(encode_batch_with_meta([episode], tables, params))
