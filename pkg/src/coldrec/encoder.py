"""Multi-step graph convolution over sampled episodes.

An episode is encoded bottom-up and layer-synchronously: at convolution
step l every node that still matters updates from its sampled children's
step-(l-1) embeddings, and after the last step the target is predicted
from its first-order neighbors alone (no self term). Nodes whose children
were all pruned away keep their previous embedding at that step.

Batch encoding flattens all episodes of a mini-batch into per-depth
matrices so each convolution step is one matrix multiply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError
from .graph import Episode, InteractionGraph, build_episode
from .optim import Adam
from .seeds import child_seed, rng_for

AGGREGATORS = ("mean", "attention", "lightgcn")
ACTIVATIONS = ("sigmoid", "relu", "tanh")


@dataclass
class NodeTables:
    """Initial embeddings for every user and item, as autodiff tensors."""

    user: ad.Tensor
    item: ad.Tensor

    @classmethod
    def from_arrays(cls, user_table: np.ndarray, item_table: np.ndarray,
                    trainable: bool = False) -> "NodeTables":
        return cls(user=ad.Tensor(user_table, requires_grad=trainable),
                   item=ad.Tensor(item_table, requires_grad=trainable))

    def of(self, kind: str) -> ad.Tensor:
        return self.user if kind == "user" else self.item

    @property
    def dim(self) -> int:
        return self.user.shape[1]


def _activate(x: ad.Tensor, kind: str) -> ad.Tensor:
    if kind == "sigmoid":
        return ad.sigmoid(x)
    if kind == "relu":
        return ad.relu(x)
    if kind == "tanh":
        return ad.tanh(x)
    raise DataError(f"unknown activation: {kind}")


@dataclass
class GnnParams:
    """Per-step convolution weights of the basic encoder (self ⊕ neighbors)."""

    dim: int
    depth: int
    aggregator: str = "mean"
    activation: str = "sigmoid"
    conv_weights: list = field(default_factory=list)  # step l: (d, 2d)
    final_weight: ad.Tensor | None = None             # (d, d)
    attn_vectors: list = field(default_factory=list)  # per step (d,), attention only

    concat_arity = 2

    def named(self, prefix: str = "gnn") -> dict:
        out = {}
        for l, w in enumerate(self.conv_weights, start=1):
            out[f"{prefix}/conv_w{l}"] = w
        out[f"{prefix}/final_w"] = self.final_weight
        for l, a in enumerate(self.attn_vectors, start=1):
            out[f"{prefix}/attn_v{l}"] = a
        return out

    def trainable(self) -> dict:
        return self.named()


def init_gnn_params(rng: np.random.Generator, dim: int, depth: int,
                    aggregator: str = "mean", activation: str = "sigmoid",
                    concat_arity: int = 2) -> GnnParams:
    if depth < 1:
        raise DataError(f"encoder depth must be >= 1, got {depth}")
    if aggregator not in AGGREGATORS:
        raise DataError(f"unknown aggregator: {aggregator}")
    params = GnnParams(dim=dim, depth=depth, aggregator=aggregator, activation=activation)
    for _ in range(depth - 1):
        params.conv_weights.append(
            ad.parameter(ad.xavier_uniform(rng, dim, concat_arity * dim)))
        if aggregator == "attention":
            params.attn_vectors.append(
                ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=dim)))
    params.final_weight = ad.parameter(ad.xavier_uniform(rng, dim, dim))
    return params


def aggregate(neighbor_embeds, kind: str, attn: ad.Tensor | None = None) -> ad.Tensor:
    """Pool a nonempty set of neighbor vectors into one vector."""
    if isinstance(neighbor_embeds, ad.Tensor):
        x = neighbor_embeds
        if x.data.ndim != 2 or x.shape[0] == 0:
            raise DataError("aggregate: need a nonempty (n, d) tensor")
    else:
        if not neighbor_embeds:
            raise DataError("aggregate: empty neighborhood")
        x = ad.stack_rows(list(neighbor_embeds))
    n = x.shape[0]
    if kind == "mean":
        return ad.mean_axis0(x)
    if kind == "lightgcn":
        # neighbor-count normalized sum: sum / sqrt(n)
        return ad.scale(ad.mean_axis0(x), n / math.sqrt(n))
    if kind == "attention":
        if attn is None:
            raise DataError("attention aggregator needs a scoring vector")
        weights = ad.softmax(ad.matmul(x, attn), axis=-1)
        return ad.matmul(weights, x)
    raise DataError(f"unknown aggregator: {kind}")


def conv_step(self_embed: ad.Tensor, neighbor_embeds, w_l: ad.Tensor,
              aggregator: str = "mean", activation: str = "sigmoid",
              attn: ad.Tensor | None = None,
              meta_embed: ad.Tensor | None = None) -> ad.Tensor:
    """One convolution update: act(W^l · concat(self, pooled neighbors)).

    With ``meta_embed`` the concatenation becomes (meta, self, pooled)."""
    agg = aggregate(neighbor_embeds, aggregator, attn)
    parts = [self_embed, agg] if meta_embed is None else [meta_embed, self_embed, agg]
    x = ad.concat(parts, axis=0)
    if w_l.shape[1] != x.shape[0]:
        raise DimensionError(f"conv_step: weight {w_l.shape} vs input {x.shape}")
    return _activate(ad.matmul(w_l, x), activation)


def final_step(first_hop_embeds, w_final: ad.Tensor,
               aggregator: str = "mean", activation: str = "sigmoid",
               attn: ad.Tensor | None = None) -> ad.Tensor:
    """Predict the target from pooled first-order neighbors (no self term)."""
    agg = aggregate(first_hop_embeds, aggregator, attn)
    return _activate(ad.matmul(w_final, agg), activation)


def reconstruction_loss(h_pred: ad.Tensor, h_true: ad.Tensor) -> ad.Tensor:
    """1 - cos(prediction, reference); zero at a perfect match."""
    return ad.rsub_const(1.0, ad.cosine(h_pred, h_true))


class _BatchPlan:
    """Flattened index structure for encoding a batch of episodes."""

    def __init__(self, episodes: list, depth: int):
        if not episodes:
            raise DataError("encode: empty episode batch")
        side = episodes[0].side
        for ep in episodes:
            if ep.side != side:
                raise DataError("encode: mixed-side episode batch")
            if not ep.hops or not ep.hops[0]:
                raise DataError(f"encode: episode for {ep.side} {ep.target} has no first hop")
        self.episodes = episodes
        self.depth = depth
        self.side = side
        self.kinds = [episodes[0].kind_at(m) for m in range(1, depth + 1)]
        self.ids: list[np.ndarray] = []
        row_maps: list[list[dict]] = []
        for m in range(1, depth + 1):
            ids: list[int] = []
            maps = []
            for ep in episodes:
                hop = ep.hops[m - 1] if m <= ep.depth else []
                maps.append({nid: len(ids) + j for j, nid in enumerate(hop)})
                ids.extend(hop)
            self.ids.append(np.asarray(ids, dtype=np.int64))
            row_maps.append(maps)
        self.child_rows: list[np.ndarray] = []
        self.child_seg: list[np.ndarray] = []
        self.has_children: list[np.ndarray] = []
        for m in range(1, depth):
            rows_: list[int] = []
            seg: list[int] = []
            mask = np.zeros(len(self.ids[m - 1]))
            for b, ep in enumerate(episodes):
                if m >= ep.depth:
                    continue
                for nid, row in row_maps[m - 1][b].items():
                    cs = ep.children_of(m, nid)
                    if cs:
                        mask[row] = 1.0
                        for c in cs:
                            rows_.append(row_maps[m][b][c])
                            seg.append(row)
            self.child_rows.append(np.asarray(rows_, dtype=np.int64))
            self.child_seg.append(np.asarray(seg, dtype=np.int64))
            self.has_children.append(mask)
        self.hop1_seg = np.concatenate(
            [np.full(len(ep.hops[0]), b, dtype=np.int64) for b, ep in enumerate(episodes)])


def _pool_children(child_emb: ad.Tensor, seg: np.ndarray, n_rows: int,
                   aggregator: str, attn: ad.Tensor | None) -> ad.Tensor:
    if aggregator == "mean":
        return ad.segment_mean(child_emb, seg, n_rows)
    if aggregator == "lightgcn":
        counts = np.bincount(seg, minlength=n_rows).astype(np.float64)
        factors = 1.0 / np.sqrt(np.maximum(counts, 1.0))
        return ad.scale_rows(ad.segment_sum(child_emb, seg, n_rows), factors)
    if aggregator == "attention":
        pooled: list[ad.Tensor] = []
        d = child_emb.shape[1]
        zero = ad.Tensor(np.zeros(d))
        for row in range(n_rows):
            sel = np.nonzero(seg == row)[0]
            if sel.size == 0:
                pooled.append(zero)
                continue
            x = ad.rows(child_emb, sel)
            weights = ad.softmax(ad.matmul(x, attn), axis=-1)
            pooled.append(ad.matmul(weights, x))
        return ad.stack_rows(pooled)
    raise DataError(f"unknown aggregator: {aggregator}")


def _encode_batch(episodes: list, tables: NodeTables, conv_weights: list,
                  final_weight: ad.Tensor, aggregator: str, activation: str,
                  attn_vectors: list, meta_fn=None) -> ad.Tensor:
    """Shared batched encoder; ``meta_fn`` supplies per-depth meta embeddings."""
    depth = len(conv_weights) + 1
    plan = _BatchPlan(episodes, depth)
    emb: dict[int, ad.Tensor] = {}
    for m in range(1, depth + 1):
        if plan.ids[m - 1].size:
            emb[m] = ad.rows(tables.of(plan.kinds[m - 1]), plan.ids[m - 1])
    inits = dict(emb)
    meta_rows: dict[int, ad.Tensor] = {}
    if meta_fn is not None:
        for m in range(1, depth):
            if m in emb and plan.child_rows[m - 1].size:
                meta_rows[m] = meta_fn(plan, inits, m)
    for l in range(1, depth):
        w = conv_weights[l - 1]
        attn = attn_vectors[l - 1] if attn_vectors else None
        new_emb: dict[int, ad.Tensor] = {}
        for m in range(1, depth - l + 1):
            if m not in emb:
                continue
            if m + 1 not in emb or plan.child_rows[m - 1].size == 0:
                new_emb[m] = emb[m]
                continue
            n_rows = plan.ids[m - 1].size
            child_emb = ad.rows(emb[m + 1], plan.child_rows[m - 1])
            pooled = _pool_children(child_emb, plan.child_seg[m - 1], n_rows,
                                    aggregator, attn)
            parts = [emb[m], pooled]
            if meta_fn is not None:
                parts.insert(0, meta_rows[m])
            x = ad.concat(parts, axis=1)
            h = _activate(ad.matmul(x, ad.transpose(w)), activation)
            mask = plan.has_children[m - 1]
            if mask.min() < 1.0:
                h = ad.add(ad.scale_rows(h, mask), ad.scale_rows(emb[m], 1.0 - mask))
            new_emb[m] = h
        emb.update(new_emb)
    pooled = _pool_children(emb[1], plan.hop1_seg, len(episodes), aggregator,
                            attn_vectors[-1] if attn_vectors else None)
    return _activate(ad.matmul(pooled, ad.transpose(final_weight)), activation)


def encode_batch(episodes: list, tables: NodeTables, params: GnnParams) -> ad.Tensor:
    return _encode_batch(episodes, tables, params.conv_weights, params.final_weight,
                         params.aggregator, params.activation, params.attn_vectors)


def encode_target(episode: Episode, tables: NodeTables, params: GnnParams) -> ad.Tensor:
    """Predicted embedding of one episode's target node."""
    return _first_row(encode_batch([episode], tables, params))


def _first_row(out: ad.Tensor) -> ad.Tensor:
    row = ad.rows(out, np.array([0]))
    return ad.mean_axis0(row)


def reconstruction_epoch(graph: InteractionGraph, targets: list, truth_table: np.ndarray,
                         tables: NodeTables, params, opt: Adam, *, k: int, seed: int,
                         epoch: int, side: str = "user", batch_size: int = 64,
                         encode_fn=None) -> float:
    """One pass of cosine-reconstruction training over freshly sampled episodes.

    Episode sampling and batch order derive from (seed, epoch), so a resumed
    run replays the identical pass. Returns the mean loss."""
    if encode_fn is None:
        encode_fn = lambda eps: encode_batch(eps, tables, params)
    rng = rng_for(seed, "recon_order", epoch)
    targets = sorted(targets)
    order = rng.permutation(len(targets))
    total_loss = 0.0
    for lo in range(0, len(order), batch_size):
        batch = [targets[i] for i in order[lo:lo + batch_size]]
        eps = [build_episode(graph, t, k, params.depth,
                             child_seed(seed, "ep", epoch, t), side)
               for t in batch]
        h = encode_fn(eps)
        truth = ad.Tensor(truth_table[np.asarray(batch, dtype=np.int64)])
        loss = ad.rsub_const(1.0, ad.mean(ad.cosine_rows(h, truth)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        total_loss += loss.item() * len(batch)
    return total_loss / len(targets)


def train_reconstruction(graph: InteractionGraph, targets: list, truth_table: np.ndarray,
                         tables: NodeTables, params, *, k: int, epochs: int, lr: float,
                         seed: int, side: str = "user", batch_size: int = 64,
                         encode_fn=None, trainable: dict | None = None) -> list:
    """Cosine-reconstruction training loop shared by the encoder variants."""
    if trainable is None:
        trainable = params.trainable()
    opt = Adam(trainable, lr)
    history = []
    for epoch in range(epochs):
        history.append(reconstruction_epoch(
            graph, targets, truth_table, tables, params, opt, k=k, seed=seed,
            epoch=epoch, side=side, batch_size=batch_size, encode_fn=encode_fn))
    return history


def train_encoder_bpr(graph: InteractionGraph, edges: list, tables: NodeTables,
                      params, *, k: int, epochs: int, lr: float, seed: int,
                      side: str = "user", pairs_per_epoch: int = 256,
                      encode_fn=None, trainable: dict | None = None) -> list:
    """Ranking-only baseline: train the encoder with the pairwise BPR loss.

    Scores are dot products of encoded user/item episodes; no
    reconstruction signal is used. Returns per-epoch mean loss history."""
    from .ground_truth import bpr_loss  # local import to avoid a cycle

    if encode_fn is None:
        encode_fn = lambda eps: encode_batch(eps, tables, params)
    if trainable is None:
        trainable = params.trainable()
    opt = Adam(trainable, lr)
    rng = rng_for(seed, "bpr_encoder")
    user_edges = sorted({(u, i) for u, i, *_ in edges})
    by_user: dict[int, set] = {}
    for u, i in user_edges:
        by_user.setdefault(u, set()).add(i)
    num_items = tables.item.shape[0]
    other = "item" if side == "user" else "user"
    history = []
    for epoch in range(epochs):
        sel = rng.choice(len(user_edges), size=min(pairs_per_epoch, len(user_edges)),
                         replace=False)
        losses = []
        batch_losses = []
        for idx in sel:
            u, i = user_edges[idx]
            guard = 0
            while True:
                j = int(rng.integers(0, num_items))
                if j not in by_user[u] and graph.degree(other, j) > 0:
                    break
                guard += 1
                if guard > 10000:
                    raise DataError(f"no valid negative item for user {u}")
            seeds = child_seed(seed, "bpr_ep", epoch, u, i, j)
            ep_u = build_episode(graph, u, k, params.depth, child_seed(seeds, "u"), side)
            ep_i = build_episode(graph, i, k, params.depth, child_seed(seeds, "i"), other)
            ep_j = build_episode(graph, j, k, params.depth, child_seed(seeds, "j"), other)
            h = encode_fn([ep_u])
            hu = _first_row(h)
            hi = _first_row(encode_fn([ep_i]))
            hj = _first_row(encode_fn([ep_j]))
            loss = bpr_loss(ad.dot(hu, hi), ad.dot(hu, hj))
            batch_losses.append(loss)
            losses.append(loss.item())
            if len(batch_losses) >= 32:
                total = ad.scale(ad.total(ad.stack1d(batch_losses)), 1.0 / len(batch_losses))
                opt.zero_grad()
                total.backward()
                opt.step()
                batch_losses = []
        if batch_losses:
            total = ad.scale(ad.total(ad.stack1d(batch_losses)), 1.0 / len(batch_losses))
            opt.zero_grad()
            total.backward()
            opt.step()
        history.append(float(np.mean(losses)))
    return history
