"""Downstream fine-tuning plus the embedding-agreement and ranking protocols.

Embedding agreement: per masked test node, the rank correlation between the
coordinates of its predicted embedding and its reference embedding,
averaged over nodes. Ranking: per cold user, rank every non-training item
by the learned relevance score and measure Recall@K and NDCG@K against the
held-out interactions. Both evaluations are pure functions of
(checkpoint, split, seed) and emit JSON-lines reports.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import GnnParams, NodeTables, encode_batch, init_gnn_params
from .errors import DataError, UndefinedCorrelationError
from .graph import Episode, InteractionGraph, build_episode
from .ground_truth import bpr_loss
from .meta_aggregator import MetaAggParams, encode_batch_with_meta
from .metrics import ndcg_at_k, rank_items, recall_at_k, spearman
from .optim import Adam
from .sampler import SamplerParams, run_sampling
from .seeds import child_seed, rng_for


@dataclass
class RecommenderHead:
    """Shared projection used on both sides of the relevance product."""

    w: ad.Tensor

    def named(self, prefix: str = "head") -> dict:
        return {f"{prefix}/w": self.w}

    def trainable(self) -> dict:
        return self.named()


def init_head(rng: np.random.Generator, dim: int) -> RecommenderHead:
    return RecommenderHead(w=ad.parameter(ad.xavier_uniform(rng, dim, dim)))


def relevance(h_u: ad.Tensor, h_i: ad.Tensor, w: ad.Tensor) -> ad.Tensor:
    """sigmoid(W h_u) · sigmoid(W h_i); bounded in (0, d)."""
    return ad.dot(ad.sigmoid(ad.matmul(w, h_u)), ad.sigmoid(ad.matmul(w, h_i)))


def relevance_scores(user_vec: np.ndarray, item_matrix: np.ndarray,
                     w: np.ndarray) -> np.ndarray:
    """Forward-only relevance of one user against many items."""
    su = 1.0 / (1.0 + np.exp(-(w @ user_vec)))
    si = 1.0 / (1.0 + np.exp(-(item_matrix @ w.T)))
    return si @ su


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    metric: str
    node_ids: list
    values: list  # one dict of named metric values per node
    skipped: list = field(default_factory=list)
    fingerprint: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> dict:
        if not self.values:
            return {}
        keys = self.values[0].keys()
        return {k: float(np.mean([v[k] for v in self.values])) for k in keys}

    def mean_of(self, key: str) -> float:
        return self.mean[key]

    def to_jsonl(self) -> str:
        lines = []
        for node, vals in zip(self.node_ids, self.values):
            lines.append(json.dumps({"node": int(node), **{k: float(v) for k, v in vals.items()}},
                                    sort_keys=True, separators=(",", ":")))
        summary = {"summary": True, "metric": self.metric, "count": len(self.node_ids),
                   "mean": self.mean, "skipped": [int(s) for s in self.skipped],
                   "fingerprint": self.fingerprint, "seed": int(self.seed)}
        summary.update(self.extra)
        lines.append(json.dumps(summary, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


# ---------------------------------------------------------------------------
# embedding-agreement evaluation
# ---------------------------------------------------------------------------

@dataclass
class EncodeContext:
    """Picklable bundle for (optionally parallel) test-node encoding."""

    tables: NodeTables
    encoder: object  # GnnParams | MetaAggParams
    sampler: SamplerParams | None
    episodes: dict
    seed: int

    def predict(self, node: int) -> np.ndarray:
        ep = self.episodes[node]
        if self.sampler is not None:
            ep, _ = run_sampling(ep, self.tables, self.sampler,
                                 rng_for(self.seed, "eval_prune", node))
        with ad.no_grad():
            if isinstance(self.encoder, MetaAggParams):
                out = encode_batch_with_meta([ep], self.tables, self.encoder)
            else:
                out = encode_batch([ep], self.tables, self.encoder)
        return out.data[0]


_WORKER_CTX: EncodeContext | None = None


def _init_worker(ctx: EncodeContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _predict_chunk(nodes: list) -> list:
    return [(n, _WORKER_CTX.predict(n)) for n in nodes]


def predict_embeddings(ctx: EncodeContext, nodes: list, workers: int = 1) -> dict:
    """Embeddings for each node; reports merge deterministically by id."""
    nodes = sorted(nodes)
    if workers <= 1:
        return {n: ctx.predict(n) for n in nodes}
    chunks = [nodes[i::workers] for i in range(workers)]
    out: dict = {}
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(ctx,)) as pool:
        for pairs in pool.map(_predict_chunk, chunks):
            out.update(pairs)
    return out


def intrinsic_eval(predictions: dict, truth_table: np.ndarray, *, seed: int = 0,
                   fingerprint: str = "", extra: dict | None = None) -> EvalReport:
    """Per-node rank agreement between predicted and reference coordinates.

    Nodes whose prediction has zero rank variance are skipped and reported."""
    node_ids, values, skipped = [], [], []
    for node in sorted(predictions):
        try:
            rho = spearman(predictions[node], truth_table[node])
        except UndefinedCorrelationError:
            skipped.append(node)
            continue
        node_ids.append(node)
        values.append({"spearman": rho})
    return EvalReport(metric="spearman", node_ids=node_ids, values=values,
                      skipped=skipped, fingerprint=fingerprint, seed=seed,
                      extra=extra or {})


def intrinsic_eval_pipeline(ctx: EncodeContext, test_nodes: list,
                            truth_table: np.ndarray, *, seed: int = 0,
                            fingerprint: str = "", workers: int = 1,
                            extra: dict | None = None) -> EvalReport:
    preds = predict_embeddings(ctx, test_nodes, workers)
    return intrinsic_eval(preds, truth_table, seed=seed, fingerprint=fingerprint,
                          extra=extra)


def layer_sweep(run_for_depth, depths=(1, 2, 3, 4)) -> dict:
    """Run a per-depth evaluation factory and collect reports by depth."""
    return {l: run_for_depth(l) for l in depths}


# ---------------------------------------------------------------------------
# ranking evaluation
# ---------------------------------------------------------------------------

def extrinsic_eval(users: list, score_fn, train_items: dict, relevant: dict,
                   num_items: int, k_metric: int, *, seed: int = 0,
                   fingerprint: str = "", extra: dict | None = None) -> EvalReport:
    """Recall@K and NDCG@K over each user's non-training candidate pool.

    Users without training items (degree too small for the chronological
    split) or without held-out relevant items are excluded and reported."""
    node_ids, values, skipped = [], [], []
    all_items = np.arange(num_items)
    for u in sorted(users):
        train = set(train_items.get(u, ()))
        rel = set(relevant.get(u, ()))
        if not train or not rel:
            skipped.append(u)
            continue
        cands = np.array([i for i in all_items if i not in train], dtype=np.int64)
        scores = score_fn(u, cands)
        ranked = rank_items(scores, cands)[:max(k_metric, 1)]
        values.append({"recall": recall_at_k(ranked, rel, k_metric),
                       "ndcg": ndcg_at_k(ranked, rel, k_metric)})
        node_ids.append(u)
    return EvalReport(metric=f"recall_ndcg@{k_metric}", node_ids=node_ids,
                      values=values, skipped=skipped, fingerprint=fingerprint,
                      seed=seed, extra=extra or {})


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _encode_node(graph: InteractionGraph, node: int, side: str, tables: NodeTables,
                 encoder, sampler: SamplerParams | None, *, k: int, seed) -> ad.Tensor:
    depth = encoder.depth
    ep = build_episode(graph, node, k, depth, child_seed(seed, "ft", side, node), side)
    if sampler is not None:
        ep, _ = run_sampling(ep, tables, sampler, rng_for(seed, "ft_prune", side, node))
    if isinstance(encoder, MetaAggParams):
        out = encode_batch_with_meta([ep], tables, encoder)
    else:
        out = encode_batch([ep], tables, encoder)
    row = ad.rows(out, np.array([0]))
    return ad.mean_axis0(row)


@dataclass
class FinetuneResult:
    head: RecommenderHead
    history: list = field(default_factory=list)


def draw_negative(rng, user: int, positives: set, graph: InteractionGraph) -> int:
    """Uniform negative item: unobserved for the user and not isolated."""
    num_items = graph.num_items
    guard = 0
    while True:
        j = int(rng.integers(0, num_items))
        if j not in positives and graph.degree("item", j) > 0:
            return j
        guard += 1
        if guard > 10000:
            raise DataError(f"no valid negative item for user {user}")


def finetune(graph: InteractionGraph, train_edges: list, tables: NodeTables,
             encoder, sampler: SamplerParams | None, *, k: int, epochs: int,
             lr: float, seed: int, batch_size: int = 16,
             head: RecommenderHead | None = None,
             tune_sampler: bool = True) -> FinetuneResult:
    """Pairwise ranking fine-tuning of the head, encoder and (optionally)
    the sampling policy on the cold users' training interactions.

    The policy is tuned by the same delayed-reward scheme as pre-training,
    with reward = sigmoid(margin with pruning) - sigmoid(margin without):
    prunings that improve the ranking margin are reinforced."""
    if head is None:
        head = init_head(rng_for(seed, "head"), encoder.dim)
    trainable = dict(head.trainable())
    if isinstance(encoder, MetaAggParams):
        trainable.update(encoder.trainable(include_meta=True))
        for t in encoder.trainable(include_meta=True).values():
            t.requires_grad = True
    else:
        trainable.update(encoder.trainable())
        for t in encoder.trainable().values():
            t.requires_grad = True
    opt = Adam(trainable, lr)
    opt_s = Adam(sampler.trainable(), lr) if (sampler is not None and tune_sampler) else None
    if opt_s is not None:
        sampler.set_trainable(True)

    edges = sorted({(u, i) for u, i, *_ in train_edges})
    if not edges:
        raise DataError("finetune: empty training edge set")
    by_user: dict = {}
    for u, i in edges:
        by_user.setdefault(u, set()).add(i)
    rng = rng_for(seed, "ft_order")
    result = FinetuneResult(head=head)
    for epoch in range(epochs):
        perm = rng.permutation(len(edges))
        losses = []
        batch_terms = []
        trajs = []
        for idx in perm:
            u, i = edges[idx]
            j = draw_negative(rng, u, by_user[u], graph)
            es = child_seed(seed, "ft_ep", epoch, u, i, j)
            h_u = _encode_node(graph, u, "user", tables, encoder, sampler, k=k, seed=es)
            h_i = _encode_node(graph, i, "item", tables, encoder, sampler, k=k, seed=es)
            h_j = _encode_node(graph, j, "item", tables, encoder, sampler, k=k, seed=es)
            loss = bpr_loss(relevance(h_u, h_i, head.w), relevance(h_u, h_j, head.w))
            batch_terms.append(loss)
            losses.append(loss.item())
            if opt_s is not None:
                trajs.append(_margin_trajectory(graph, u, i, j, tables, encoder,
                                                sampler, head, k=k, seed=es))
            if len(batch_terms) >= batch_size:
                _step_batch(opt, batch_terms)
                batch_terms = []
        if batch_terms:
            _step_batch(opt, batch_terms)
        if opt_s is not None and trajs:
            from .sampler import reinforce_loss as rl
            loss_s = rl(trajs, sampler)
            if loss_s.requires_grad:
                opt_s.zero_grad()
                loss_s.backward()
                opt_s.step()
        result.history.append(float(np.mean(losses)))
    return result


def _step_batch(opt: Adam, terms: list) -> None:
    total = ad.scale(ad.total(ad.stack1d(terms)), 1.0 / len(terms))
    opt.zero_grad()
    total.backward()
    opt.step()


def _margin_trajectory(graph, u, i, j, tables, encoder, sampler, head, *, k, seed):
    """Trajectory on the user's episode, rewarded by the ranking-margin gain
    of pruning versus keeping the full neighborhood."""
    from .sampler import run_sampling as rs
    ep = build_episode(graph, u, k, encoder.depth, child_seed(seed, "traj_ep"), "user")
    pruned, traj = rs(ep, tables, sampler, rng_for(seed, "traj_draw"))
    with ad.no_grad():
        if isinstance(encoder, MetaAggParams):
            h_full = encode_batch_with_meta([ep], tables, encoder).data[0]
            h_cut = encode_batch_with_meta([pruned], tables, encoder).data[0]
        else:
            h_full = encode_batch([ep], tables, encoder).data[0]
            h_cut = encode_batch([pruned], tables, encoder).data[0]
        w = head.w.data
        hi = _item_vec(graph, i, tables, encoder, sampler, k, seed)
        hj = _item_vec(graph, j, tables, encoder, sampler, k, seed)

        def margin(hu):
            su = 1.0 / (1.0 + np.exp(-(w @ hu)))
            si = 1.0 / (1.0 + np.exp(-(w @ hi)))
            sj = 1.0 / (1.0 + np.exp(-(w @ hj)))
            return float(su @ si - su @ sj)

        traj.reward = float(1.0 / (1.0 + np.exp(-margin(h_cut)))
                            - 1.0 / (1.0 + np.exp(-margin(h_full))))
    return traj


def _item_vec(graph, node, tables, encoder, sampler, k, seed):
    ep = build_episode(graph, node, k, encoder.depth, child_seed(seed, "iv", node), "item")
    if sampler is not None:
        ep, _ = run_sampling(ep, tables, sampler, rng_for(seed, "iv_prune", node))
    if isinstance(encoder, MetaAggParams):
        return encode_batch_with_meta([ep], tables, encoder).data[0]
    return encode_batch([ep], tables, encoder).data[0]


def item_embedding_matrix(graph: InteractionGraph, tables: NodeTables, encoder,
                          sampler: SamplerParams | None, *, k: int, seed: int,
                          items=None) -> np.ndarray:
    """Encoded embeddings for every (or the given) item ids, rows by id order."""
    items = list(graph.items) if items is None else sorted(items)
    out = np.zeros((tables.item.shape[0], encoder.dim))
    with ad.no_grad():
        for i in items:
            if graph.degree("item", i) == 0:
                continue
            out[i] = _item_vec(graph, i, tables, encoder, sampler, k, child_seed(seed, "iem"))
    return out


def make_score_fn(graph: InteractionGraph, tables: NodeTables, encoder,
                  sampler: SamplerParams | None, head: RecommenderHead, *,
                  k: int, seed: int):
    """Relevance scorer over precomputed item encodings."""
    item_mat = item_embedding_matrix(graph, tables, encoder, sampler, k=k, seed=seed)
    w = head.w.data
    si_all = 1.0 / (1.0 + np.exp(-(item_mat @ w.T)))
    user_cache: dict = {}

    def score(u: int, cand_ids: np.ndarray) -> np.ndarray:
        if u not in user_cache:
            with ad.no_grad():
                h_u = _encode_node(graph, u, "user", tables, encoder, sampler,
                                   k=k, seed=child_seed(seed, "score_u"))
            user_cache[u] = 1.0 / (1.0 + np.exp(-(w @ h_u.data)))
        return si_all[cand_ids] @ user_cache[u]

    return score


def train_scratch_recommender(graph: InteractionGraph, train_edges: list,
                              tables: NodeTables, *, dim: int, depth: int, k: int,
                              epochs: int, lr: float, seed: int,
                              aggregator: str = "mean",
                              pairs_per_epoch: int = 256) -> tuple:
    """Ranking-only baseline trained from random initialization: a basic
    encoder plus head optimized with the pairwise loss, no pre-training,
    no sampler. Returns (encoder params, head, history)."""
    enc = init_gnn_params(rng_for(seed, "scratch_enc"), dim, depth, aggregator)
    head = init_head(rng_for(seed, "scratch_head"), dim)
    edges = sorted({(u, i) for u, i, *_ in train_edges})
    rng = rng_for(seed, "scratch_order")
    by_user: dict = {}
    for u, i in edges:
        by_user.setdefault(u, set()).add(i)
    trainable = dict(head.trainable())
    trainable.update(enc.trainable())
    opt = Adam(trainable, lr)
    history = []
    for epoch in range(epochs):
        sel = rng.choice(len(edges), size=min(pairs_per_epoch, len(edges)), replace=False)
        losses, terms = [], []
        for idx in sel:
            u, i = edges[idx]
            j = draw_negative(rng, u, by_user[u], graph)
            es = child_seed(seed, "scratch_ep", epoch, u, i, j)
            h_u = _encode_node(graph, u, "user", tables, enc, None, k=k, seed=es)
            h_i = _encode_node(graph, i, "item", tables, enc, None, k=k, seed=es)
            h_j = _encode_node(graph, j, "item", tables, enc, None, k=k, seed=es)
            loss = bpr_loss(relevance(h_u, h_i, head.w), relevance(h_u, h_j, head.w))
            terms.append(loss)
            losses.append(loss.item())
            if len(terms) >= 16:
                _step_batch(opt, terms)
                terms = []
        if terms:
            _step_batch(opt, terms)
        history.append(float(np.mean(losses)))
    return enc, head, history
