"""Bipartite interaction graphs, meta splits, and K-shot episodes.

The graph is immutable after load. Node ids are remapped to dense 0-based
indices per side at load time; original labels are kept in sidecar lists.
Neighbor lists are duplicate-free and sorted, so everything downstream is
deterministic given a seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptyDatasetError, ParseError
from .seeds import child_seed, rng_for

USER = "user"
ITEM = "item"


def other_side(side: str) -> str:
    return ITEM if side == USER else USER


@dataclass
class InteractionGraph:
    num_users: int
    num_items: int
    edges: list  # (user, item, timestamp) triples with dense ids
    user_adj: list  # user -> sorted list of item ids
    item_adj: list  # item -> sorted list of user ids
    user_labels: list
    item_labels: list

    @property
    def users(self) -> range:
        return range(self.num_users)

    @property
    def items(self) -> range:
        return range(self.num_items)

    def nodes(self, side: str) -> range:
        return self.users if side == USER else self.items

    def neighbors(self, side: str, node: int) -> list:
        adj = self.user_adj if side == USER else self.item_adj
        return adj[node]

    def degree(self, side: str, node: int) -> int:
        return len(self.neighbors(side, node))

    def edge_set(self) -> set:
        return {(u, i) for u, i, _ in self.edges}


def _build_graph(raw_edges, user_labels, item_labels) -> InteractionGraph:
    user_adj = [[] for _ in user_labels]
    item_adj = [[] for _ in item_labels]
    for u, i, _ in raw_edges:
        user_adj[u].append(i)
        item_adj[i].append(u)
    for adj in (user_adj, item_adj):
        for n in range(len(adj)):
            adj[n] = sorted(set(adj[n]))
    return InteractionGraph(
        num_users=len(user_labels),
        num_items=len(item_labels),
        edges=sorted(raw_edges),
        user_adj=user_adj,
        item_adj=item_adj,
        user_labels=list(user_labels),
        item_labels=list(item_labels),
    )


def load_interactions(path: str, fmt: str = "tsv-triples") -> InteractionGraph:
    """Parse an interaction file into a bipartite graph.

    ``tsv-triples``: ``user<TAB>item<TAB>timestamp`` per line, UTF-8,
    ``#``-prefixed comment lines ignored. ``movielens-ratings``:
    ``uid::mid::rating::ts``; every rating event becomes one positive edge.
    Duplicate (user, item) pairs collapse to one edge keeping the earliest
    timestamp.
    """
    if fmt not in ("tsv-triples", "movielens-ratings"):
        raise DataError(f"unknown interaction format: {fmt}")
    if not os.path.exists(path):
        raise DataError(f"interaction file not found: {path}")

    user_index: dict = {}
    item_index: dict = {}
    user_labels: list = []
    item_labels: list = []
    first_ts: dict = {}

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if fmt == "tsv-triples":
                parts = line.split("\t")
                if len(parts) == 1:
                    parts = line.split()
                if len(parts) != 3:
                    raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
                u_lab, i_lab, ts_str = parts
            else:
                parts = line.split("::")
                if len(parts) != 4:
                    raise ParseError(path, lineno, f"expected 4 '::' fields, got {len(parts)}")
                u_lab, i_lab, rating, ts_str = parts
                try:
                    float(rating)
                except ValueError:
                    raise ParseError(path, lineno, f"bad rating {rating!r}") from None
            try:
                ts = int(ts_str)
            except ValueError:
                raise ParseError(path, lineno, f"bad timestamp {ts_str!r}") from None
            if u_lab not in user_index:
                user_index[u_lab] = len(user_labels)
                user_labels.append(u_lab)
            if i_lab not in item_index:
                item_index[i_lab] = len(item_labels)
                item_labels.append(i_lab)
            key = (user_index[u_lab], item_index[i_lab])
            if key not in first_ts or ts < first_ts[key]:
                first_ts[key] = ts

    if not first_ts:
        raise EmptyDatasetError(f"no interactions parsed from {path}")
    raw_edges = [(u, i, ts) for (u, i), ts in first_ts.items()]
    return _build_graph(raw_edges, user_labels, item_labels)


def save_graph(g: InteractionGraph, path: str, fingerprint: str = "") -> None:
    edges = np.array([(u, i, t) for u, i, t in g.edges], dtype=np.int64).reshape(-1, 3)
    np.savez_compressed(
        path,
        edges=edges,
        user_labels=np.array(g.user_labels, dtype=str),
        item_labels=np.array(g.item_labels, dtype=str),
        fingerprint=np.array(fingerprint, dtype=str),
    )


def load_graph(path: str) -> InteractionGraph:
    with np.load(path, allow_pickle=False) as z:
        edges = [(int(u), int(i), int(t)) for u, i, t in z["edges"]]
        user_labels = [str(x) for x in z["user_labels"]]
        item_labels = [str(x) for x in z["item_labels"]]
    if not edges:
        raise EmptyDatasetError(f"graph artifact {path} has no edges")
    return _build_graph(edges, user_labels, item_labels)


def graph_fingerprint(path: str) -> str:
    with np.load(path, allow_pickle=False) as z:
        if "fingerprint" not in z:
            return ""
        return str(z["fingerprint"])


@dataclass
class MetaSplit:
    """Partition of one side's nodes into abundant targets and cold nodes."""

    side: str
    threshold: int
    d_t: list
    d_n: list

    def __post_init__(self):
        self.d_t = sorted(self.d_t)
        self.d_n = sorted(self.d_n)


def split_meta(g: InteractionGraph, side: str, threshold: int | None = None,
               sampled_lists=None) -> MetaSplit:
    """Divide one side by degree threshold, or accept explicit id lists.

    Threshold mode keeps nodes with degree strictly greater than the
    threshold as targets. Sampled-list mode (explicit d_t/d_n ids) is for
    datasets where the protocol fixes a node sample; the two lists may
    cover only a subset of the side.
    """
    if side not in (USER, ITEM):
        raise DataError(f"unknown side: {side}")
    if sampled_lists is not None:
        d_t, d_n = (sorted(sampled_lists[0]), sorted(sampled_lists[1]))
        nodes = set(g.nodes(side))
        unknown = [n for n in d_t + d_n if n not in nodes]
        if unknown:
            raise DataError(f"sampled_lists reference unknown {side} ids: {unknown[:5]}")
        overlap = set(d_t) & set(d_n)
        if overlap:
            raise DataError(f"sampled_lists overlap on ids: {sorted(overlap)[:5]}")
        return MetaSplit(side=side, threshold=-1, d_t=d_t, d_n=d_n)
    if threshold is None or threshold < 0:
        raise DataError("split_meta: need a threshold >= 0 or sampled_lists")
    d_t = [n for n in g.nodes(side) if g.degree(side, n) > threshold]
    d_n = [n for n in g.nodes(side) if g.degree(side, n) <= threshold]
    return MetaSplit(side=side, threshold=threshold, d_t=d_t, d_n=d_n)


def split_train_test(ids, ratio: float, seed: int):
    """Random split of an id list into (train, test) with |train| ≈ ratio."""
    ids = sorted(ids)
    rng = rng_for(seed, "split_train_test")
    perm = rng.permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    train = sorted(ids[p] for p in perm[:n_train])
    test = sorted(ids[p] for p in perm[n_train:])
    return train, test


@dataclass
class Episode:
    """A target node with its K-shot multi-hop sampled neighborhood.

    ``hops[l-1]`` holds the order-l node ids (sorted, unique). ``children``
    holds, per order l in 1..L-1, the sampled child ids of each order-l
    node; the flat hop list is the union of the child tuples. Node kinds
    alternate: odd orders of a user target are items and vice versa.
    """

    target: int
    side: str
    k: int
    seed: int
    hops: list = field(default_factory=list)
    children: list = field(default_factory=list)  # list of {node: (child ids)} per order

    @property
    def depth(self) -> int:
        return len(self.hops)

    def kind_at(self, order: int) -> str:
        """Node kind (user/item) at 1-based order."""
        if order % 2 == 1:
            return other_side(self.side)
        return self.side

    def children_of(self, order: int, node: int) -> tuple:
        """Sampled children of an order-l node (order in 1..depth-1)."""
        return self.children[order - 1].get(node, ())


def build_episode(g: InteractionGraph, target: int, k: int, l: int, seed: int,
                  side: str = USER) -> Episode:
    """Sample a K-shot episode: K first-order neighbors, then up to K
    neighbors per node walking out to order l. Reproducible from seed."""
    if k < 1 or l < 1:
        raise DataError(f"build_episode: need k >= 1 and l >= 1, got k={k}, l={l}")
    deg = g.degree(side, target)
    if deg == 0:
        raise DataError(f"build_episode: {side} {target} is isolated")
    rng = rng_for(seed, "episode", side, target)

    def sample_neighbors(kind, node):
        nbrs = g.neighbors(kind, node)
        if len(nbrs) <= k:
            return tuple(nbrs)
        picked = rng.choice(len(nbrs), size=k, replace=False)
        return tuple(sorted(nbrs[p] for p in picked))

    hops = [list(sample_neighbors(side, target))]
    children = []
    for order in range(1, l):
        kind = other_side(side) if order % 2 == 1 else side
        level_children = {}
        nxt = set()
        for node in hops[order - 1]:
            cs = sample_neighbors(kind, node)
            level_children[node] = cs
            nxt.update(cs)
        children.append(level_children)
        hops.append(sorted(nxt))
    return Episode(target=target, side=side, k=k, seed=seed, hops=hops, children=children)


def validate_episode(g: InteractionGraph, ep: Episode) -> None:
    """Raise DataError if any episode invariant is violated."""
    for idx, hop in enumerate(ep.hops):
        order = idx + 1
        if len(hop) > ep.k ** order:
            raise DataError(f"hop {order} exceeds K^l bound: {len(hop)} > {ep.k ** order}")
        if hop != sorted(set(hop)):
            raise DataError(f"hop {order} not sorted/unique")
        if order > 1:
            prev_kind = ep.kind_at(order - 1)
            prev = set(ep.hops[idx - 1])
            for node in hop:
                nbrs = set(g.neighbors(ep.kind_at(order), node))
                if not (nbrs & prev):
                    raise DataError(f"hop {order} node {node} not adjacent to hop {order - 1}")


def kshot_keep_map(g: InteractionGraph, nodes, side: str, k: int, seed: int) -> dict:
    """For each node, the K (or fewer) neighbors retained under masking."""
    keep = {}
    for node in sorted(nodes):
        nbrs = g.neighbors(side, node)
        if len(nbrs) <= k:
            keep[node] = tuple(nbrs)
        else:
            rng = rng_for(seed, "kshot", side, node)
            picked = rng.choice(len(nbrs), size=k, replace=False)
            keep[node] = tuple(sorted(nbrs[p] for p in picked))
    return keep


def mask_edges(g: InteractionGraph, keep_map: dict, side: str) -> InteractionGraph:
    """Drop edges of masked nodes that are not in their kept set.

    Node ids and counts are preserved, so embedding tables stay aligned;
    masked-away nodes may end up with empty neighborhoods.
    """
    kept_edges = []
    for u, i, t in g.edges:
        own = u if side == USER else i
        if own in keep_map and (i if side == USER else u) not in keep_map[own]:
            continue
        kept_edges.append((u, i, t))
    if not kept_edges:
        raise EmptyDatasetError("masking removed every edge")
    return _build_graph(kept_edges, g.user_labels, g.item_labels)


def kshot_mask_testset(g: InteractionGraph, split: MetaSplit, k: int, l: int,
                       seed: int) -> list:
    """One masked episode per test node (the cold-start simulation)."""
    keep = kshot_keep_map(g, split.d_n, split.side, k, seed)
    masked = mask_edges(g, keep, split.side)
    episodes = []
    for node in sorted(split.d_n):
        episodes.append(build_episode(masked, node, k, l,
                                      child_seed(seed, "testep", node), split.side))
    return episodes


def chrono_split_node(g: InteractionGraph, side: str, node: int, frac: float = 0.1):
    """Per-node chronological split: earliest ``frac`` of interactions for
    training, the rest held out. Ties broken by neighbor id. Returns
    (train_ids, test_ids); train is empty when floor(frac * degree) == 0."""
    ts_of = {}
    for u, i, t in g.edges:
        own, other = (u, i) if side == USER else (i, u)
        if own == node:
            ts_of[other] = t
    ordered = sorted(ts_of, key=lambda o: (ts_of[o], o))
    n_train = int(len(ordered) * frac)
    return ordered[:n_train], ordered[n_train:]
