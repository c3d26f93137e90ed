"""Adaptive neighbor selection over orders 2..L with policy-gradient training.

Selection runs as a sequence of per-order subtasks: order by order, every
reachable candidate gets an independent keep/drop draw from a two-layer
policy over hand-built state features. First-order neighbors are always
kept. The whole pass stops early when an order keeps nothing; the pruned
episode then drops every deeper hop plus candidates whose parents were all
dropped. One delayed reward per pass (encoding quality of the pruned
episode minus the full one) reinforces every action of the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import NodeTables, encode_batch
from .errors import DataError, DimensionError, NumericError
from .graph import Episode, InteractionGraph, build_episode
from .meta_aggregator import MetaAggParams, encode_batch_with_meta
from .optim import Adam
from .seeds import child_seed, rng_for


def state_dim(dim: int, f_max: int) -> int:
    return (f_max + 2) * (dim + 1)


@dataclass
class SamplerParams:
    """Per-order policy weights; orders 2..depth each get their own set."""

    dim: int
    depth: int
    f_max: int
    w1: list = field(default_factory=list)  # per order: (d, d_s)
    b: list = field(default_factory=list)   # per order: (d,)
    w2: list = field(default_factory=list)  # per order: (d,)

    @property
    def state_dim(self) -> int:
        return state_dim(self.dim, self.f_max)

    def order_index(self, order: int) -> int:
        if order < 2 or order > self.depth:
            raise DataError(f"sampler has no parameters for order {order}")
        return order - 2

    def named(self, prefix: str = "sampler") -> dict:
        out = {}
        for idx in range(len(self.w1)):
            order = idx + 2
            out[f"{prefix}/w1_{order}"] = self.w1[idx]
            out[f"{prefix}/b_{order}"] = self.b[idx]
            out[f"{prefix}/w2_{order}"] = self.w2[idx]
        return out

    def trainable(self) -> dict:
        return self.named()

    def set_trainable(self, flag: bool) -> None:
        for group in (self.w1, self.b, self.w2):
            for t in group:
                t.requires_grad = flag


def init_sampler_params(rng: np.random.Generator, dim: int, depth: int,
                        f_max: int = 8) -> SamplerParams:
    params = SamplerParams(dim=dim, depth=depth, f_max=f_max)
    ds = params.state_dim
    for _ in range(max(depth - 1, 0)):
        params.w1.append(ad.parameter(ad.xavier_uniform(rng, dim, ds)))
        params.b.append(ad.parameter(np.zeros(dim)))
        params.w2.append(ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)))
    return params


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("state features need nonzero embeddings")
    return float(a @ b) / (na * nb)


def state_features(target_init: np.ndarray, candidate_init: np.ndarray,
                   selected_prev_inits, f_max: int) -> np.ndarray:
    """Per-candidate feature layout, all against initial embeddings:

    [cos+product vs target | cos+product vs mean of formerly selected |
     cos+product vs each of up to f_max formerly selected, zero padded].
    """
    d = target_init.shape[0]
    blocks = [np.empty(d + 1) for _ in range(f_max + 2)]
    blocks[0][0] = _cos(candidate_init, target_init)
    blocks[0][1:] = candidate_init * target_init
    selected = list(selected_prev_inits)
    if selected:
        avg = np.mean(selected, axis=0)
        if np.linalg.norm(avg) == 0.0:
            blocks[1][:] = 0.0
        else:
            blocks[1][0] = _cos(candidate_init, avg)
            blocks[1][1:] = candidate_init * avg
    else:
        blocks[1][:] = 0.0
    for j in range(f_max):
        if j < len(selected):
            blocks[2 + j][0] = _cos(candidate_init, selected[j])
            blocks[2 + j][1:] = candidate_init * selected[j]
        else:
            blocks[2 + j][:] = 0.0
    return np.concatenate(blocks)


def _policy_logits_np(states: np.ndarray, params: SamplerParams, order: int) -> np.ndarray:
    idx = params.order_index(order)
    h = np.maximum(states @ params.w1[idx].data.T + params.b[idx].data, 0.0)
    return h @ params.w2[idx].data


def policy_prob(s: np.ndarray, params: SamplerParams, order: int) -> float:
    """P(keep) for one state vector under the given order's policy."""
    if s.shape != (params.state_dim,):
        raise DimensionError(f"policy_prob: state {s.shape} vs d_s {params.state_dim}")
    logit = float(_policy_logits_np(s[None, :], params, order)[0])
    return float(1.0 / (1.0 + np.exp(-logit)))


def policy_logits(states: np.ndarray, params: SamplerParams, order: int) -> ad.Tensor:
    """Batched keep-logits on the tape (for gradient computation)."""
    idx = params.order_index(order)
    s = ad.Tensor(states)
    h = ad.relu(ad.add(ad.matmul(s, ad.transpose(params.w1[idx])), params.b[idx]))
    return ad.matmul(h, params.w2[idx])


def _log_prob_np(logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
    # log σ(x) = -softplus(-x); log(1-σ(x)) = -softplus(x)
    signs = 1.0 - 2.0 * actions
    return -np.logaddexp(0.0, signs * logits)


def sample_order(candidate_ids, states: np.ndarray, params: SamplerParams,
                 order: int, rng: np.random.Generator):
    """Bernoulli keep/drop per candidate; returns (actions, kept ids, log-probs)."""
    logits = _policy_logits_np(states, params, order)
    probs = 1.0 / (1.0 + np.exp(-logits))
    actions = (rng.random(len(candidate_ids)) < probs).astype(np.float64)
    kept = [c for c, a in zip(candidate_ids, actions) if a == 1.0]
    return actions, kept, _log_prob_np(logits, actions)


@dataclass
class Trajectory:
    """States, actions and log-probs of one sampling pass, rewarded once."""

    orders: list = field(default_factory=list)
    states: list = field(default_factory=list)      # per order: (n, d_s)
    actions: list = field(default_factory=list)     # per order: (n,) of {0,1}
    log_probs: list = field(default_factory=list)   # per order: (n,)
    terminal_order: int = 1
    reward: float = 0.0


def run_sampling(episode: Episode, tables: NodeTables, params: SamplerParams,
                 rng: np.random.Generator):
    """One sampling pass over orders 2..depth; first-order neighbors are kept.

    Returns (pruned episode, trajectory). The pruned episode preserves
    hop adjacency: a kept node whose parents were all dropped never becomes
    a candidate, and unreached deeper hops are dropped entirely.
    """
    traj = Trajectory()
    side_table = tables.of(episode.side)
    target_init = side_table.data[episode.target]
    kept_hops = [list(episode.hops[0])]
    kept_children: list[dict] = []
    kept_prev = list(episode.hops[0])
    prev_kind = episode.kind_at(1)
    terminal = 1
    for order in range(2, episode.depth + 1):
        kind = episode.kind_at(order)
        cands = sorted({c for v in kept_prev for c in episode.children_of(order - 1, v)})
        if not cands:
            break
        prev_inits = [tables.of(prev_kind).data[v] for v in kept_prev]
        cand_inits = tables.of(kind).data[np.asarray(cands, dtype=np.int64)]
        states = np.stack([state_features(target_init, ci, prev_inits, params.f_max)
                           for ci in cand_inits])
        actions, kept, logp = sample_order(cands, states, params, order, rng)
        traj.orders.append(order)
        traj.states.append(states)
        traj.actions.append(actions)
        traj.log_probs.append(logp)
        terminal = order
        if not kept:
            break
        kept_set = set(kept)
        level = {}
        for v in kept_prev:
            cs = tuple(c for c in episode.children_of(order - 1, v) if c in kept_set)
            level[v] = cs
        kept_children.append(level)
        kept_hops.append(sorted(kept_set))
        kept_prev = kept
        prev_kind = kind
    traj.terminal_order = terminal
    pruned = Episode(target=episode.target, side=episode.side, k=episode.k,
                     seed=episode.seed, hops=kept_hops, children=kept_children)
    return pruned, traj


def _encode_one(episode: Episode, tables: NodeTables, encoder_params) -> np.ndarray:
    with ad.no_grad():
        if isinstance(encoder_params, MetaAggParams):
            out = encode_batch_with_meta([episode], tables, encoder_params)
        else:
            out = encode_batch([episode], tables, encoder_params)
    return out.data[0]


def episode_reward(episode_full: Episode, episode_sampled: Episode, tables: NodeTables,
                   encoder_params, h_true: np.ndarray) -> float:
    """Delayed reward: cos(pruned encoding, reference) - cos(full encoding, reference)."""
    h_hat = _encode_one(episode_sampled, tables, encoder_params)
    h_full = _encode_one(episode_full, tables, encoder_params)
    nt = np.linalg.norm(h_true)
    if nt == 0.0:
        raise NumericError("episode_reward: zero-norm reference embedding")
    cos_hat = float(h_hat @ h_true) / (np.linalg.norm(h_hat) * nt)
    cos_full = float(h_full @ h_true) / (np.linalg.norm(h_full) * nt)
    return cos_hat - cos_full


def reinforce_loss(trajectories, params: SamplerParams, use_baseline: bool = False):
    """Negative of the average reward-weighted trajectory log-probability.

    Minimizing this is a Monte-Carlo ascent step on expected reward; every
    action in a trajectory is weighted by its single delayed reward."""
    rewards = np.array([t.reward for t in trajectories])
    base = rewards.mean() if use_baseline and len(rewards) else 0.0
    terms = []
    for traj, r in zip(trajectories, rewards):
        w = r - base
        if w == 0.0 or not traj.orders:
            continue
        for order, states, actions in zip(traj.orders, traj.states, traj.actions):
            logits = policy_logits(states, params, order)
            signs = ad.Tensor(1.0 - 2.0 * actions)
            logp = ad.neg(ad.softplus(ad.mul(signs, logits)))
            terms.append(ad.scale(ad.total(logp), w))
    if not terms:
        return ad.Tensor(np.zeros(()))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(ad.neg(acc), 1.0 / max(len(trajectories), 1))


def reinforce_gradients(trajectories, params: SamplerParams,
                        use_baseline: bool = False) -> dict:
    """Gradient of expected reward w.r.t. each named policy parameter."""
    loss = reinforce_loss(trajectories, params, use_baseline)
    for t in params.trainable().values():
        t.grad = None
    if loss.requires_grad:
        loss.backward()
    out = {}
    for name, t in params.trainable().items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        out[name] = -g  # ascent direction on expected reward
        t.grad = None
    return out


def reinforce_update(trajectories, params: SamplerParams, lr: float) -> SamplerParams:
    """Plain gradient-ascent step on expected reward."""
    grads = reinforce_gradients(trajectories, params)
    for name, t in params.trainable().items():
        t.data += lr * grads[name]
    return params


def collect_trajectories(graph: InteractionGraph, target: int, truth_row: np.ndarray,
                         tables: NodeTables, encoder_params, params: SamplerParams,
                         *, k: int, side: str, seed: int, epoch: int,
                         m_trajectories: int):
    """Fresh episode for the target, M sampling passes, rewards attached."""
    episode = build_episode(graph, target, k, params.depth,
                            child_seed(seed, "sampler_ep", epoch, target), side)
    trajs = []
    pruned_first = None
    for m in range(m_trajectories):
        rng = rng_for(seed, "sampler_draw", epoch, target, m)
        pruned, traj = run_sampling(episode, tables, params, rng)
        traj.reward = episode_reward(episode, pruned, tables, encoder_params,
                                     truth_row)
        trajs.append(traj)
        if pruned_first is None:
            pruned_first = pruned
    return episode, pruned_first, trajs


def sampler_epoch(graph: InteractionGraph, targets: list, truth_table: np.ndarray,
                  tables: NodeTables, encoder_params, params: SamplerParams,
                  opt: Adam, *, k: int, seed: int, epoch: int, side: str = "user",
                  m_trajectories: int = 3, use_baseline: bool = False) -> float:
    """One policy-gradient pass: per-target trajectory gradients accumulate
    across the epoch into a single optimizer update. Returns mean reward."""
    targets = sorted(targets)
    perm = rng_for(seed, "sampler_order", epoch).permutation(len(targets))
    all_trajs = []
    for i in perm:
        t_id = targets[i]
        _, _, trajs = collect_trajectories(
            graph, t_id, truth_table[t_id], tables, encoder_params, params,
            k=k, side=side, seed=seed, epoch=epoch, m_trajectories=m_trajectories)
        all_trajs.extend(trajs)
    loss = reinforce_loss(all_trajs, params, use_baseline)
    if loss.requires_grad:
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(np.mean([t.reward for t in all_trajs]))


def train_sampler(graph: InteractionGraph, targets: list, truth_table: np.ndarray,
                  tables: NodeTables, encoder_params, params: SamplerParams, *,
                  k: int, epochs: int, lr: float, seed: int, side: str = "user",
                  m_trajectories: int = 3, use_baseline: bool = False) -> list:
    """Policy-gradient pre-training of the sampler with the encoder frozen."""
    opt = Adam(params.trainable(), lr)
    return [sampler_epoch(graph, targets, truth_table, tables, encoder_params, params,
                          opt, k=k, seed=seed, epoch=e, side=side,
                          m_trajectories=m_trajectories, use_baseline=use_baseline)
            for e in range(epochs)]
