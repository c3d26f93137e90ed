"""Staged training: meta learner, meta aggregator, sampler, then joint.

Stages run in a fixed order, each freezing everything the schedule says it
must not touch. The joint stage accumulates gradients over the whole epoch,
applies one optimizer update per parameter family, then blends the result
with the pre-epoch values (soft update). Checkpoints hold every parameter
tensor, optimizer moments, per-stage epoch counters and the histories;
saving canonicalizes the live state to its stored 32-bit form so resumed
runs replay uninterrupted ones exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import quantize, read_checkpoint, write_checkpoint
from .encoder import NodeTables, reconstruction_epoch
from .errors import ConfigError, DataError, FormatError, StagingError
from .graph import InteractionGraph
from .meta_aggregator import (MetaAggParams, encode_batch_with_meta,
                              init_meta_agg_params)
from .meta_learner import MetaLearnerParams, init_meta_learner, meta_learner_epoch
from .optim import Adam
from .sampler import (SamplerParams, collect_trajectories, init_sampler_params,
                      reinforce_loss, sampler_epoch)
from .seeds import rng_for

STAGES = ("meta_learner", "meta_agg", "sampler", "joint")


def soft_update(theta_new, theta_old, lam: float):
    """Blend lam * new + (1 - lam) * old elementwise."""
    new = np.asarray(theta_new, dtype=np.float64)
    old = np.asarray(theta_old, dtype=np.float64)
    if new.shape != old.shape:
        raise DataError(f"soft_update: shapes {new.shape} vs {old.shape}")
    if not (0.0 < lam < 1.0):
        raise ConfigError(f"blend factor must lie in (0, 1), got {lam}")
    return lam * new + (1.0 - lam) * old


@dataclass
class TrainingSchedule:
    dim: int = 256
    depth: int = 3
    k: int = 3
    heads: int = 4
    f_max: int = 8
    aggregator: str = "mean"
    activation: str = "sigmoid"
    m_trajectories: int = 3
    lam_blend: float = 0.05
    seed: int = 0
    batch_size: int = 64
    use_baseline: bool = False
    epochs: dict = field(default_factory=lambda: {
        "meta_learner": 50, "meta_agg": 50, "sampler": 50, "joint": 30})
    lrs: dict = field(default_factory=lambda: {
        "meta_learner": 0.005, "meta_agg": 0.003, "sampler": 0.003, "joint": 0.001})

    def __post_init__(self):
        if not (0.0 < self.lam_blend < 1.0):
            raise ConfigError(f"lam_blend must lie in (0, 1), got {self.lam_blend}")
        missing = [s for s in STAGES if s not in self.epochs or s not in self.lrs]
        if missing:
            raise ConfigError(f"schedule missing epochs/lrs for stages: {missing}")


@dataclass
class PipelineState:
    schedule: TrainingSchedule
    side: str
    targets: list
    truth: np.ndarray
    tables: NodeTables
    meta: MetaLearnerParams | None = None
    agg: MetaAggParams | None = None
    sampler: SamplerParams | None = None
    stage_epoch: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    opt_state: dict = field(default_factory=dict)
    history: dict = field(default_factory=lambda: {s: [] for s in STAGES})

    def is_complete(self, stage: str) -> bool:
        return self.stage_epoch[stage] >= self.schedule.epochs[stage]

    def named_tensors(self) -> dict:
        out = {}
        if self.meta is not None:
            out.update(self.meta.named())
        if self.agg is not None:
            out.update(self.agg.named())
        if self.sampler is not None:
            out.update(self.sampler.named())
        return out


def new_state(schedule: TrainingSchedule, side: str, targets: list,
              truth: np.ndarray, tables: NodeTables) -> PipelineState:
    return PipelineState(schedule=schedule, side=side, targets=sorted(targets),
                         truth=truth, tables=tables)


def _opt_for(state: PipelineState, key: str, tensors: dict, lr: float) -> Adam:
    opt = Adam(tensors, lr)
    opt.state = state.opt_state.setdefault(key, {})
    return opt


def _freeze_all(state: PipelineState) -> None:
    if state.meta is not None:
        state.meta.set_trainable(False)
    if state.agg is not None:
        for t in state.agg.named().values():
            t.requires_grad = False
    if state.sampler is not None:
        state.sampler.set_trainable(False)


def _joint_epoch(state: PipelineState, graph: InteractionGraph, epoch: int) -> tuple:
    """One joint epoch: sampler-pruned reconstruction plus policy gradients,
    one accumulated update per family, then soft blending."""
    sched = state.schedule
    pre = {name: t.data.copy() for name, t in state.named_tensors().items()}
    recon_tensors = state.agg.trainable(include_meta=True)
    opt_f = _opt_for(state, "joint_f", recon_tensors, sched.lrs["joint"])
    opt_s = _opt_for(state, "joint_s", state.sampler.trainable(), sched.lrs["joint"])

    targets = sorted(state.targets)
    perm = rng_for(sched.seed, "joint_order", epoch).permutation(len(targets))
    all_trajs = []
    total_loss = 0.0
    n = len(targets)
    for lo in range(0, n, sched.batch_size):
        batch_ids = [targets[i] for i in perm[lo:lo + sched.batch_size]]
        pruned_eps = []
        for t_id in batch_ids:
            _, pruned, trajs = collect_trajectories(
                graph, t_id, state.truth[t_id], state.tables, state.agg,
                state.sampler, k=sched.k, side=state.side, seed=sched.seed,
                epoch=epoch, m_trajectories=sched.m_trajectories)
            all_trajs.extend(trajs)
            pruned_eps.append(pruned)
        h = encode_batch_with_meta(pruned_eps, state.tables, state.agg)
        truth = ad.Tensor(state.truth[np.asarray(batch_ids, dtype=np.int64)])
        loss = ad.rsub_const(1.0, ad.mean(ad.cosine_rows(h, truth)))
        total_loss += loss.item() * len(batch_ids)
        opt_f.zero_grad()
        loss.backward()
        opt_f.step()

    rl_loss = reinforce_loss(all_trajs, state.sampler, sched.use_baseline)
    if rl_loss.requires_grad:
        opt_s.zero_grad()
        rl_loss.backward()
        opt_s.step()

    for name, t in state.named_tensors().items():
        t.data = soft_update(t.data, pre[name], sched.lam_blend)
    mean_reward = float(np.mean([t.reward for t in all_trajs])) if all_trajs else 0.0
    return total_loss / n, mean_reward


def run_stage(stage: str, state: PipelineState, graph: InteractionGraph,
              max_epochs: int | None = None) -> PipelineState:
    """Run (or resume) one stage for up to ``max_epochs`` of its budget.

    Prerequisite stages must be complete; parameters outside the stage are
    frozen for its duration."""
    if stage not in STAGES:
        raise StagingError(f"unknown stage: {stage}")
    for prereq in STAGES[:STAGES.index(stage)]:
        if not state.is_complete(prereq):
            raise StagingError(
                f"stage '{stage}' requires completed '{prereq}' "
                f"({state.stage_epoch[prereq]}/{state.schedule.epochs[prereq]} epochs)")
    sched = state.schedule
    start = state.stage_epoch[stage]
    budget = sched.epochs[stage]
    end = budget if max_epochs is None else min(budget, start + max_epochs)

    if stage == "meta_learner":
        if state.meta is None:
            state.meta = init_meta_learner(rng_for(sched.seed, "init", "meta"),
                                           sched.dim, sched.heads)
        _freeze_all(state)
        state.meta.set_trainable(True)
        opt = _opt_for(state, stage, state.meta.trainable(), sched.lrs[stage])
        for epoch in range(start, end):
            loss = meta_learner_epoch(graph, state.targets, state.truth, state.tables,
                                      state.meta, opt, k=sched.k, seed=sched.seed,
                                      epoch=epoch, side=state.side,
                                      batch_size=sched.batch_size)
            state.history[stage].append(loss)
            state.stage_epoch[stage] = epoch + 1

    elif stage == "meta_agg":
        if state.agg is None:
            state.agg = init_meta_agg_params(rng_for(sched.seed, "init", "agg"),
                                             sched.dim, sched.depth, state.meta,
                                             sched.aggregator, sched.activation)
        _freeze_all(state)
        trainable = state.agg.trainable(include_meta=False)
        for t in trainable.values():
            t.requires_grad = True
        opt = _opt_for(state, stage, trainable, sched.lrs[stage])
        encode_fn = lambda eps: encode_batch_with_meta(eps, state.tables, state.agg)
        for epoch in range(start, end):
            loss = reconstruction_epoch(graph, state.targets, state.truth, state.tables,
                                        state.agg, opt, k=sched.k, seed=sched.seed,
                                        epoch=epoch, side=state.side,
                                        batch_size=sched.batch_size, encode_fn=encode_fn)
            state.history[stage].append(loss)
            state.stage_epoch[stage] = epoch + 1

    elif stage == "sampler":
        if state.sampler is None:
            state.sampler = init_sampler_params(rng_for(sched.seed, "init", "sampler"),
                                                sched.dim, sched.depth, sched.f_max)
        _freeze_all(state)
        state.sampler.set_trainable(True)
        opt = _opt_for(state, stage, state.sampler.trainable(), sched.lrs[stage])
        for epoch in range(start, end):
            reward = sampler_epoch(graph, state.targets, state.truth, state.tables,
                                   state.agg, state.sampler, opt, k=sched.k,
                                   seed=sched.seed, epoch=epoch, side=state.side,
                                   m_trajectories=sched.m_trajectories,
                                   use_baseline=sched.use_baseline)
            state.history[stage].append(reward)
            state.stage_epoch[stage] = epoch + 1

    else:  # joint
        for t in state.agg.trainable(include_meta=True).values():
            t.requires_grad = True
        state.sampler.set_trainable(True)
        for epoch in range(start, end):
            loss, reward = _joint_epoch(state, graph, epoch)
            state.history[stage].append([loss, reward])
            state.stage_epoch[stage] = epoch + 1
    return state


def run_all_stages(state: PipelineState, graph: InteractionGraph) -> PipelineState:
    for stage in STAGES:
        run_stage(stage, state, graph)
    return state


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_state(state: PipelineState, path: str, fingerprint: str = "") -> None:
    """Serialize and canonicalize: the live float64 state is replaced by its
    stored float32 image so that restore-then-train matches train-through."""
    tensors = {}
    tensors["tables/user"] = state.tables.user.data
    tensors["tables/item"] = state.tables.item.data
    tensors["truth/target"] = state.truth
    for name, t in state.named_tensors().items():
        tensors[name] = t.data
    opt_meta = {}
    for key, opt_state in state.opt_state.items():
        opt_meta[key] = opt_state.get("t", 0)
        for k, v in opt_state.items():
            if k != "t":
                tensors[f"opt/{key}/{k}"] = v
    metadata = {
        "kind": "pipeline",
        "fingerprint": fingerprint,
        "side": state.side,
        "targets": state.targets,
        "schedule": dataclasses.asdict(state.schedule),
        "stage_epoch": state.stage_epoch,
        "opt_t": opt_meta,
        "history": state.history,
        "components": {
            "meta": state.meta is not None,
            "agg": state.agg is not None,
            "sampler": state.sampler is not None,
        },
        "rng": {"master_seed": state.schedule.seed,
                "note": "streams derive from (seed, stage, epoch) counters"},
    }
    write_checkpoint(path, tensors, metadata)
    # canonicalize live state to the stored image
    state.tables.user.data = quantize(state.tables.user.data)
    state.tables.item.data = quantize(state.tables.item.data)
    state.truth = quantize(state.truth)
    for t in state.named_tensors().values():
        t.data = quantize(t.data)
    for opt_state in state.opt_state.values():
        for k in list(opt_state):
            if k != "t":
                opt_state[k] = quantize(opt_state[k])


def load_state(path: str) -> tuple:
    """Returns (PipelineState, fingerprint)."""
    tensors, metadata = read_checkpoint(path)
    if metadata.get("kind") != "pipeline":
        raise FormatError(f"{path}: not a pipeline checkpoint")
    sched = TrainingSchedule(**metadata["schedule"])
    tables = NodeTables.from_arrays(tensors["tables/user"], tensors["tables/item"])
    state = PipelineState(schedule=sched, side=metadata["side"],
                          targets=list(metadata["targets"]),
                          truth=tensors["truth/target"], tables=tables)
    comp = metadata["components"]
    if comp["meta"]:
        state.meta = MetaLearnerParams(
            dim=sched.dim, heads=sched.heads,
            wq=ad.parameter(tensors["meta/wq"]),
            wk=ad.parameter(tensors["meta/wk"]),
            wv=ad.parameter(tensors["meta/wv"]))
    if comp["agg"]:
        agg = MetaAggParams(dim=sched.dim, depth=sched.depth, meta=state.meta,
                            aggregator=sched.aggregator, activation=sched.activation)
        for l in range(1, sched.depth):
            agg.conv_weights.append(ad.parameter(tensors[f"agg/conv_w{l}"]))
            if sched.aggregator == "attention":
                agg.attn_vectors.append(ad.parameter(tensors[f"agg/attn_v{l}"]))
        agg.final_weight = ad.parameter(tensors["agg/final_w"])
        state.agg = agg
    if comp["sampler"]:
        sp = SamplerParams(dim=sched.dim, depth=sched.depth, f_max=sched.f_max)
        for order in range(2, sched.depth + 1):
            sp.w1.append(ad.parameter(tensors[f"sampler/w1_{order}"]))
            sp.b.append(ad.parameter(tensors[f"sampler/b_{order}"]))
            sp.w2.append(ad.parameter(tensors[f"sampler/w2_{order}"]))
        state.sampler = sp
    state.stage_epoch = {s: int(v) for s, v in metadata["stage_epoch"].items()}
    state.history = metadata["history"]
    for key, t_count in metadata.get("opt_t", {}).items():
        opt_state: dict = {"t": int(t_count)}
        prefix = f"opt/{key}/"
        for name, arr in tensors.items():
            if name.startswith(prefix):
                opt_state[name[len(prefix):]] = arr
        state.opt_state[key] = opt_state
    return state, metadata.get("fingerprint", "")
