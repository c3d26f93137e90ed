"""Command-line pipeline: ingest, factorize, pre-train, fine-tune, evaluate.

Every command reads the same declarative config (flags override file
values), writes its artifacts into the config's output directory, stamps
them with the config fingerprint, and refuses inputs stamped by a different
config. Commands are idempotent for a fixed config and seed; deterministic
single-worker execution is the default.

Exit codes: 0 ok, 2 config error, 3 staging error, 4 data error,
5 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, effective_yaml, fingerprint, load_config
from .encoder import NodeTables
from .errors import (ColdRecError, ConfigError, DataError, FormatError,
                     NumericError, StagingError)
from .evalrec import (EncodeContext, RecommenderHead, extrinsic_eval, finetune,
                      init_head, intrinsic_eval_pipeline, make_score_fn)
from .graph import (MetaSplit, build_episode, chrono_split_node, graph_fingerprint,
                    kshot_keep_map, load_graph, load_interactions, mask_edges,
                    save_graph, split_meta, split_train_test)
from .ground_truth import train_ground_truth, train_transductive
from .orchestrator import (STAGES, TrainingSchedule, load_state, new_state,
                           run_stage, save_state)
from .seeds import child_seed, rng_for

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGING = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

STAGE_FLAGS = {"g": "meta_learner", "f": "meta_agg", "s": "sampler", "joint": "joint"}


class _Log:
    def __init__(self, out_dir: str, command: str):
        os.makedirs(out_dir, exist_ok=True)
        self.fh = open(os.path.join(out_dir, f"{command}.log"), "w", encoding="utf-8")
        self.t0 = time.time()

    def __call__(self, msg: str) -> None:
        line = f"[{time.time() - self.t0:8.2f}s] {msg}"
        print(line)
        self.fh.write(line + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _paths(cfg: RunConfig) -> dict:
    out = cfg.out_dir
    return {
        "config": os.path.join(out, "effective_config.yaml"),
        "graph": os.path.join(out, "graph.npz"),
        "splits": os.path.join(out, "splits.json"),
        "groundtruth": os.path.join(out, "groundtruth.ckpt"),
        "init": os.path.join(out, "init.ckpt"),
        "pretrain": {s: os.path.join(out, f"pretrain_{s}.ckpt") for s in STAGES},
        "finetune": os.path.join(out, "finetune.ckpt"),
        "intrinsic": os.path.join(out, "intrinsic.jsonl"),
        "extrinsic": os.path.join(out, "extrinsic.jsonl"),
        "sweep": os.path.join(out, "sweep.jsonl"),
    }


def _echo_config(cfg: RunConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(_paths(cfg)["config"], "w", encoding="utf-8") as fh:
        fh.write(effective_yaml(cfg))


def _require(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise StagingError(f"missing prerequisite artifact: {what} ({path})")


def _check_fp(found: str, expected: str, what: str) -> None:
    if found != expected:
        raise ConfigError([f"{what} was produced by config {found or '<none>'}, "
                           f"current config is {expected}; refusing to chain"])


def _load_graph_checked(cfg: RunConfig, fp: str):
    path = _paths(cfg)["graph"]
    _require(path, "ingested graph")
    _check_fp(graph_fingerprint(path), fp, "graph artifact")
    return load_graph(path)


def _load_splits(cfg: RunConfig, fp: str) -> dict:
    path = _paths(cfg)["splits"]
    _require(path, "splits (run ground-truth first)")
    with open(path, "r", encoding="utf-8") as fh:
        splits = json.load(fh)
    _check_fp(splits.get("fingerprint", ""), fp, "splits artifact")
    splits["keep_map"] = {int(k): tuple(v) for k, v in splits["keep_map"].items()}
    return splits


def _load_tables(path: str, fp: str, what: str) -> tuple:
    _require(path, what)
    tensors, meta = read_checkpoint(path)
    _check_fp(meta.get("fingerprint", ""), fp, what)
    return tensors["user"], tensors["item"]


def _schedule(cfg: RunConfig) -> TrainingSchedule:
    return TrainingSchedule(
        dim=cfg.dim, depth=cfg.depth, k=cfg.k, heads=cfg.heads, f_max=cfg.f_max,
        aggregator=cfg.aggregator, activation=cfg.activation,
        m_trajectories=cfg.m_trajectories, lam_blend=cfg.lam_blend, seed=cfg.seed,
        batch_size=cfg.batch_size, use_baseline=cfg.use_baseline,
        epochs=dict(cfg.stage_epochs), lrs=dict(cfg.stage_lrs))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, log: _Log, args) -> int:
    g = load_interactions(cfg.dataset_path, cfg.dataset_format)
    log(f"loaded {g.num_users} users, {g.num_items} items, {len(g.edges)} edges")
    save_graph(g, _paths(cfg)["graph"], fingerprint(cfg))
    log(f"wrote {_paths(cfg)['graph']}")
    return EXIT_OK


def cmd_ground_truth(cfg: RunConfig, log: _Log, args) -> int:
    fp = fingerprint(cfg)
    g = _load_graph_checked(cfg, fp)
    split = split_meta(g, cfg.side, cfg.threshold)
    if not split.d_t:
        raise DataError(f"no nodes above degree threshold {cfg.threshold}")
    train_t, test_t = split_train_test(split.d_t, cfg.train_ratio, cfg.seed)
    log(f"split: |D_T|={len(split.d_t)} |D_N|={len(split.d_n)} "
        f"train={len(train_t)} test={len(test_t)}")
    keep = kshot_keep_map(g, test_t, cfg.side, cfg.k, cfg.seed)

    gt = train_ground_truth(g, split, d=cfg.dim, epochs=cfg.gt_epochs, lr=cfg.gt_lr,
                            lam=cfg.gt_reg, seed=child_seed(cfg.seed, "gt"))
    log(f"reference factorization: {len(gt.loss_history)} epochs, "
        f"loss {gt.loss_history[0]:.4f} -> {gt.loss_history[-1]:.4f}")
    init = train_transductive(g, train_t, keep, cfg.side, d=cfg.dim,
                              epochs=cfg.gt_epochs, lr=cfg.gt_lr, lam=cfg.gt_reg,
                              seed=child_seed(cfg.seed, "init"))
    log(f"transductive init: {len(init.loss_history)} epochs, "
        f"loss {init.loss_history[0]:.4f} -> {init.loss_history[-1]:.4f}")

    paths = _paths(cfg)
    with open(paths["splits"], "w", encoding="utf-8") as fh:
        json.dump({"side": split.side, "threshold": split.threshold,
                   "d_t": split.d_t, "d_n": split.d_n,
                   "train_t": train_t, "test_t": test_t,
                   "keep_map": {str(k): list(v) for k, v in keep.items()},
                   "fingerprint": fp, "seed": cfg.seed},
                  fh, sort_keys=True, separators=(",", ":"))
    write_checkpoint(paths["groundtruth"], {"user": gt.user_table, "item": gt.item_table},
                     {"kind": "tables", "which": "ground-truth", "fingerprint": fp})
    write_checkpoint(paths["init"], {"user": init.user_table, "item": init.item_table},
                     {"kind": "tables", "which": "transductive-init", "fingerprint": fp})
    log(f"wrote {paths['splits']}, {paths['groundtruth']}, {paths['init']}")
    return EXIT_OK


def _pretrain_world(cfg: RunConfig, fp: str):
    g = _load_graph_checked(cfg, fp)
    splits = _load_splits(cfg, fp)
    gt_user, gt_item = _load_tables(_paths(cfg)["groundtruth"], fp, "ground-truth tables")
    in_user, in_item = _load_tables(_paths(cfg)["init"], fp, "init tables")
    masked = mask_edges(g, splits["keep_map"], cfg.side)
    truth = gt_user if cfg.side == "user" else gt_item
    tables = NodeTables.from_arrays(in_user, in_item)
    return g, masked, splits, truth, tables


def cmd_pretrain(cfg: RunConfig, log: _Log, args) -> int:
    fp = fingerprint(cfg)
    stage = STAGE_FLAGS[args.stage]
    _, masked, splits, truth, tables = _pretrain_world(cfg, fp)
    paths = _paths(cfg)["pretrain"]
    idx = STAGES.index(stage)
    if idx == 0:
        state = new_state(_schedule(cfg), cfg.side, splits["train_t"], truth, tables)
    else:
        prev = STAGES[idx - 1]
        _require(paths[prev], f"pretrain stage '{prev}' checkpoint")
        state, prev_fp = load_state(paths[prev])
        _check_fp(prev_fp, fp, f"pretrain stage '{prev}' checkpoint")
    log(f"stage {stage}: targets={len(state.targets)} "
        f"epochs={state.schedule.epochs[stage]}")
    run_stage(stage, state, masked)
    hist = state.history[stage]
    if hist:
        first = hist[0][0] if isinstance(hist[0], list) else hist[0]
        last = hist[-1][0] if isinstance(hist[-1], list) else hist[-1]
        log(f"stage {stage}: metric {first:.4f} -> {last:.4f}")
    save_state(state, paths[stage], fp)
    log(f"wrote {paths[stage]}")
    return EXIT_OK


def _extrinsic_world(cfg: RunConfig, fp: str):
    """Cold-user chronological split and the visible evaluation graph."""
    g = _load_graph_checked(cfg, fp)
    splits = _load_splits(cfg, fp)
    d_n = splits["d_n"]
    train_items, test_items = {}, {}
    excluded = []
    for u in d_n:
        tr, te = chrono_split_node(g, cfg.side, u, cfg.chrono_frac)
        if not tr:
            excluded.append(u)
        train_items[u] = tuple(tr)
        test_items[u] = tuple(te)
    visible = mask_edges(g, {u: train_items[u] for u in d_n}, cfg.side)
    train_edges = [(u, i) for u in d_n for i in train_items[u]]
    return g, visible, splits, train_items, test_items, train_edges, excluded


def cmd_finetune(cfg: RunConfig, log: _Log, args) -> int:
    fp = fingerprint(cfg)
    paths = _paths(cfg)
    _require(paths["pretrain"]["joint"], "pretrain stage 'joint' checkpoint")
    state, prev_fp = load_state(paths["pretrain"]["joint"])
    _check_fp(prev_fp, fp, "pretrain joint checkpoint")
    g, visible, splits, train_items, test_items, train_edges, excluded = (
        _extrinsic_world(cfg, fp))
    log(f"cold nodes: {len(splits['d_n'])}, with training interactions: "
        f"{len(splits['d_n']) - len(excluded)}, training edges: {len(train_edges)}")
    if not train_edges:
        raise DataError("no cold-node training edges; lower chrono_frac or threshold")
    ext_init = train_transductive(
        g, splits["d_t"], {u: train_items[u] for u in splits["d_n"]}, cfg.side,
        d=cfg.dim, epochs=cfg.gt_epochs, lr=cfg.gt_lr, lam=cfg.gt_reg,
        seed=child_seed(cfg.seed, "ext_init"))
    tables = NodeTables.from_arrays(ext_init.user_table, ext_init.item_table)
    result = finetune(visible, train_edges, tables, state.agg, state.sampler,
                      k=cfg.k, epochs=cfg.finetune_epochs, lr=cfg.finetune_lr,
                      seed=child_seed(cfg.seed, "ft"), tune_sampler=cfg.tune_sampler)
    if result.history:
        log(f"fine-tune loss {result.history[0]:.4f} -> {result.history[-1]:.4f}")
    tensors = {"tables/user": tables.user.data, "tables/item": tables.item.data,
               "head/w": result.head.w.data}
    tensors.update({k: v.data for k, v in state.agg.named().items()})
    tensors.update({k: v.data for k, v in state.agg.meta.named().items()})
    if state.sampler is not None:
        tensors.update({k: v.data for k, v in state.sampler.named().items()})
    write_checkpoint(paths["finetune"], tensors,
                     {"kind": "finetune", "fingerprint": fp,
                      "history": result.history})
    log(f"wrote {paths['finetune']}")
    return EXIT_OK


def _restore_finetuned(cfg: RunConfig, fp: str):
    from . import autodiff as ad
    from .meta_aggregator import MetaAggParams
    from .meta_learner import MetaLearnerParams
    from .sampler import SamplerParams

    paths = _paths(cfg)
    _require(paths["finetune"], "finetune checkpoint")
    tensors, meta = read_checkpoint(paths["finetune"])
    _check_fp(meta.get("fingerprint", ""), fp, "finetune checkpoint")
    tables = NodeTables.from_arrays(tensors["tables/user"], tensors["tables/item"])
    ml = MetaLearnerParams(dim=cfg.dim, heads=cfg.heads,
                           wq=ad.parameter(tensors["meta/wq"]),
                           wk=ad.parameter(tensors["meta/wk"]),
                           wv=ad.parameter(tensors["meta/wv"]))
    agg = MetaAggParams(dim=cfg.dim, depth=cfg.depth, meta=ml,
                        aggregator=cfg.aggregator, activation=cfg.activation)
    for l in range(1, cfg.depth):
        agg.conv_weights.append(ad.parameter(tensors[f"agg/conv_w{l}"]))
        if cfg.aggregator == "attention":
            agg.attn_vectors.append(ad.parameter(tensors[f"agg/attn_v{l}"]))
    agg.final_weight = ad.parameter(tensors["agg/final_w"])
    sampler = None
    if any(k.startswith("sampler/") for k in tensors):
        sampler = SamplerParams(dim=cfg.dim, depth=cfg.depth, f_max=cfg.f_max)
        for order in range(2, cfg.depth + 1):
            sampler.w1.append(ad.parameter(tensors[f"sampler/w1_{order}"]))
            sampler.b.append(ad.parameter(tensors[f"sampler/b_{order}"]))
            sampler.w2.append(ad.parameter(tensors[f"sampler/w2_{order}"]))
    head = RecommenderHead(w=ad.parameter(tensors["head/w"]))
    return tables, agg, sampler, head


def cmd_eval_intrinsic(cfg: RunConfig, log: _Log, args) -> int:
    fp = fingerprint(cfg)
    stage = STAGE_FLAGS[args.source]
    if stage == "meta_learner":
        raise ConfigError(["eval-intrinsic needs at least the meta_agg stage (f)"])
    paths = _paths(cfg)
    _require(paths["pretrain"][stage], f"pretrain stage '{stage}' checkpoint")
    state, prev_fp = load_state(paths["pretrain"][stage])
    _check_fp(prev_fp, fp, f"pretrain '{stage}' checkpoint")
    g = _load_graph_checked(cfg, fp)
    splits = _load_splits(cfg, fp)
    gt_user, gt_item = _load_tables(paths["groundtruth"], fp, "ground-truth tables")
    truth = gt_user if cfg.side == "user" else gt_item
    masked = mask_edges(g, splits["keep_map"], cfg.side)
    episodes = {n: build_episode(masked, n, cfg.k, cfg.depth,
                                 child_seed(cfg.seed, "testep", n), cfg.side)
                for n in splits["test_t"]}
    sampler = state.sampler if stage in ("sampler", "joint") else None
    ctx = EncodeContext(tables=state.tables, encoder=state.agg, sampler=sampler,
                        episodes=episodes, seed=cfg.seed)
    report = intrinsic_eval_pipeline(ctx, splits["test_t"], truth, seed=cfg.seed,
                                     fingerprint=fp, workers=cfg.workers,
                                     extra={"source": stage, "depth": cfg.depth})
    report.write(paths["intrinsic"])
    log(f"embedding agreement over {len(report.node_ids)} nodes: "
        f"mean spearman {report.mean_of('spearman'):.4f} "
        f"({len(report.skipped)} skipped)")
    log(f"wrote {paths['intrinsic']}")
    return EXIT_OK


def cmd_eval_extrinsic(cfg: RunConfig, log: _Log, args) -> int:
    fp = fingerprint(cfg)
    paths = _paths(cfg)
    tables, agg, sampler, head = _restore_finetuned(cfg, fp)
    g, visible, splits, train_items, test_items, _, excluded = (
        _extrinsic_world(cfg, fp))
    score = make_score_fn(visible, tables, agg, sampler, head, k=cfg.k,
                          seed=child_seed(cfg.seed, "score"))
    users = [u for u in splits["d_n"] if train_items[u]]
    report = extrinsic_eval(users, score, train_items, test_items,
                            num_items=g.num_items, k_metric=cfg.metric_k,
                            seed=cfg.seed, fingerprint=fp,
                            extra={"excluded_no_train": len(excluded)})
    report.write(paths["extrinsic"])
    m = report.mean
    log(f"ranking over {len(report.node_ids)} cold nodes: "
        f"recall@{cfg.metric_k} {m.get('recall', float('nan')):.4f}, "
        f"ndcg@{cfg.metric_k} {m.get('ndcg', float('nan')):.4f}")
    log(f"wrote {paths['extrinsic']}")
    return EXIT_OK


def cmd_sweep_layers(cfg: RunConfig, log: _Log, args) -> int:
    import dataclasses as dc

    fp = fingerprint(cfg)
    paths = _paths(cfg)
    g = _load_graph_checked(cfg, fp)
    splits = _load_splits(cfg, fp)
    gt_user, gt_item = _load_tables(paths["groundtruth"], fp, "ground-truth tables")
    in_user, in_item = _load_tables(paths["init"], fp, "init tables")
    truth = gt_user if cfg.side == "user" else gt_item
    masked = mask_edges(g, splits["keep_map"], cfg.side)
    lines = []
    for depth in cfg.sweep_depths:
        sched = _schedule(cfg)
        sched = dc.replace(sched, depth=depth)
        tables = NodeTables.from_arrays(in_user.copy(), in_item.copy())
        state = new_state(sched, cfg.side, splits["train_t"], truth, tables)
        for stage in STAGES:
            run_stage(stage, state, masked)
        episodes = {n: build_episode(masked, n, cfg.k, depth,
                                     child_seed(cfg.seed, "testep", n), cfg.side)
                    for n in splits["test_t"]}
        ctx = EncodeContext(tables=state.tables, encoder=state.agg,
                            sampler=state.sampler, episodes=episodes, seed=cfg.seed)
        report = intrinsic_eval_pipeline(ctx, splits["test_t"], truth, seed=cfg.seed,
                                         fingerprint=fp, workers=cfg.workers,
                                         extra={"depth": depth})
        mean = report.mean_of("spearman")
        log(f"depth {depth}: mean spearman {mean:.4f} over {len(report.node_ids)} nodes")
        lines.append(json.dumps({"depth": depth, "mean_spearman": mean,
                                 "count": len(report.node_ids),
                                 "skipped": len(report.skipped),
                                 "fingerprint": fp, "seed": cfg.seed},
                                sort_keys=True, separators=(",", ":")))
    with open(paths["sweep"], "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    log(f"wrote {paths['sweep']}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, log: _Log, args) -> int:
    from .gradcheck_suite import gradcheck_battery
    results = gradcheck_battery(seed=cfg.seed, points=args.points)
    worst_name = max(results, key=results.get)
    ok = True
    log(f"{'operation':28s} {'max rel err':>12s}")
    for name, err in results.items():
        status = "ok" if err < 1e-5 else "FAIL"
        ok = ok and err < 1e-5
        log(f"{name:28s} {err:12.3e} {status}")
    log(f"worst: {worst_name} ({results[worst_name]:.3e})")
    if not ok:
        raise NumericError(f"gradient check failed: {worst_name}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "ground-truth": cmd_ground_truth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-intrinsic": cmd_eval_intrinsic,
    "eval-extrinsic": cmd_eval_extrinsic,
    "sweep-layers": cmd_sweep_layers,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coldrec",
        description="Pre-training pipeline for cold-start user/item embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    parents = argparse.ArgumentParser(add_help=False)
    parents.add_argument("--config", default=None, help="YAML config file")
    parents.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE", help="override a config entry")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[parents])
        if name == "pretrain":
            p.add_argument("--stage", required=True, choices=list(STAGE_FLAGS))
        if name == "eval-intrinsic":
            p.add_argument("--source", default="joint", choices=["f", "s", "joint"])
        if name == "gradcheck":
            p.add_argument("--points", type=int, default=10)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        for msg in e.violations:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    log = _Log(cfg.out_dir, args.command)
    try:
        _echo_config(cfg)
        log(f"command {args.command}, fingerprint {fingerprint(cfg)}")
        return COMMANDS[args.command](cfg, log, args)
    except ConfigError as e:
        for msg in e.violations:
            log(f"config error: {msg}")
        return EXIT_CONFIG
    except StagingError as e:
        log(f"staging error: {e}")
        return EXIT_STAGING
    except (DataError, FormatError) as e:
        log(f"data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        log(f"numeric error: {e}")
        return EXIT_NUMERIC
    except ColdRecError as e:
        log(f"error: {e}")
        return 1
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())
