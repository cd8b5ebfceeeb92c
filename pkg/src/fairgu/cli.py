"""Experiment orchestration and command-line entry points.

Subcommands:
    synth      generate a synthetic biased graph and write node/edge files
    partition  compute and persist a balanced shard assignment
    train      train shard models and write a checkpoint
    unlearn    sample/load a deletion request, apply it, retrain, checkpoint
    eval       evaluate a checkpoint into a fairness CSV row
    mia        run the membership-inference audit for a checkpoint
    sweep      alpha/beta trade-off grid, emitting plot-ready CSV
    run        full experiment grid from a config file

Config files are flat ``key=value`` lines; lists use ``key=[a,b,c]``.
Exit code is 0 only if every grid cell succeeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import traceback
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ValidationError
from .graph import (Graph, SbmSpec, apply_deletion, generate_sbm, load_graph,
                    save_graph)
from .metrics import REPORT_COLUMNS, evaluate_predictions
from .mia import build_attack_dataset, fit_attack, run_attack, train_shadows
from .partition import (Partition, balanced_partition, induce_shards,
                        load_assignment, route_request, save_assignment)
from .trainer import (FguConfig, aggregate, config_hash, fgu_unlearn_retrain,
                      load_state, save_state, train_shards)
from .unlearn import (DeletionSpec, fair_retrain_baseline, load_request,
                      retrain_baseline, sample_request, save_request)

METHODS = ("fgu", "retrain", "fair_retrain")
FAIRNESS_HEADER = REPORT_COLUMNS + ("config_hash",)
MIA_HEADER = ("method", "r_n", "seed", "attack_accuracy", "config_hash")
TRADEOFF_HEADER = ("alpha", "beta", "accuracy", "delta_dp", "attack_accuracy", "dp_dips_along_alpha")


@dataclass(frozen=True)
class ExperimentConfig:
    node_file: str = ""
    edge_file: str = ""
    sbm_nodes_per_block: int = 300
    sbm_intra_edge_prob: float = 0.05
    sbm_inter_edge_prob: float = 0.005
    sbm_label_sensitive_correlation: float = 0.6
    sbm_feature_dim: int = 8
    sbm_feature_shift: float = 1.0
    sbm_seed: int = 11
    k: int = 5
    epochs: int = 100
    eta: float = 1e-3
    alpha: float = 3.0
    beta: float = 1.5
    t1: int = 5
    aggregation_mode: str = "weights"
    hidden_dim: int = 16
    weight_decay: float = 1e-3
    methods: tuple = METHODS
    r_n: tuple = (0.05, 0.1, 0.2)
    r_e: tuple = (0.1,)
    strategy: str = "uniform"
    seeds: tuple = (0,)
    alpha_grid: tuple = ()
    beta_grid: tuple = ()
    mia: bool = False
    mia_shadows: int = 20
    out_dir: str = "results"

    def __post_init__(self):
        if not self.methods:
            raise ValidationError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ValidationError(f"unknown method {m!r}; choose from {METHODS}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be distinct")

    def sbm_spec(self) -> SbmSpec:
        return SbmSpec(self.sbm_nodes_per_block, self.sbm_intra_edge_prob,
                       self.sbm_inter_edge_prob, self.sbm_label_sensitive_correlation,
                       self.sbm_feature_dim, self.sbm_feature_shift, self.sbm_seed)

    def fgu_config(self, seed: int) -> FguConfig:
        return FguConfig(k=self.k, epochs=self.epochs, eta=self.eta, alpha=self.alpha,
                         beta=self.beta, t1=self.t1, seed=seed,
                         aggregation_mode=self.aggregation_mode,
                         hidden_dim=self.hidden_dim, weight_decay=self.weight_decay)


_LIST_FIELDS = {"methods": str, "r_n": float, "r_e": float, "seeds": int,
                "alpha_grid": float, "beta_grid": float}
_BOOL_FIELDS = {"mia"}


def parse_config(path) -> ExperimentConfig:
    overrides = {}
    defaults = ExperimentConfig()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path} line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ValidationError(f"{path} line {lineno}: unknown key {key!r}")
        if key in _LIST_FIELDS:
            if not (value.startswith("[") and value.endswith("]")):
                raise ValidationError(f"{path} line {lineno}: {key} needs list syntax [a,b,c]")
            items = [x.strip() for x in value[1:-1].split(",") if x.strip()]
            overrides[key] = tuple(_LIST_FIELDS[key](x) for x in items)
        elif key in _BOOL_FIELDS:
            overrides[key] = value.lower() in ("1", "true", "yes")
        else:
            overrides[key] = type(getattr(defaults, key))(value)
    return ExperimentConfig(**overrides)


def _cell_hash(cfg: ExperimentConfig, method: str, r_n: float, r_e: float) -> str:
    text = f"{config_hash(cfg.fgu_config(0))};{cfg.sbm_spec() if not cfg.node_file else cfg.node_file};" \
           f"{method};{r_n:g};{r_e:g};{cfg.strategy}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _load_dataset(cfg: ExperimentConfig) -> Graph:
    if cfg.node_file:
        return load_graph(cfg.node_file, cfg.edge_file)
    return generate_sbm(cfg.sbm_spec())


def run_fgu_cell(g: Graph, fgu_cfg: FguConfig, spec: DeletionSpec):
    """Full sharded train/unlearn/debias pipeline for one grid cell.
    Returns (state, g_prime, request, updated shard graphs, id maps).
    """
    part = balanced_partition(g, fgu_cfg.k, seed=fgu_cfg.seed)
    state = train_shards(list(part.shard_graphs), fgu_cfg)
    req = sample_request(g, spec)
    shard_reqs, _cross = route_request(part, req)
    updated, updated_maps, dirty = [], [], set()
    for i, (shard, local_req) in enumerate(zip(part.shard_graphs, shard_reqs)):
        if local_req.is_empty:
            updated.append(shard)
            updated_maps.append(part.local_to_global[i])
            continue
        new_shard, old_to_new = apply_deletion(shard, local_req)
        updated.append(new_shard)
        updated_maps.append(part.local_to_global[i][old_to_new >= 0])
        dirty.add(i)
    g_prime, _ = apply_deletion(g, req)
    state = fgu_unlearn_retrain(state, updated, dirty, g_prime, fgu_cfg)
    return state, g_prime, req, updated, updated_maps


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run the full grid; returns the number of failed cells."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = _load_dataset(cfg)

    fairness_rows, mia_rows, failures = [], [], []
    for method in cfg.methods:
        for r_n in cfg.r_n:
            for r_e in cfg.r_e:
                chash = _cell_hash(cfg, method, r_n, r_e)
                for seed in cfg.seeds:
                    try:
                        row, mia_row = _run_cell(g, cfg, method, r_n, r_e, seed, chash)
                        fairness_rows.append(row)
                        if mia_row is not None:
                            mia_rows.append(mia_row)
                    except Exception as exc:  # isolate the cell, keep the grid alive
                        failures.append([method, f"{r_n:g}", f"{r_e:g}", str(seed),
                                         f"{type(exc).__name__}: {exc}"])

    _write_csv(out / "fairness.csv", FAIRNESS_HEADER, fairness_rows)
    if mia_rows:
        _write_csv(out / "mia.csv", MIA_HEADER, mia_rows)
    if failures:
        _write_csv(out / "failures.csv", ("method", "r_n", "r_e", "seed", "error"), failures)
    manifest = {
        "config_hash": config_hash(cfg.fgu_config(0)),
        "seeds": list(cfg.seeds),
        "versions": {"fairgu": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "cells": len(fairness_rows) + len(failures),
        "failures": len(failures),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return len(failures)


def _run_cell(g, cfg, method, r_n, r_e, seed, chash):
    fgu_cfg = cfg.fgu_config(seed)
    spec = DeletionSpec(r_n=r_n, r_e=r_e, strategy=cfg.strategy, seed=seed)
    mia_row = None
    if method == "fgu":
        state, g_prime, req, _, _ = run_fgu_cell(g, fgu_cfg, spec)
        probs = aggregate(state, g_prime, cfg.aggregation_mode).probs
        report = evaluate_predictions(g_prime, probs)
        target = state
    else:
        req = sample_request(g, spec)
        g_prime, _ = apply_deletion(g, req)
        baseline = retrain_baseline if method == "retrain" else fair_retrain_baseline
        model, report = baseline(g_prime, fgu_cfg)
        target = model
    if cfg.mia:
        shadows = train_shadows(g, fgu_cfg, num_shadows=cfg.mia_shadows)
        attack = fit_attack(build_attack_dataset(shadows), seed=seed)
        nonmembers = np.flatnonzero(g.mask("test"))
        acc = run_attack(attack, target, g, sorted(req.nodes), nonmembers,
                         mode=cfg.aggregation_mode, seed=seed)
        mia_row = [method, f"{r_n:g}", str(seed), f"{acc:.6f}", chash]
    return report.csv_row(method, r_n, r_e, seed) + [chash], mia_row


def emit_tradeoff(rows) -> list[list[str]]:
    """Sorted, deduplicated (alpha, beta, accuracy, delta_dp[, attack])
    points plus a per-beta flag for whether delta_dp dips (first decreases,
    later increases) along alpha. Missing attack accuracies serialize as
    empty strings.
    """
    if not rows:
        raise ValidationError("emit_tradeoff needs at least one row")
    seen = {}
    for row in rows:
        alpha, beta, acc, dp = row[0], row[1], row[2], row[3]
        attack = row[4] if len(row) > 4 else None
        seen[(float(alpha), float(beta))] = (float(acc), float(dp),
                                             None if attack is None else float(attack))
    points = sorted(seen.items())
    dips = {}
    for beta in {b for (_, b) in seen}:
        dps = [seen[key][1] for key in sorted(seen) if key[1] == beta]
        lowest = int(np.argmin(dps))
        dips[beta] = bool(dps[lowest] < dps[0] and dps[-1] > dps[lowest])
    out = []
    for (alpha, beta), (acc, dp, attack) in points:
        out.append([f"{alpha:g}", f"{beta:g}", f"{acc:.6f}", f"{dp:.6f}",
                    "" if attack is None else f"{attack:.6f}", str(dips[beta]).lower()])
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _add_sbm_flags(p):
    p.add_argument("--nodes-per-block", type=int, default=300)
    p.add_argument("--intra", type=float, default=0.05)
    p.add_argument("--inter", type=float, default=0.005)
    p.add_argument("--correlation", type=float, default=0.6)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--feature-shift", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=11)


def _add_model_flags(p):
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--eta", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--beta", type=float, default=1.5)
    p.add_argument("--t1", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--aggregation-mode", choices=("weights", "posteriors"), default="weights")


def _flags_config(args) -> FguConfig:
    return FguConfig(k=args.k, epochs=args.epochs, eta=args.eta, alpha=args.alpha,
                     beta=args.beta, t1=args.t1, seed=args.seed,
                     aggregation_mode=args.aggregation_mode,
                     hidden_dim=args.hidden_dim, weight_decay=args.weight_decay)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fairgu", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic biased graph")
    _add_sbm_flags(p)
    p.add_argument("--out-nodes", required=True)
    p.add_argument("--out-edges", required=True)

    p = sub.add_parser("partition", help="balanced shard assignment")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train shard models")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--assignment", required=True)
    _add_model_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("unlearn", help="apply a deletion request and retrain")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--request", help="request file; if absent, sample one")
    p.add_argument("--r-n", type=float, default=0.1)
    p.add_argument("--r-e", type=float, default=0.1)
    p.add_argument("--strategy", choices=("privileged", "unprivileged", "uniform"), default="uniform")
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--out-nodes", required=True)
    p.add_argument("--out-edges", required=True)
    p.add_argument("--out-request")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="fgu")
    p.add_argument("--r-n", type=float, default=0.0)
    p.add_argument("--r-e", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregation-mode", choices=("weights", "posteriors"), default="weights")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mia", help="membership-inference audit of a checkpoint")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--request", required=True)
    p.add_argument("--num-shadows", type=int, default=20)
    _add_model_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="alpha/beta trade-off grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="full experiment grid")
    p.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "synth":
        spec = SbmSpec(args.nodes_per_block, args.intra, args.inter, args.correlation,
                       args.feature_dim, args.feature_shift, args.seed)
        save_graph(generate_sbm(spec), args.out_nodes, args.out_edges)
        print(f"wrote {args.out_nodes} and {args.out_edges}")
        return 0

    if args.command == "partition":
        g = load_graph(args.nodes, args.edges)
        part = balanced_partition(g, args.k, seed=args.seed)
        save_assignment(args.out, part.assignment)
        print(f"wrote {args.out} ({args.k} shards)")
        return 0

    if args.command == "train":
        g = load_graph(args.nodes, args.edges)
        assignment = load_assignment(args.assignment)
        shards = [sg for sg, _ in induce_shards(g, assignment)]
        cfg = _flags_config(args)
        state = train_shards(shards, cfg)
        save_state(args.out, state, cfg)
        print(f"wrote {args.out} (k={state.k}, epoch={state.epoch})")
        return 0

    if args.command == "unlearn":
        g = load_graph(args.nodes, args.edges)
        assignment = load_assignment(args.assignment)
        cfg = _flags_config(args)
        state, _meta = load_state(args.checkpoint)
        shards = induce_shards(g, assignment)
        part = Partition(assignment, int(assignment.max()) + 1,
                         tuple(sg for sg, _ in shards), tuple(m for _, m in shards))
        if args.request:
            req = load_request(args.request)
        else:
            spec = DeletionSpec(args.r_n, args.r_e, args.strategy, seed=args.seed)
            req = sample_request(g, spec)
            if args.out_request:
                save_request(args.out_request, req, spec)
        shard_reqs, cross = route_request(part, req)
        if cross:
            print(f"note: {len(cross)} cross-shard edge deletions are no-ops")
        updated, dirty = [], set()
        for i, (shard, local_req) in enumerate(zip(part.shard_graphs, shard_reqs)):
            if local_req.is_empty:
                updated.append(shard)
            else:
                updated.append(apply_deletion(shard, local_req)[0])
                dirty.add(i)
        g_prime, _ = apply_deletion(g, req)
        state = fgu_unlearn_retrain(state, updated, dirty, g_prime, cfg)
        save_state(args.out, state, cfg)
        save_graph(g_prime, args.out_nodes, args.out_edges)
        print(f"wrote {args.out}; {len(dirty)} dirty shard(s) retrained")
        return 0

    if args.command == "eval":
        g = load_graph(args.nodes, args.edges)
        state, _meta = load_state(args.checkpoint)
        probs = aggregate(state, g, args.aggregation_mode).probs
        report = evaluate_predictions(g, probs)
        chash = _meta["config_hash"][:16]
        _write_csv(args.out, FAIRNESS_HEADER,
                   [report.csv_row(args.method, args.r_n, args.r_e, args.seed) + [chash]])
        print(f"accuracy={report.accuracy:.4f} f1={report.f1:.4f} "
              f"delta_dp={report.delta_dp:.4f} delta_eo={report.delta_eo:.4f}")
        return 0

    if args.command == "mia":
        g = load_graph(args.nodes, args.edges)
        state, _meta = load_state(args.checkpoint)
        req = load_request(args.request)
        if not req.nodes:
            raise ValidationError("request has no deleted nodes to audit")
        cfg = _flags_config(args)
        shadows = train_shadows(g, cfg, num_shadows=args.num_shadows)
        attack = fit_attack(build_attack_dataset(shadows), seed=cfg.seed)
        nonmembers = np.flatnonzero(g.mask("test"))
        acc = run_attack(attack, state, g, sorted(req.nodes), nonmembers,
                         mode=cfg.aggregation_mode, seed=cfg.seed)
        _write_csv(args.out, MIA_HEADER,
                   [["fgu", "", str(cfg.seed), f"{acc:.6f}", _meta["config_hash"][:16]]])
        print(f"attack_accuracy={acc:.4f}")
        return 0

    if args.command == "sweep":
        cfg = parse_config(args.config)
        grid_alpha = cfg.alpha_grid or (cfg.alpha,)
        grid_beta = cfg.beta_grid or (cfg.beta,)
        g = _load_dataset(cfg)
        rows = []
        failures = 0
        for beta in grid_beta:
            for alpha in grid_alpha:
                accs, dps = [], []
                for seed in cfg.seeds:
                    try:
                        fgu_cfg = replace(cfg.fgu_config(seed), alpha=alpha, beta=beta)
                        spec = DeletionSpec(cfg.r_n[0], cfg.r_e[0], cfg.strategy, seed=seed)
                        state, g_prime, _, _, _ = run_fgu_cell(g, fgu_cfg, spec)
                        report = evaluate_predictions(
                            g_prime, aggregate(state, g_prime, cfg.aggregation_mode).probs)
                        accs.append(report.accuracy)
                        dps.append(report.delta_dp)
                    except Exception as exc:
                        failures += 1
                        print(f"sweep cell alpha={alpha} beta={beta} seed={seed} failed: {exc}",
                              file=sys.stderr)
                if accs:
                    rows.append([alpha, beta, float(np.mean(accs)), float(np.mean(dps))])
        _write_csv(args.out, TRADEOFF_HEADER, emit_tradeoff(rows))
        print(f"wrote {args.out} ({len(rows)} points)")
        return 1 if failures else 0

    if args.command == "run":
        cfg = parse_config(args.config)
        failures = run_experiment(cfg)
        print(f"grid complete; {failures} failed cell(s); results in {cfg.out_dir}/")
        return 1 if failures else 0

    raise ValidationError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
