"""Command-line pipeline: data generation, supernet training, search, retraining, reporting."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .attacks import AttackProxyConfig, generate_proxy_set, perturb
from .graph import SbmParams, generate_sbm, load_dataset, save_dataset, split_nodes
from .layers import Dims
from .search import (EvoConfig, evolutionary_search, read_top_k, retrain_from_scratch,
                     write_top_k, write_trajectory)
from .space import Genome, SearchSpaceConfig, validate_genome
from .supernet import DivergenceError, Supernet, TrainConfig, build_supernet, train_supernet

log = logging.getLogger("robustnas")

SEED_LABELS = ("data", "supernet", "proxy", "evo", "retrain")

SUPERNET_BIN = "supernet.bin"
SUPERNET_JSON = "supernet.json"
SUPERNET_LOSS = "supernet_trajectory.csv"
TOP_K = "search_top_k.json"
TRAJECTORY = "search_trajectory.csv"
RESULTS = "results.csv"
SUMMARY = "summary.md"
ACC_VS_PTB = "accuracy_vs_ptb.csv"

DEFAULTS = {
    "seed": 0,
    "data": {"manifest": None, "sbm": asdict(SbmParams()), "split": [0.1, 0.1, 0.8]},
    "space": {},
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
    "proxy": {k: v for k, v in asdict(AttackProxyConfig()).items() if k != "seed"},
    "evo": {k: v for k, v in asdict(EvoConfig()).items() if k != "seed"},
    "retrain": {"epochs": 1000, "seeds": 10, "attack": "dice", "grid": [0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
                "attacker_knows_all_labels": True},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, where: str = "", open_: bool = False) -> dict:
    # the search-space section is open: SearchSpaceConfig validates its keys
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in out and not open_:
            raise ConfigError(f"unknown config key {where + key!r}")
        current = out.get(key)
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = _merge(current, value, where + key + ".", open_ or key == "space")
        else:
            out[key] = value
    return out


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        cfg = _merge(cfg, user)
    for item in overrides or []:
        cfg = _merge(cfg, _parse_override(item))
    return cfg


def sub_seeds(master: int) -> dict[str, int]:
    """Independent labeled seeds derived from the master seed."""
    children = np.random.SeedSequence(int(master)).spawn(len(SEED_LABELS))
    return {label: int(c.generate_state(1)[0]) for label, c in zip(SEED_LABELS, children)}


class RunConfig:
    """Validated view of a merged configuration dictionary."""

    def __init__(self, cfg: dict, out: str):
        self.raw = cfg
        self.out = Path(out)
        self.seeds = sub_seeds(cfg["seed"])
        try:
            self.space = SearchSpaceConfig.from_dict(cfg["space"])
            self.train = TrainConfig(**cfg["train"], seed=self.seeds["supernet"])
            self.proxy = AttackProxyConfig(**cfg["proxy"], seed=self.seeds["proxy"])
            self.evo = EvoConfig(**cfg["evo"], seed=self.seeds["evo"])
            self.sbm = SbmParams(**{**cfg["data"]["sbm"], "seed": cfg["data"]["sbm"].get("seed", self.seeds["data"])})
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}")
        self.manifest = cfg["data"].get("manifest")
        self.split = tuple(cfg["data"]["split"])
        r = cfg["retrain"]
        if r["seeds"] < 1 or r["epochs"] < 1:
            raise ConfigError("retrain.seeds and retrain.epochs must be >= 1")
        if any(not 0.0 <= p < 1.0 for p in r["grid"]):
            raise ConfigError("retrain.grid rates must lie in [0, 1)")
        self.retrain = r

    def ensure_out(self) -> Path:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {self.out} is not writable: {exc}")
        return self.out

    def dataset(self):
        if self.manifest:
            return load_dataset(self.manifest)
        local = self.out / "data" / "graph.manifest.json"
        if local.exists():
            return load_dataset(local)
        return split_nodes(generate_sbm(self.sbm), self.split, seed=self.seeds["data"])


def cmd_gen_data(rc: RunConfig) -> Path:
    rc.ensure_out()
    graph = split_nodes(generate_sbm(rc.sbm), rc.split, seed=rc.seeds["data"])
    path = save_dataset(graph, rc.out / "data")
    log.info("wrote %s (n=%d, |E|=%d)", path, graph.n, graph.num_edges)
    return path


def cmd_train_supernet(rc: RunConfig) -> Supernet:
    out = rc.ensure_out()
    graph = rc.dataset()
    net = build_supernet(rc.space, Dims(graph.feature_dim, rc.space.hidden_dim, graph.num_classes),
                         rc.seeds["supernet"])
    try:
        rows = train_supernet(net, graph, rc.train)
    except DivergenceError as exc:
        log.error("supernet diverged at epoch %s on genome %s", exc.epoch,
                  exc.genome.to_json() if exc.genome else "?")
        raise
    net.save(out / SUPERNET_BIN, out / SUPERNET_JSON)
    with open(out / SUPERNET_LOSS, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "genome_id", "loss"])
        for epoch, gid, loss in rows:
            w.writerow([epoch, gid, repr(loss)])
    log.info("supernet trained for %d epochs; final loss %.4f", len(rows), rows[-1][2])
    return net


def _load_supernet(out: Path) -> Supernet:
    if not (out / SUPERNET_BIN).exists() or not (out / SUPERNET_JSON).exists():
        raise ConfigError(f"no supernet in {out}; run train-supernet first")
    return Supernet.load(out / SUPERNET_BIN, out / SUPERNET_JSON)


def cmd_search(rc: RunConfig):
    out = rc.ensure_out()
    net = _load_supernet(out)
    graph = rc.dataset()
    proxies = generate_proxy_set(graph, rc.proxy)
    result = evolutionary_search(net, graph, proxies, rc.evo)
    meta = {"variant": "w/o rob" if rc.evo.lam == 0 else "robust", "lambda": rc.evo.lam,
            "evaluations": result.evaluations, "proxy": asdict(rc.proxy),
            "evo": {f.name: getattr(rc.evo, f.name) for f in fields(rc.evo)}}
    write_top_k(result.top_k, out / TOP_K, meta)
    write_trajectory(result.trajectory, out / TRAJECTORY)
    best = result.top_k[0]
    log.info("best genome %s fitness %.4f (acc_val %.4f, R %.3g)", best.genome, best.fitness, best.acc_val, best.R)
    return result


def _genome_arg(rc: RunConfig, genome: str | None) -> Genome:
    if genome is None:
        path = rc.out / TOP_K
        if not path.exists():
            raise ConfigError(f"no --genome given and {path} does not exist")
        return read_top_k(path)[1][0].genome
    text = Path(genome).read_text() if Path(genome).is_file() else genome
    try:
        g = Genome.from_json(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot parse genome: {exc}")
    problems = validate_genome(g, rc.space)
    if problems:
        raise ConfigError("invalid genome: " + "; ".join(problems))
    return g


def cmd_retrain_eval(rc: RunConfig, genome: str | None = None) -> list[dict]:
    """Poisoning evaluation: perturb, retrain on the perturbed graph, test; per rate and seed."""
    out = rc.ensure_out()
    g = _genome_arg(rc, genome)
    graph = rc.dataset()
    r = rc.retrain
    known = np.ones(graph.n, dtype=bool) if r["attacker_knows_all_labels"] else None
    seeds = np.random.SeedSequence(rc.seeds["retrain"]).spawn(r["seeds"])
    rows = []
    for rate in r["grid"]:
        accs = []
        for i, ss in enumerate(seeds):
            attack_ss, train_ss = ss.spawn(2)
            target = graph
            if rate > 0:
                adj = perturb(graph, r["attack"], rate, np.random.default_rng(attack_ss), known)
                target = graph.with_adjacency(adj)
            tc = TrainConfig(epochs=r["epochs"], lr=rc.train.lr, weight_decay=rc.train.weight_decay,
                             dropout=rc.train.dropout, attn_dropout=rc.train.attn_dropout,
                             seed=int(train_ss.generate_state(1)[0]))
            accs.append(retrain_from_scratch(g, target, tc, rc.space).clean_test_acc)
        rows.append({"ptb_rate": rate, "attack": r["attack"], "mean_acc": float(np.mean(accs)),
                     "std_acc": float(np.std(accs)), "n_seeds": len(accs),
                     "accs": " ".join(repr(a) for a in accs)})
        log.info("ptb %.2f: %.4f +- %.4f", rate, rows[-1]["mean_acc"], rows[-1]["std_acc"])
    with open(out / RESULTS, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["genome_id", "ptb_rate", "attack", "mean_acc", "std_acc",
                                           "n_seeds", "accs"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({"genome_id": g.genome_id, **{k: repr(v) if isinstance(v, float) else v
                                                     for k, v in row.items()}})
    return rows


def cmd_report(run_dir) -> Path:
    run_dir = Path(run_dir)
    needed = [run_dir / TOP_K, run_dir / TRAJECTORY, run_dir / RESULTS]
    missing = [p.name for p in needed if not p.exists()]
    if missing:
        raise ConfigError(f"{run_dir} is missing run artifacts: {', '.join(missing)}")
    meta, top = read_top_k(run_dir / TOP_K)
    with open(run_dir / TRAJECTORY) as fh:
        traj = list(csv.DictReader(fh))
    with open(run_dir / RESULTS) as fh:
        results = list(csv.DictReader(fh))
    if not top or not traj or not results:
        raise ConfigError(f"{run_dir} has empty run artifacts")
    with open(run_dir / ACC_VS_PTB, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ptb_rate", "mean_acc", "std_acc"])
        for row in results:
            w.writerow([row["ptb_rate"], row["mean_acc"], row["std_acc"]])
    best = top[0]
    lines = [
        f"# Run summary ({meta.get('variant', '?')}, lambda={meta.get('lambda', '?')})",
        "",
        "## Top-1 genome",
        "",
        f"`{best.genome}`",
        "",
        f"- fitness {best.fitness:.4f}, validation accuracy {best.acc_val:.4f}, R {best.R:.4g}",
        f"- JSON: `{best.genome.to_json()}`",
        "",
        "## Top-k",
        "",
        "| rank | fitness | acc_val | R | genome |",
        "|---|---|---|---|---|",
    ]
    lines += [f"| {i} | {r.fitness:.4f} | {r.acc_val:.4f} | {r.R:.4g} | `{r.genome}` |" for i, r in enumerate(top, 1)]
    lines += ["", "## Search trajectory", "", "| iteration | best fitness | mean fitness |", "|---|---|---|"]
    lines += [f"| {t['iteration']} | {float(t['best_fitness']):.4f} | {float(t['mean_fitness']):.4f} |" for t in traj]
    lines += ["", "## Poisoned retraining", "", "| ptb rate | attack | test accuracy |", "|---|---|---|"]
    lines += [f"| {float(r['ptb_rate']):.2f} | {r['attack']} | {float(r['mean_acc']):.4f} +- {float(r['std_acc']):.4f} |"
              for r in results]
    path = run_dir / SUMMARY
    path.write_text("\n".join(lines) + "\n")
    return path


def cmd_pipeline(rc: RunConfig, genome: str | None = None) -> Path:
    cmd_train_supernet(rc)
    cmd_search(rc)
    cmd_retrain_eval(rc, genome)
    return cmd_report(rc.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustnas", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-supernet", "search", "retrain-eval", "report", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory")
        if name != "report":
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted override, e.g. evo.lam=0 (repeatable)")
        if name in ("retrain-eval", "pipeline"):
            p.add_argument("--genome", help="genome JSON (inline or file); default: top-1 of the search")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.out))
            return 0
        rc = RunConfig(load_config(args.config, args.overrides), args.out)
        if args.command == "gen-data":
            print(cmd_gen_data(rc))
        elif args.command == "train-supernet":
            cmd_train_supernet(rc)
        elif args.command == "search":
            cmd_search(rc)
        elif args.command == "retrain-eval":
            cmd_retrain_eval(rc, args.genome)
        else:
            print(cmd_pipeline(rc, args.genome))
    except (ConfigError, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"robustnas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
