"""Command line pipeline: prepare -> embed -> train -> eval -> infer-tree, plus synth.

Every command that writes artifacts writes them into one ``--out`` directory
together with a ``manifest.json`` recorded before any computation starts.
Exit codes: 0 success, 1 data or contract error, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (CascadeCorpus, Vocab, corpus_instances, load_cascades, load_graph,
                   save_cascades, save_graph, split_corpus)
from .exceptions import ConfigError, TanDrudError
from .graphembed import Node2Vec, load_embeddings, save_embeddings
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .trainer import (TOP_K, TrainConfig, evaluate, evaluate_scores, frequency_scores,
                      infer_tree, parent_accuracy, predecessor_parents, random_graph,
                      synth_generate, train)

logger = logging.getLogger("tandrud")

MANIFEST = "manifest.json"


class CliError(Exception):
    pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such file or directory: {p}")
    return p


def _dumps(record) -> str:
    return json.dumps(record, sort_keys=False, separators=(", ", ": "))


def write_manifest(out: Path, args, inputs, outputs) -> None:
    out.mkdir(parents=True, exist_ok=True)
    existing = [p.name for p in out.glob("*manifest*.json") if p.name != MANIFEST]
    if existing:
        raise CliError(f"{out} already holds another manifest: {existing}")
    flags = {k: (str(v) if isinstance(v, Path) else v)
             for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "flags": flags,
        "inputs": {str(p): _digest(p) for p in inputs},
        "seed": getattr(args, "seed", None),
        "outputs": [str(out / o) for o in outputs],
        "version": __version__,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


class Prepared:
    """A directory written by ``prepare``: normalized corpus plus split ids."""

    def __init__(self, root):
        self.root = _require(root)
        self.corpus = load_cascades(_require(self.root / "corpus.txt"))
        vocab = Vocab.load(_require(self.root / "vocab.txt"))
        if vocab != self.corpus.vocab:
            raise ConfigError(f"{self.root}: vocab.txt does not match corpus.txt")
        self.meta = json.loads(_require(self.root / "splits.json").read_text())
        self.corpus.t_max = self.meta["t_max"]
        index = {c.id: k for k, c in enumerate(self.corpus.cascades)}
        self.splits = {name: self.corpus.subset([index[cid] for cid in self.meta[name]])
                       for name in ("train", "valid", "test")}

    @property
    def inputs(self):
        return [self.root / n for n in ("corpus.txt", "vocab.txt", "splits.json")]


def cmd_prepare(args) -> int:
    src = _require(args.cascades)
    out = Path(args.out)
    write_manifest(out, args, [src], ["corpus.txt", "vocab.txt", "splits.json"])
    corpus = load_cascades(src)
    train_c, valid_c, test_c = split_corpus(corpus, seed=args.seed)
    save_cascades(corpus, out / "corpus.txt")
    corpus.vocab.save(out / "vocab.txt")
    meta = {
        "n_users": corpus.n_users, "n_cascades": corpus.n_cascades, "t_max": corpus.t_max,
        "dropped": corpus.dropped, "seed": args.seed,
        "train": [c.id for c in train_c], "valid": [c.id for c in valid_c],
        "test": [c.id for c in test_c], "manifest": MANIFEST,
    }
    (out / "splits.json").write_text(json.dumps(meta) + "\n")
    print(f"{corpus.n_cascades} cascades, {corpus.n_users} users, "
          f"split {len(train_c)}/{len(valid_c)}/{len(test_c)}, dropped {corpus.dropped}")
    return 0


def _node2vec(args) -> Node2Vec:
    return Node2Vec(dimensions=args.dg, p=args.p, q=args.q, walk_length=args.walk_length,
                    walks_per_node=args.walks_per_node, window=args.window,
                    negatives=args.negatives, epochs=args.sgns_epochs, seed=args.seed)


def cmd_embed(args) -> int:
    data = Prepared(args.data)
    graph_path = _require(args.graph)
    out = Path(args.out)
    write_manifest(out, args, data.inputs + [graph_path], ["embeddings.txt"])
    graph = load_graph(graph_path, data.corpus.vocab, directed=args.directed_walks)
    est = _node2vec(args).fit(graph)
    save_embeddings(est.embedding_, data.corpus.vocab, out / "embeddings.txt")
    print(f"embedded {graph.n_nodes} nodes ({graph.n_edges} edges, {graph.dropped_edges} dropped, "
          f"{int(est.embedding_.isolated.sum())} isolated) into {args.dg} dims")
    return 0


def _model_config(args) -> ModelConfig:
    return ModelConfig(use_topology=not args.no_topology, dropout_keep=args.dropout_keep,
                       l2_lambda=args.l2, max_len=args.max_len,
                       raw_logit_adjust=args.raw_logit_adjust)


def cmd_train(args) -> int:
    data = Prepared(args.data)
    out = Path(args.out)
    inputs = list(data.inputs)
    if not args.no_topology:
        if args.embeddings is None and args.graph is None:
            raise CliError("topology-aware training needs --embeddings or --graph "
                           "(use --no-topology for corpora without a social graph)")
        inputs.append(_require(args.embeddings or args.graph))
    ckpts = ["checkpoint.npz"] if args.runs == 1 else [f"checkpoint_run{r}.npz" for r in range(args.runs)]
    write_manifest(out, args, inputs, ckpts + ["epoch_log.jsonl", "timing.jsonl", "metrics.jsonl"])

    topo = None
    d_g = args.dg
    if not args.no_topology:
        if args.embeddings is not None:
            topo = load_embeddings(args.embeddings, data.corpus.vocab).rows
        else:
            graph = load_graph(args.graph, data.corpus.vocab, directed=args.directed_walks)
            topo = _node2vec(args).fit(graph).embedding_.rows
        d_g = topo.shape[1]

    model_cfg = _model_config(args)
    tr, va, te = data.splits["train"], data.splits["valid"], data.splits["test"]
    test_instances = corpus_instances(te, model_cfg.max_len)
    records = []
    with open(out / "epoch_log.jsonl", "w") as log, open(out / "timing.jsonl", "w") as timing, \
            open(out / "metrics.jsonl", "w") as metrics_fh:
        for run in range(args.runs):
            seed = args.seed + run
            params = init_params(data.corpus.n_users, args.d, d_g, args.T, seed)
            train_cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, patience=args.patience,
                                    batch_size=args.batch_size, seed=seed)

            def on_epoch(rec, run=run):
                log.write(_dumps({"run": run, **rec, "manifest": MANIFEST}) + "\n")
                log.flush()

            result = train(tr, va, params, model_cfg, train_cfg, topo=topo, on_epoch=on_epoch)
            for epoch, seconds in enumerate(result.timings, 1):
                timing.write(_dumps({"run": run, "epoch": epoch, "seconds": seconds}) + "\n")
            save_checkpoint(out / ckpts[run], result.params, model_cfg,
                            vocab_digest=data.corpus.vocab.digest(), t_max=data.corpus.t_max,
                            topo=topo, extra={"manifest": MANIFEST, "best_epoch": result.best_epoch,
                                              "stop_reason": result.stop_reason})
            m = evaluate(test_instances, result.params, model_cfg, data.corpus.t_max, topo,
                         mask_observed=args.mask_observed)
            rec = {**m.record("test"), "run": run, "best_epoch": result.best_epoch,
                   "manifest": MANIFEST}
            records.append(rec)
            metrics_fh.write(_dumps(rec) + "\n")
            print(_dumps(rec))
            if result.stop_reason == "non_finite":
                print(f"training diverged in run {run}; kept best checkpoint", file=sys.stderr)
                return 1
        if args.runs > 1:
            summary = {"split": "test", "runs": args.runs, "mask_mode": records[0]["mask_mode"]}
            for key in ["RR"] + [f"P@{k}" for k in TOP_K]:
                vals = np.array([r[key] for r in records])
                summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
            summary["manifest"] = MANIFEST
            metrics_fh.write(_dumps(summary) + "\n")
            print(_dumps(summary))
    return 0


class _Raw:
    """A bare cascade file standing in for a prepared directory (no split)."""

    def __init__(self, path, split):
        self.path = _require(path)
        self.corpus = load_cascades(self.path)
        self.splits = {split: self.corpus}
        self.inputs = [self.path]


def _eval_data(args):
    if (args.data is None) == (args.cascades is None):
        raise CliError("give exactly one of --data or --cascades")
    return Prepared(args.data) if args.data else _Raw(args.cascades, args.split)


def _load_model(args, data):
    params, cfg, meta, topo = load_checkpoint(_require(args.checkpoint), data.corpus.vocab.digest())
    return params, cfg, meta, topo


def cmd_eval(args) -> int:
    data = _eval_data(args)
    if args.out:
        write_manifest(Path(args.out), args, data.inputs + [_require(args.checkpoint)],
                       ["metrics.jsonl"])
    params, cfg, meta, topo = _load_model(args, data)
    instances = corpus_instances(data.splits[args.split], cfg.max_len)
    m = evaluate(instances, params, cfg, meta["t_max"], topo, mask_observed=args.mask_observed)
    rec = m.record(args.split)
    line = _dumps(rec)
    print(line)
    print(m.table())
    if args.baseline:
        if "train" not in data.splits:
            raise CliError("--baseline needs a prepared --data directory")
        base = evaluate_scores(instances, frequency_scores(data.splits["train"]),
                               mask_observed=args.mask_observed)
        print(_dumps({**base.record(args.split), "model": "frequency"}))
    if args.out:
        with open(Path(args.out) / "metrics.jsonl", "w") as fh:
            fh.write(_dumps({**rec, "manifest": MANIFEST}) + "\n")
    return 0


def read_planted(path, corpus: CascadeCorpus):
    planted = {}
    lengths = {c.id: len(c) for c in corpus}
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3 or parts[0].startswith("#") or parts[0] not in lengths:
                continue
            arr = planted.setdefault(parts[0], np.full(lengths[parts[0]], -1, dtype=np.int64))
            child, parent = int(parts[1]), int(parts[2])
            if child < len(arr):
                arr[child] = parent
    return planted


def cmd_infer_tree(args) -> int:
    data = _eval_data(args)
    out = Path(args.out)
    inputs = data.inputs + [_require(args.checkpoint)]
    if args.planted:
        inputs.append(_require(args.planted))
    write_manifest(out, args, inputs, ["trees/"])
    params, cfg, meta, topo = _load_model(args, data)
    cascades = data.splits[args.split].cascades
    if args.cascade:
        wanted = set(args.cascade)
        cascades = [c for c in cascades if c.id in wanted]
    tree_dir = out / "trees"
    tree_dir.mkdir(exist_ok=True)
    inferred = {}
    for c in cascades:
        tree = infer_tree(c, params, cfg, meta["t_max"], topo)
        inferred[c.id] = tree.parents
        (tree_dir / f"{c.id}.tsv").write_text("".join(l + "\n" for l in tree.position_lines()))
        (tree_dir / f"{c.id}.edges").write_text(
            "".join(l + "\n" for l in tree.raw_edge_lines(data.corpus.vocab)))
    print(f"wrote {len(inferred)} tree(s) to {tree_dir}")
    if args.planted:
        planted = read_planted(args.planted, data.corpus)
        acc = parent_accuracy(inferred, planted)
        base = parent_accuracy({cid: predecessor_parents(len(p)) for cid, p in inferred.items()},
                               planted)
        rec = {"split": args.split, "parent_accuracy": acc, "predecessor_accuracy": base,
               "n_cascades": len(inferred), "manifest": MANIFEST}
        print(_dumps(rec))
        (out / "tree_accuracy.json").write_text(_dumps(rec) + "\n")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    write_manifest(out, args, [], ["cascades.txt", "graph.txt", "planted.tsv"])
    graph = random_graph(args.nodes, args.mean_degree, seed=args.seed)
    result = synth_generate(graph, args.activation, args.max_length, args.count, seed=args.seed + 1)
    vocab = result.corpus.vocab
    save_cascades(result.corpus, out / "cascades.txt")
    save_graph(graph, vocab, out / "graph.txt")
    with open(out / "planted.tsv", "w") as fh:
        fh.write("# cascade_id\tchild_position\tparent_position\tchild\tparent\n")
        for c in result.corpus:
            for child, parent in enumerate(result.parents[c.id].tolist()):
                if parent >= 0:
                    fh.write(f"{c.id}\t{child}\t{parent}\t{vocab.raw(int(c.users[child]))}\t"
                             f"{vocab.raw(int(c.users[parent]))}\n")
    lengths = [len(c) for c in result.corpus]
    mean_len = float(np.mean(lengths)) if lengths else 0.0
    print(f"{len(lengths)} cascades (mean length {mean_len:.2f}) on {graph.n_nodes} nodes / "
          f"{graph.n_edges} edges after {result.attempts} seeds")
    return 0


def _add_walk_flags(p):
    p.add_argument("--dg", type=int, default=128, help="topological embedding size")
    p.add_argument("--p", type=float, default=1.0, help="node2vec return parameter")
    p.add_argument("--q", type=float, default=1.0, help="node2vec in-out parameter")
    p.add_argument("--walk-length", type=int, default=80)
    p.add_argument("--walks-per-node", type=int, default=10)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--sgns-epochs", type=int, default=5)
    p.add_argument("--directed-walks", action="store_true",
                   help="walks follow links in their stored direction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tandrud", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate and split a cascade corpus")
    p.add_argument("--cascades", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("embed", help="learn node2vec topological embeddings")
    p.add_argument("--data", required=True, help="directory written by prepare")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_walk_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train the model and evaluate on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="embedding file written by embed")
    p.add_argument("--graph", help="edge file; embeddings are learned on the fly")
    p.add_argument("--no-topology", action="store_true", help="train the topology-free ablation")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--l2", type=float, default=1e-5)
    p.add_argument("--dropout-keep", type=float, default=0.8)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-observed", action="store_true")
    p.add_argument("--raw-logit-adjust", action="store_true")
    _add_walk_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print metrics of a checkpoint on a split")
    p.add_argument("--data", help="directory written by prepare")
    p.add_argument("--cascades", help="bare cascade file, evaluated whole")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--mask-observed", action="store_true")
    p.add_argument("--baseline", action="store_true", help="also report the frequency baseline")
    p.add_argument("--out", help="directory for metrics.jsonl and manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer-tree", help="write inferred diffusion trees")
    p.add_argument("--data", help="directory written by prepare")
    p.add_argument("--cascades", help="bare cascade file, all cascades used")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--cascade", action="append", help="restrict to these cascade ids")
    p.add_argument("--planted", help="planted.tsv from synth, to score parent recovery")
    p.set_defaults(func=cmd_infer_tree)

    p = sub.add_parser("synth", help="generate independent-cascade data with planted trees")
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--mean-degree", type=float, default=4.0)
    p.add_argument("--activation", type=float, default=0.3)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--max-length", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (CliError, TanDrudError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
