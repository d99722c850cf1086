"""Command line: ``graphkv run``, ``graphkv compare`` and ``graphkv make-data``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from graphkv.clustering import LINKAGES, ClusterConfig
from graphkv.datasets import Dataset, collapse_batch, scene_graph_batch
from graphkv.errors import GraphKVError
from graphkv.lm_core import LmConfig
from graphkv.pipeline import BatchReport, EncoderConfig, RunConfig, compare_reports, execute
from graphkv.retrieval import RetrievalConfig


def _config_from_file(path: str | None) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise GraphKVError(f"{path}: config must be a JSON object")
    return data


def _section(file_cfg: dict, key: str, overrides: dict) -> dict:
    merged = dict(file_cfg.get(key, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge the optional JSON config file with command line flags (flags win)."""
    f = _config_from_file(args.config)
    retrieval = _section(f, "retrieval", {"strategy": args.retrieval, "k": args.k, "edge_cost": args.edge_cost})
    cluster = _section(f, "cluster", {"linkage": args.linkage, "clusters": args.clusters})
    lm = _section(f, "lm", {"max_seq": args.max_seq, "seed": args.seed})
    encoder = _section(f, "encoder", {"seed": args.seed})
    top = {k: v for k, v in f.items() if k not in ("retrieval", "cluster", "lm", "encoder")}
    for key in ("mode", "max_new", "batch_size", "dump_retrieval", "seed"):
        value = getattr(args, key)
        if value is not None:
            top[key] = value
    if args.parallel_queries:
        top["parallel_queries"] = args.parallel_queries
    if args.graph_nodes:
        top["dataset_paths"] = {"nodes": args.graph_nodes, "edges": args.graph_edges, "queries": args.queries}
    return RunConfig(
        retrieval=RetrievalConfig(**retrieval),
        cluster=ClusterConfig(**cluster),
        lm=LmConfig(**lm),
        encoder=EncoderConfig(**encoder),
        **top,
    )


def _dataset(config: RunConfig, builtin: str | None) -> Dataset:
    p = config.dataset_paths
    if p:
        missing = [k for k in ("nodes", "edges", "queries") if not p.get(k)]
        if missing:
            raise GraphKVError(f"missing dataset file(s): {', '.join(missing)}")
        return Dataset.from_files(p["nodes"], p["edges"], p["queries"])
    if builtin == "collapse":
        return collapse_batch(seed=config.seed)
    return scene_graph_batch(100, seed=config.seed)


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    dataset = _dataset(config, args.builtin)
    result = execute(config, dataset)
    report = result.report
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    if args.ledger:
        ledger = result.ledger.to_json() if result.ledger is not None else {"clusters": []}
        Path(args.ledger).write_text(json.dumps(ledger, indent=2) + "\n")
    if args.merge_trace:
        trace = result.assignment.trace_json() if result.assignment is not None else []
        Path(args.merge_trace).write_text(json.dumps(trace, indent=2) + "\n")
    print(
        f"{report.mode}: {report.num_queries} queries, {report.num_clusters} clusters, "
        f"ACC {report.acc_pct:.1f}%, mean TTFT {report.mean_ttft_ms:.2f} ms "
        f"(proxy {report.mean_ttft_proxy:.3g})",
        file=sys.stderr,
    )
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    base = BatchReport.from_json(Path(args.base).read_text())
    treat = BatchReport.from_json(Path(args.treat).read_text())
    print(json.dumps(compare_reports(base, treat), indent=2))
    return 0


def cmd_make_data(args: argparse.Namespace) -> int:
    if args.kind == "collapse":
        ds = collapse_batch(args.m, groups=args.groups, seed=args.seed)
    else:
        ds = scene_graph_batch(args.m, seed=args.seed)
    for p in ds.write(args.out, args.kind):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphkv", description="Batched graph RAG with cluster-shared KV caches.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one batch and write a report")
    run.add_argument("--mode", choices=("baseline", "subgcache"))
    run.add_argument("--config", help="JSON run config; flags override it")
    run.add_argument("--graph-nodes")
    run.add_argument("--graph-edges")
    run.add_argument("--queries")
    run.add_argument("--builtin", choices=("scene-graph", "collapse"), help="bundled dataset when no files are given")
    run.add_argument("--clusters", type=int)
    run.add_argument("--linkage", choices=LINKAGES)
    run.add_argument("--retrieval", choices=("g-retriever", "grag", "node-edge-topk", "ego-topk"))
    run.add_argument("--k", type=int)
    run.add_argument("--edge-cost", type=float)
    run.add_argument("--max-seq", type=int)
    run.add_argument("--max-new", type=int)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--report")
    run.add_argument("--ledger")
    run.add_argument("--merge-trace")
    run.add_argument("--parallel-queries", type=int, nargs="?", const=4, default=0)
    run.add_argument("--dump-retrieval")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="ACC delta and latency ratios of two reports")
    cmp.add_argument("--base", required=True)
    cmp.add_argument("--treat", required=True)
    cmp.set_defaults(func=cmd_compare)

    mk = sub.add_parser("make-data", help="write a bundled or synthetic dataset as CSV/JSONL")
    mk.add_argument("kind", choices=("scene-graph", "collapse"))
    mk.add_argument("--out", default=".")
    mk.add_argument("-m", type=int, default=100)
    mk.add_argument("--groups", type=int, default=2)
    mk.add_argument("--seed", type=int, default=0)
    mk.set_defaults(func=cmd_make_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (GraphKVError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"graphkv: error: {exc}", file=sys.stderr)
        return 2
