"""End-to-end batch runs in baseline or cluster-cached mode, plus reporting.

Latency is reported twice: wall clock (monotonic, machine dependent) and a
cost proxy from :mod:`graphkv.costs` (exact and reproducible). Per query:

* PFTT: prefill of whatever the query itself must compute (full prompt on
  the baseline path, question tokens on top of a cached prefix otherwise)
  through the first generated token.
* TTFT: PFTT plus everything before it that serves this query: retrieval,
  prompt construction, soft-prefix encoding and, on the cached path, an
  equal share of the cluster's prefix prefill.
* RT: TTFT plus the remaining decode steps.

Cluster processing (subgraph encoding, clustering, representative
construction) is reported separately and not folded into per-query numbers.
"""

from __future__ import annotations

import json
import logging
import re
import string
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from graphkv.cache_engine import (
    GenerationSettings,
    QueryOutcome,
    answer_standalone,
    make_job,
    run_batch,
)
from graphkv.clustering import ClusterConfig, agglomerate
from graphkv.costs import cost_model
from graphkv.datasets import Dataset
from graphkv.encoders import GnnEncoder, TextEncoder, encode_subgraph
from graphkv.errors import DomainError, ProvenanceError
from graphkv.graph_store import Subgraph, merge_subgraphs, serialize_subgraph
from graphkv.lm_core import LmConfig, ToyLm
from graphkv.retrieval import RetrievalConfig, retrieve

__all__ = [
    "BatchReport",
    "QueryMetrics",
    "RunConfig",
    "compare_reports",
    "cost_model",
    "run",
    "score_answer",
]

log = logging.getLogger(__name__)

Mode = Literal["baseline", "subgcache"]

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
_SPACE = re.compile(r"\s+")


def _normalize(text: str) -> str:
    return _SPACE.sub(" ", _PUNCT.sub("", text.casefold())).strip()


def score_answer(generated: str, gold: str) -> bool:
    """Case-insensitive containment of the normalized gold answer."""
    g = _normalize(gold)
    return bool(g) and g in _normalize(generated)


@dataclass
class EncoderConfig:
    dim: int = 64
    layers: int = 4
    heads: int = 4
    seed: int = 0
    salt: int = 0


@dataclass
class RunConfig:
    mode: Mode = "subgcache"
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_new: int = 32
    copy_bonus: float = 8.0
    soft_prefix: Optional[bool] = None
    batch_size: Optional[int] = None
    seed: int = 0
    parallel_queries: int = 0
    dataset_paths: dict = field(default_factory=dict)
    dump_retrieval: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("baseline", "subgcache"):
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise DomainError("batch size must be >= 1")

    @property
    def use_soft_prefix(self) -> bool:
        if self.soft_prefix is None:
            return self.retrieval.strategy == "node-edge-topk"
        return self.soft_prefix

    def echo(self) -> dict:
        d = asdict(self)
        d["use_soft_prefix"] = self.use_soft_prefix
        return d


@dataclass
class QueryMetrics:
    query_id: int
    rt_ms: float
    ttft_ms: float
    pftt_ms: float
    rt_proxy: float
    ttft_proxy: float
    pftt_proxy: float
    prefill_proxy: int
    decode_proxy: int
    prep_proxy: float
    prompt_tokens: int
    question_tokens: int
    correct: bool
    fallback: bool
    cluster_id: Optional[int]
    generation: str
    token_ids: list[int]


@dataclass
class ClusterProcessing:
    time_ms: float = 0.0
    encode_ms: float = 0.0
    cluster_ms: float = 0.0
    merge_ms: float = 0.0
    proxy: int = 0
    encode_proxy: int = 0
    cluster_proxy: int = 0
    merge_proxy: int = 0


@dataclass
class BatchReport:
    mode: str
    provenance: dict
    config: dict
    num_queries: int
    num_clusters: int
    acc_pct: float
    mean_rt_ms: float
    mean_ttft_ms: float
    mean_pftt_ms: float
    mean_rt_proxy: float
    mean_ttft_proxy: float
    mean_pftt_proxy: float
    total_prefill_proxy: int
    total_decode_proxy: int
    total_prep_proxy: int
    cluster_processing: ClusterProcessing
    queries: list[QueryMetrics]

    @property
    def total_llm_proxy(self) -> int:
        return self.total_prefill_proxy + self.total_decode_proxy + self.total_prep_proxy

    @property
    def total_proxy(self) -> int:
        return self.total_llm_proxy + self.cluster_processing.proxy

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BatchReport":
        d = dict(d)
        d["cluster_processing"] = ClusterProcessing(**d["cluster_processing"])
        d["queries"] = [QueryMetrics(**q) for q in d["queries"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "BatchReport":
        return cls.from_dict(json.loads(text))

    def check_invariants(self):
        for q in self.queries:
            if not (q.rt_ms >= q.ttft_ms >= q.pftt_ms >= 0):
                raise AssertionError(f"query {q.query_id}: wall-clock ordering violated")
            if not (q.rt_proxy >= q.ttft_proxy >= q.pftt_proxy >= 0):
                raise AssertionError(f"query {q.query_id}: proxy ordering violated")
        if not 0 <= self.acc_pct <= 100:
            raise AssertionError("ACC out of range")


def _metrics(o: QueryOutcome, retrieval_ns: int, prep_ns: float, prep_proxy: float, correct: bool) -> QueryMetrics:
    pftt_ns = o.pftt_ns
    ttft_ns = retrieval_ns + prep_ns + o.shared_prefix_ns + o.prompt_ns + pftt_ns
    rt_ns = ttft_ns + o.decode_ns
    pftt_proxy = float(o.prefill_proxy)
    ttft_proxy = pftt_proxy + o.shared_prefix_proxy + prep_proxy
    return QueryMetrics(
        query_id=o.query_id,
        rt_ms=rt_ns / 1e6,
        ttft_ms=ttft_ns / 1e6,
        pftt_ms=pftt_ns / 1e6,
        rt_proxy=ttft_proxy + o.decode_proxy,
        ttft_proxy=ttft_proxy,
        pftt_proxy=pftt_proxy,
        prefill_proxy=o.prefill_proxy,
        decode_proxy=o.decode_proxy,
        prep_proxy=prep_proxy,
        prompt_tokens=o.prefix_tokens + o.question_tokens,
        question_tokens=o.question_tokens,
        correct=correct,
        fallback=o.fallback,
        cluster_id=o.cluster_id,
        generation=o.generation.text,
        token_ids=list(o.generation.token_ids),
    )


@dataclass
class Engine:
    """Models and encoders built from a RunConfig."""

    config: RunConfig
    text: TextEncoder
    gnn: GnnEncoder
    lm: ToyLm
    settings: GenerationSettings

    @classmethod
    def build(cls, config: RunConfig) -> "Engine":
        e = config.encoder
        lm_cfg = config.lm
        if lm_cfg.soft_dim != e.dim:
            lm_cfg = LmConfig(**{**asdict(lm_cfg), "soft_dim": e.dim})
        return cls(
            config,
            TextEncoder(e.dim, e.seed, e.salt),
            GnnEncoder(e.dim, e.layers, e.heads, e.seed),
            ToyLm(lm_cfg),
            GenerationSettings(max_new=config.max_new, copy_bonus=config.copy_bonus),
        )

    def encode_proxy(self, s: Subgraph) -> int:
        texts = len(s.node_ids) + len(s.edge_ids)
        return self.gnn.op_count(len(s.node_ids), len(s.edge_ids)) + texts * self.text.dim * self.text.dim

    def soft(self, s: Subgraph) -> Optional[np.ndarray]:
        if not self.config.use_soft_prefix or len(s.node_ids) == 0:
            return None
        return encode_subgraph(self.gnn, self.text, s)


def _dump(directory: Optional[str], qid: int, s: Subgraph):
    if directory:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"query_{qid}.csv").write_text(serialize_subgraph(s))


def _run_baseline(engine: Engine, dataset: Dataset, queries, clock):
    cfg = engine.config
    metrics = []
    for q in queries:
        t0 = clock()
        s = retrieve(cfg.retrieval, dataset.graph, q, engine.text)
        t1 = clock()
        _dump(cfg.dump_retrieval, q.query_id, s)
        soft = engine.soft(s)
        prep_proxy = engine.encode_proxy(s) if soft is not None else 0
        t2 = clock()
        o = answer_standalone(engine.lm, q, s, engine.settings, soft, clock=clock)
        metrics.append(_metrics(o, t1 - t0, t2 - t1, prep_proxy, score_answer(o.generation.text, q.answer)))
    return metrics, ClusterProcessing(), None


def _run_cached(engine: Engine, dataset: Dataset, queries, clock):
    cfg = engine.config
    lm = engine.lm
    retrieval_ns: dict[int, int] = {}
    subgraphs: dict[int, Subgraph] = {}
    for q in queries:
        t0 = clock()
        subgraphs[q.query_id] = retrieve(cfg.retrieval, dataset.graph, q, engine.text)
        retrieval_ns[q.query_id] = clock() - t0
        _dump(cfg.dump_retrieval, q.query_id, subgraphs[q.query_id])

    ids = [q.query_id for q in queries]
    cp = ClusterProcessing()
    t0 = clock()
    embs = [encode_subgraph(engine.gnn, engine.text, subgraphs[i]) for i in ids]
    t1 = clock()
    cp.encode_proxy = sum(engine.encode_proxy(subgraphs[i]) for i in ids)
    c = min(cfg.cluster.clusters, len(ids))
    if c != cfg.cluster.clusters:
        log.warning("cluster count %d exceeds batch size %d; using %d", cfg.cluster.clusters, len(ids), c)
    assignment = agglomerate(embs, ClusterConfig(cfg.cluster.linkage, c))
    t2 = clock()
    cp.cluster_proxy = assignment.op_count
    groups = [[ids[i] for i in members] for members in assignment.members()]
    reps = [merge_subgraphs([subgraphs[qid] for qid in g]) for g in groups]
    t3 = clock()
    cp.merge_proxy = sum(len(subgraphs[qid].node_ids) + len(subgraphs[qid].edge_ids) for g in groups for qid in g)
    cp.encode_ms, cp.cluster_ms, cp.merge_ms = (t1 - t0) / 1e6, (t2 - t1) / 1e6, (t3 - t2) / 1e6
    cp.time_ms = (t3 - t0) / 1e6
    cp.proxy = cp.encode_proxy + cp.cluster_proxy + cp.merge_proxy

    jobs = []
    job_prep_ns: dict[int, float] = {}
    job_prep_proxy: dict[int, float] = {}
    for cid, (members, rep) in enumerate(zip(groups, reps)):
        ta = clock()
        soft = engine.soft(rep)
        jobs.append(make_job(lm, cid, members, rep, engine.settings, soft))
        job_prep_ns[cid] = (clock() - ta) / len(members)
        job_prep_proxy[cid] = (engine.encode_proxy(rep) if soft is not None else 0) / len(members)

    by_id = {q.query_id: q for q in queries}

    def standalone(q):
        s = subgraphs[q.query_id]
        return answer_standalone(lm, q, s, engine.settings, engine.soft(s), clock=clock)

    outcomes, ledger = run_batch(
        jobs, lm, by_id, engine.settings, standalone=standalone, parallel=cfg.parallel_queries, clock=clock
    )
    metrics = []
    for q in queries:
        o = outcomes[q.query_id]
        if o.fallback:
            s = subgraphs[q.query_id]
            prep_ns, prep_proxy = 0.0, (engine.encode_proxy(s) if cfg.use_soft_prefix else 0)
        else:
            prep_ns, prep_proxy = job_prep_ns[o.cluster_id], job_prep_proxy[o.cluster_id]
        correct = score_answer(o.generation.text, q.answer)
        metrics.append(_metrics(o, retrieval_ns[q.query_id], prep_ns, prep_proxy, correct))
    totals = {
        "prefix_prefill": sum(e.prefix_proxy for e in ledger.entries),
        "assignment": assignment,
        "ledger": ledger,
    }
    return metrics, cp, totals


@dataclass
class RunResult:
    report: BatchReport
    ledger: Optional[object] = None
    assignment: Optional[object] = None


def execute(config: RunConfig, dataset: Dataset, clock=time.perf_counter_ns) -> RunResult:
    """Run one batch and return the report along with ledger and cluster assignment."""
    engine = Engine.build(config)
    queries = dataset.queries[: config.batch_size] if config.batch_size else list(dataset.queries)
    if not queries:
        raise DomainError("no queries to run")
    if config.mode == "baseline":
        metrics, cp, extra = _run_baseline(engine, dataset, queries, clock)
        prefix_prefill = 0
        num_clusters = len(queries)
    else:
        metrics, cp, extra = _run_cached(engine, dataset, queries, clock)
        prefix_prefill = extra["prefix_prefill"]
        num_clusters = extra["assignment"].num_clusters

    n = len(metrics)
    report = BatchReport(
        mode=config.mode,
        provenance={
            "dataset": dataset.digest,
            "dataset_name": dataset.name,
            "batch_size": n,
            "lm_seed": config.lm.seed,
            "encoder_seed": config.encoder.seed,
            "seed": config.seed,
        },
        config=config.echo(),
        num_queries=n,
        num_clusters=num_clusters,
        acc_pct=100.0 * sum(m.correct for m in metrics) / n,
        mean_rt_ms=float(np.mean([m.rt_ms for m in metrics])),
        mean_ttft_ms=float(np.mean([m.ttft_ms for m in metrics])),
        mean_pftt_ms=float(np.mean([m.pftt_ms for m in metrics])),
        mean_rt_proxy=float(np.mean([m.rt_proxy for m in metrics])),
        mean_ttft_proxy=float(np.mean([m.ttft_proxy for m in metrics])),
        mean_pftt_proxy=float(np.mean([m.pftt_proxy for m in metrics])),
        total_prefill_proxy=prefix_prefill + sum(m.prefill_proxy for m in metrics),
        total_decode_proxy=sum(m.decode_proxy for m in metrics),
        total_prep_proxy=round(sum(m.prep_proxy for m in metrics)),
        cluster_processing=cp,
        queries=metrics,
    )
    report.check_invariants()
    if config.mode == "baseline":
        return RunResult(report)
    return RunResult(report, extra["ledger"], extra["assignment"])


def run(config: RunConfig, dataset: Optional[Dataset] = None) -> BatchReport:
    """Run a batch described by ``config`` (loading files from ``config.dataset_paths``)."""
    if dataset is None:
        p = config.dataset_paths
        try:
            dataset = Dataset.from_files(p["nodes"], p["edges"], p["queries"])
        except KeyError as exc:
            raise DomainError(f"dataset path missing: {exc}") from None
    return execute(config, dataset).report


def _ratio(base: float, treat: float) -> Optional[float]:
    if treat == 0:
        return None if base else 1.0
    return base / treat


def compare_reports(base: BatchReport, treat: BatchReport) -> dict:
    """ACC delta (percentage points) and baseline/treatment latency ratios."""
    for key in ("dataset", "batch_size", "lm_seed"):
        if base.provenance.get(key) != treat.provenance.get(key):
            raise ProvenanceError(
                f"reports differ in {key}: {base.provenance.get(key)!r} vs {treat.provenance.get(key)!r}"
            )
    return {
        "acc_delta_pp": treat.acc_pct - base.acc_pct,
        "wall": {
            "rt": _ratio(base.mean_rt_ms, treat.mean_rt_ms),
            "ttft": _ratio(base.mean_ttft_ms, treat.mean_ttft_ms),
            "pftt": _ratio(base.mean_pftt_ms, treat.mean_pftt_ms),
        },
        "proxy": {
            "rt": _ratio(base.mean_rt_proxy, treat.mean_rt_proxy),
            "ttft": _ratio(base.mean_ttft_proxy, treat.mean_ttft_proxy),
            "pftt": _ratio(base.mean_pftt_proxy, treat.mean_pftt_proxy),
        },
    }
