"""Cluster-wise prefix caching: prefill a representative prompt once, serve every
member question from it, then release it before the next cluster.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from graphkv.encoders import STOPWORDS, feature_tokens
from graphkv.errors import CapacityError, DomainError
from graphkv.graph_store import (
    QueryRecord,
    Subgraph,
    edge_rows,
    node_rows,
    parse_serialized,
    render_blocks,
)
from graphkv.lm_core import (
    EOS,
    VOCAB_SIZE,
    GenerationResult,
    ToyLm,
    extend,
    greedy_decode,
    prefill,
)

QUESTION_BUDGET = 128
DEFAULT_MAX_NEW = 32
DEFAULT_COPY_BONUS = 8.0

Clock = Callable[[], int]


@dataclass(frozen=True)
class PromptTemplate:
    header: str = "Graph:\n"
    question_format: str = "Q: {question}\nA:"

    def prefix(self, block: str) -> str:
        return self.header + block

    def question(self, question: str) -> str:
        return self.question_format.format(question=question)


DEFAULT_TEMPLATE = PromptTemplate()


def build_prompt(template: PromptTemplate, s: Subgraph, question: str) -> tuple[str, str]:
    """(prefix, question part); the prefix depends on the subgraph only."""
    return template.prefix(render_blocks(node_rows(s), edge_rows(s))), template.question(question)


def _prefix_tokens(text: str) -> int:
    return 1 + len(text.encode("utf-8"))


def truncate_to_budget(template: PromptTemplate, s: Subgraph, budget: int) -> tuple[str, bool]:
    """Serialized prefix of at most ``budget`` tokens (BOS included).

    Edge rows are dropped from the end first, then node rows, so the header
    and low-id content stay put. Returns (prefix text, truncated?).
    """
    nodes, edges = node_rows(s), edge_rows(s)
    size = _prefix_tokens(template.prefix(render_blocks(nodes, edges)))
    if size <= budget:
        return template.prefix(render_blocks(nodes, edges)), False
    edge_bytes = [len(r.encode("utf-8")) for r in edges]
    node_bytes = [len(r.encode("utf-8")) for r in nodes]
    while edges and size > budget:
        size -= edge_bytes.pop()
        edges.pop()
    while nodes and size > budget:
        size -= node_bytes.pop()
        nodes.pop()
    if size > budget:
        raise CapacityError(f"prompt headers alone need {size} tokens, budget is {budget}")
    return template.prefix(render_blocks(nodes, edges)), True


def prefix_budget(max_seq: int, max_new: int, soft: bool, question_tokens: int = QUESTION_BUDGET) -> int:
    return max_seq - question_tokens - max_new - int(soft)


# --- lookup-augmented answering -------------------------------------------------

_QUESTION_STOPWORDS = STOPWORDS | {"color", "colour", "name"}
_FIELD_SEP = re.compile(r";\s*")


def _content_words(text: str) -> set[str]:
    return {w for w in feature_tokens(text) if w not in _QUESTION_STOPWORDS}


def _node_name(attr: str) -> str:
    first = _FIELD_SEP.split(attr, maxsplit=1)[0]
    return first.split(":", 1)[1] if first.lower().startswith("name:") else first


def _node_answer(attr: str) -> str:
    fields = _FIELD_SEP.split(attr)
    return "; ".join(fields[1:]) if len(fields) > 1 else attr


def copy_span(prefix_text: str, question: str, template: PromptTemplate = DEFAULT_TEMPLATE) -> Optional[str]:
    """Pick the prompt row most related to the question and return the text to copy.

    Node rows score by question words found in the node's name; their span is
    the attribute fields after the name. Edge rows score by the question words
    covered by both endpoint names together, and each endpoint must cover a
    word the other does not; their span is the relation text. Higher score
    wins; node rows beat edge rows on ties, then earlier rows.
    """
    block = prefix_text[len(template.header):] if prefix_text.startswith(template.header) else prefix_text
    try:
        g = parse_serialized(block)
    except Exception:
        return None
    words = _content_words(question)
    if not words:
        return None
    hits = {n: words & _content_words(_node_name(a)) for n, a in g.nodes.items()}
    best: tuple[tuple, Optional[str]] = ((0,), None)
    for n in sorted(g.nodes):
        key = (len(hits[n]), 1, -n)
        if hits[n] and key > best[0]:
            best = (key, _node_answer(g.nodes[n]))
    for i, e in enumerate(g.edges):
        a, b = hits[e.src], hits[e.dst]
        if a - b and b - a:
            key = (len(a | b), 0, -i)
            if key > best[0]:
                best = (key, e.attr)
    return best[1]


def copy_bias(span_ids: Sequence[int], bonus: float):
    """Logit bias that favors emitting ``span_ids`` in order, then EOS."""
    vectors = []
    for tok in list(span_ids) + [EOS]:
        v = np.zeros(VOCAB_SIZE)
        v[tok] = bonus
        vectors.append(v)

    def bias(step: int, generated: Sequence[int]):
        return vectors[step] if step < len(vectors) else None

    return bias


def answer_bias(lm: ToyLm, prefix_text: str, question: str, bonus: float, template: PromptTemplate = DEFAULT_TEMPLATE):
    if bonus <= 0:
        return None
    span = copy_span(prefix_text, question, template)
    if not span:
        return None
    return copy_bias(lm.tokenizer.encode(span, bos=False), bonus)


# --- per-query and per-cluster processing ---------------------------------------


@dataclass
class QueryOutcome:
    query_id: int
    generation: GenerationResult
    prefix_tokens: int
    question_tokens: int
    # cost proxies: own prefill (full prompt or question extend) and decode
    prefill_proxy: int
    decode_proxy: int
    # shared prefix cost attributed to this query (0 on the standalone path)
    shared_prefix_proxy: float = 0.0
    shared_prefix_ns: float = 0.0
    pftt_ns: int = 0
    decode_ns: int = 0
    prompt_ns: int = 0
    fallback: bool = False
    cluster_id: Optional[int] = None


@dataclass
class GenerationSettings:
    max_new: int = DEFAULT_MAX_NEW
    copy_bonus: float = DEFAULT_COPY_BONUS
    question_budget: int = QUESTION_BUDGET
    template: PromptTemplate = DEFAULT_TEMPLATE


def standalone_prompt(
    lm: ToyLm, s: Subgraph, question: str, settings: GenerationSettings, soft: bool
) -> tuple[str, list[int]]:
    """Prefix text and question tokens for processing one query on its own.

    Questions within the question budget get the standard prefix budget, so
    this prompt equals the cluster prompt of a singleton cluster. Longer
    questions shrink the prefix budget instead (and are cut if even that
    cannot fit).
    """
    cfg = lm.config
    q_ids = lm.tokenizer.encode(settings.template.question(question), bos=False)
    reserve = max(len(q_ids), settings.question_budget)
    min_prefix = _prefix_tokens(settings.template.prefix(render_blocks([], [])))
    room = cfg.max_seq - settings.max_new - int(soft) - min_prefix
    if len(q_ids) > room:
        q_ids = q_ids[:room]
        reserve = room
    prefix_text, _ = truncate_to_budget(settings.template, s, prefix_budget(cfg.max_seq, settings.max_new, soft, reserve))
    return prefix_text, q_ids


def answer_standalone(
    lm: ToyLm,
    query: QueryRecord,
    s: Subgraph,
    settings: GenerationSettings,
    soft_prefix: Optional[np.ndarray] = None,
    clock: Clock = time.perf_counter_ns,
) -> QueryOutcome:
    """No-cache path: one full prefill of prefix + question, then decode."""
    t0 = clock()
    prefix_text, q_ids = standalone_prompt(lm, s, query.question, settings, soft_prefix is not None)
    p_ids = lm.tokenizer.encode(prefix_text)
    bias = answer_bias(lm, prefix_text, query.question, settings.copy_bonus, settings.template)
    t1 = clock()
    cache, _ = prefill(lm, p_ids + q_ids, soft_prefix)
    gen = greedy_decode(lm, cache, settings.max_new, bias, clock=clock)
    t_end = clock()
    first = gen.first_token_ns if gen.token_ids else t_end
    return QueryOutcome(
        query_id=query.query_id,
        generation=gen,
        prefix_tokens=len(p_ids) + (soft_prefix is not None),
        question_tokens=len(q_ids),
        prefill_proxy=cache.prefill_cost,
        decode_proxy=cache.decode_cost,
        pftt_ns=first - t1,
        decode_ns=t_end - first,
        prompt_ns=t1 - t0,
    )


@dataclass
class ClusterJob:
    cluster_id: int
    members: list[int]
    representative: Subgraph
    prefix_text: str
    prefix_ids: list[int]
    soft_prefix: Optional[np.ndarray] = None
    truncated: bool = False

    def __post_init__(self):
        if not self.members:
            raise DomainError(f"cluster {self.cluster_id} has no members")

    @property
    def prefix_tokens(self) -> int:
        return len(self.prefix_ids) + (self.soft_prefix is not None)


def make_job(
    lm: ToyLm,
    cluster_id: int,
    members: Sequence[int],
    representative: Subgraph,
    settings: GenerationSettings,
    soft_prefix: Optional[np.ndarray] = None,
) -> ClusterJob:
    budget = prefix_budget(lm.config.max_seq, settings.max_new, soft_prefix is not None, settings.question_budget)
    text, truncated = truncate_to_budget(settings.template, representative, budget)
    return ClusterJob(cluster_id, list(members), representative, text, lm.tokenizer.encode(text), soft_prefix, truncated)


@dataclass
class LedgerEntry:
    cluster_id: int
    members: list[int]
    seal_ns: int
    release_ns: int
    peak_resident_bytes: int
    hits: int
    fallbacks: list[int]
    prefix_tokens: int
    prefix_proxy: int
    prefix_ns: int
    digest_before: str = ""
    digest_after: str = ""


@dataclass
class CacheLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    def intervals_disjoint(self) -> bool:
        spans = sorted((e.seal_ns, e.release_ns) for e in self.entries)
        return all(r >= s for s, r in spans) and all(spans[i][1] <= spans[i + 1][0] for i in range(len(spans) - 1))

    @property
    def total_hits(self) -> int:
        return sum(e.hits for e in self.entries)

    def to_json(self, origin_ns: int = 0) -> dict:
        return {
            "clusters": [
                {
                    "cluster_id": e.cluster_id,
                    "members": e.members,
                    "seal_ms": (e.seal_ns - origin_ns) / 1e6,
                    "release_ms": (e.release_ns - origin_ns) / 1e6,
                    "peak_resident_bytes": e.peak_resident_bytes,
                    "hits": e.hits,
                    "fallbacks": e.fallbacks,
                    "prefix_tokens": e.prefix_tokens,
                    "prefix_proxy": e.prefix_proxy,
                    "prefix_digest": e.digest_before,
                    "prefix_unchanged": e.digest_before == e.digest_after,
                }
                for e in self.entries
            ]
        }


def process_cluster(
    job: ClusterJob,
    lm: ToyLm,
    queries: Mapping[int, QueryRecord],
    settings: GenerationSettings = GenerationSettings(),
    *,
    standalone: Optional[Callable[[QueryRecord], QueryOutcome]] = None,
    parallel: int = 0,
    verify_prefix: bool = True,
    clock: Clock = time.perf_counter_ns,
) -> tuple[list[QueryOutcome], LedgerEntry]:
    """Prefill the representative prompt once, serve each member, then release.

    Members whose question exceeds the question budget go through
    ``standalone`` instead and are marked as fallbacks.
    """
    cfg = lm.config
    t_start = clock()
    prefix_cache, _ = prefill(lm, job.prefix_ids, job.soft_prefix)
    prefix_cache.seal()
    seal_ns = clock()
    prefix_proxy = prefix_cache.prefill_cost
    digest = prefix_cache.prefix_digest() if verify_prefix else ""

    served: list[tuple[QueryRecord, list[int]]] = []
    fallback_queries: list[QueryRecord] = []
    for qid in job.members:
        q = queries[qid]
        q_ids = lm.tokenizer.encode(settings.template.question(q.question), bos=False)
        fits = len(q_ids) <= settings.question_budget and (
            prefix_cache.token_count + len(q_ids) + settings.max_new <= cfg.max_seq
        )
        if fits:
            served.append((q, q_ids))
        else:
            fallback_queries.append(q)

    def serve(item: tuple[QueryRecord, list[int]]) -> tuple[QueryOutcome, int]:
        q, q_ids = item
        t0 = clock()
        bias = answer_bias(lm, job.prefix_text, q.question, settings.copy_bonus, settings.template)
        t1 = clock()
        fork = prefix_cache.fork()
        extend(lm, fork, q_ids)
        gen = greedy_decode(lm, fork, settings.max_new, bias, clock=clock)
        t_end = clock()
        resident = fork.suffix_nbytes()
        fork.drop_suffix()
        first = gen.first_token_ns if gen.token_ids else t_end
        out = QueryOutcome(
            query_id=q.query_id,
            generation=gen,
            prefix_tokens=job.prefix_tokens,
            question_tokens=len(q_ids),
            prefill_proxy=fork.prefill_cost,
            decode_proxy=fork.decode_cost,
            pftt_ns=first - t1,
            decode_ns=t_end - first,
            prompt_ns=t1 - t0,
            cluster_id=job.cluster_id,
        )
        return out, resident

    if parallel > 1 and len(served) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(serve, served))
    else:
        results = [serve(item) for item in served]

    outcomes = [o for o, _ in results]
    peak_suffix = max((r for _, r in results), default=0)
    prefix_bytes = prefix_cache.prefix_nbytes()
    concurrent = min(max(parallel, 1), max(len(served), 1))
    digest_after = prefix_cache.prefix_digest() if verify_prefix else ""
    prefix_ns = seal_ns - t_start
    for o in outcomes:
        o.shared_prefix_proxy = prefix_proxy / len(outcomes)
        o.shared_prefix_ns = prefix_ns / len(outcomes)
    prefix_cache.release()
    release_ns = clock()

    for q in fallback_queries:
        if standalone is None:
            raise CapacityError(f"query {q.query_id} does not fit next to the cluster prefix")
        o = standalone(q)
        o.fallback = True
        o.cluster_id = job.cluster_id
        outcomes.append(o)

    entry = LedgerEntry(
        cluster_id=job.cluster_id,
        members=list(job.members),
        seal_ns=seal_ns,
        release_ns=release_ns,
        peak_resident_bytes=prefix_bytes + peak_suffix * concurrent,
        hits=len(outcomes) - len(fallback_queries),
        fallbacks=[q.query_id for q in fallback_queries],
        prefix_tokens=job.prefix_tokens,
        prefix_proxy=prefix_proxy,
        prefix_ns=prefix_ns,
        digest_before=digest,
        digest_after=digest_after,
    )
    return outcomes, entry


def run_batch(
    jobs: Sequence[ClusterJob],
    lm: ToyLm,
    queries: Mapping[int, QueryRecord],
    settings: GenerationSettings = GenerationSettings(),
    *,
    standalone: Optional[Callable[[QueryRecord], QueryOutcome]] = None,
    parallel: int = 0,
    clock: Clock = time.perf_counter_ns,
) -> tuple[dict[int, QueryOutcome], CacheLedger]:
    """Process clusters one at a time in ascending cluster id."""
    seen: list[int] = [q for job in jobs for q in job.members]
    if sorted(seen) != sorted(queries):
        raise DomainError("cluster jobs must cover every query exactly once")
    ledger = CacheLedger()
    outcomes: dict[int, QueryOutcome] = {}
    for job in sorted(jobs, key=lambda j: j.cluster_id):
        outs, entry = process_cluster(
            job, lm, queries, settings, standalone=standalone, parallel=parallel, clock=clock
        )
        ledger.entries.append(entry)
        for o in outs:
            outcomes[o.query_id] = o
    return outcomes, ledger
