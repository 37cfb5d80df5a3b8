"""Online retrieval over the knowledge graph: seeds, one-hop evidence, and
cross-stage paths through bridge entities."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

from .embedder import Encoder, cosine
from .gateway import BackendError, BackendHandle
from .graph import KnowledgeGraph, KnowledgeNode, StageLabel, Triple, canonicalize, keyword_search

DEFAULT_DELTA = 0.35
DEFAULT_TOP_N = 5
DEFAULT_MAX_DEPTH = 3
DEFAULT_PATH_LIMIT = 20

_WORD = re.compile(r"[^\W_]+")


class EmptyQuery(ValueError):
    pass


class SeedNotInGraph(KeyError):
    pass


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files("collabchain").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def _heuristic_keywords(query: str) -> set[str]:
    stop = stopwords()
    return {t for t in _WORD.findall(query.lower()) if len(t) >= 3 and t not in stop}


KEYWORD_SYSTEM = (
    "Extract the key domain terms from the user's request. "
    "Reply with one term per line and nothing else."
)


def extract_keywords(query: str, mode: str = "heuristic", backend: BackendHandle | None = None) -> set[str]:
    if not query or not query.strip():
        raise EmptyQuery("query must be non-empty")
    if mode == "heuristic":
        return _heuristic_keywords(query)
    if mode != "llm":
        raise ValueError(f"unknown keyword mode {mode!r}")
    if backend is None:
        return _heuristic_keywords(query)
    try:
        text = backend.ask(query, KEYWORD_SYSTEM)
    except BackendError:
        return _heuristic_keywords(query)
    terms = {canonicalize(t.strip(" -*•\t0123456789.)")) for t in re.split(r"[\n,;]", text)}
    terms = {t for t in terms if len(t) >= 3 and t not in stopwords()}
    return terms or _heuristic_keywords(query)


@dataclass(frozen=True)
class ScoredNode:
    node: KnowledgeNode
    score: float


@dataclass
class RetrievalTrace:
    keywords: list[str] = field(default_factory=list)
    keyword_hits: int = 0
    full_scan: bool = False
    # set when the keyword stage was insufficient or nothing passed the threshold
    fallback: bool = False
    seeds: list[tuple[str, float]] = field(default_factory=list)
    path_counts: dict[str, int] = field(default_factory=dict)
    one_hop_count: int = 0
    chain_node_ids: list[int] = field(default_factory=list)
    chain_visited: int = 0
    skipped_stages: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    token_estimate: int = 0
    truncated_lines: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "keywords": sorted(self.keywords),
            "keyword_hits": self.keyword_hits,
            "full_scan": self.full_scan,
            "fallback": self.fallback,
            "seeds": [{"name": n, "score": round(s, 6)} for n, s in self.seeds],
            "path_counts": dict(sorted(self.path_counts.items())),
            "one_hop_count": self.one_hop_count,
            "chain_node_ids": list(self.chain_node_ids),
            "chain_visited": self.chain_visited,
            "skipped_stages": list(self.skipped_stages),
            "warnings": list(self.warnings),
            "token_estimate": self.token_estimate,
            "truncated_lines": dict(self.truncated_lines),
        }


def rank_scored(scored: Iterable[ScoredNode], delta: float, top_n: int) -> list[ScoredNode]:
    kept = [s for s in scored if s.score >= delta]
    kept.sort(key=lambda s: (-s.score, s.node.canonical_name))
    return kept[:top_n]


def select_seeds(
    graph: KnowledgeGraph,
    query: str,
    keywords: Iterable[str],
    encoder: Encoder,
    delta: float = DEFAULT_DELTA,
    top_n: int = DEFAULT_TOP_N,
    trace: RetrievalTrace | None = None,
) -> list[ScoredNode]:
    """Keyword retrieval, then cosine ranking against the whole query.

    Too few keyword hits widens the candidate set to every node.
    """
    if not -1.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [-1, 1]")
    if top_n < 1:
        raise ValueError("top_n must be positive")
    trace = trace if trace is not None else RetrievalTrace()
    keywords = sorted(set(keywords))
    trace.keywords = keywords
    candidates = keyword_search(graph, keywords)
    trace.keyword_hits = len(candidates)
    if len(candidates) < top_n:
        trace.full_scan = True
        candidates = [graph.nodes[n] for n in sorted(graph.nodes)]
    seeds: list[ScoredNode] = []
    if candidates:
        qvec = encoder.encode(query)
        scored = [ScoredNode(n, cosine(qvec, encoder.encode(n.display_name))) for n in candidates]
        seeds = rank_scored(scored, delta, top_n)
    trace.fallback = trace.full_scan or not seeds
    trace.seeds = [(s.node.canonical_name, s.score) for s in seeds]
    return seeds


@dataclass(frozen=True)
class CausalPath:
    nodes: tuple[KnowledgeNode, ...]
    relations: tuple[str, ...]
    # False where the hop walks an edge against its extracted direction
    forward: tuple[bool, ...]
    stages_crossed: tuple[StageLabel, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.canonical_name for n in self.nodes)

    def __len__(self) -> int:
        return len(self.relations)


def _stages_crossed(nodes: Sequence[KnowledgeNode]) -> tuple[StageLabel, ...]:
    seen: list[StageLabel] = []
    for node in nodes:
        seen.extend(s for s in node.sorted_labels() if s not in seen)
    return tuple(seen)


def is_cross_stage(nodes: Sequence[KnowledgeNode]) -> bool:
    """A bridge among the interior nodes and an end stage the seed lacks."""
    if len(nodes) < 3:
        return False
    if not any(n.is_bridge for n in nodes[1:-1]):
        return False
    return bool(nodes[-1].stage_labels - nodes[0].stage_labels)


def _seed_name(graph: KnowledgeGraph, seed: KnowledgeNode | str) -> str:
    name = seed if isinstance(seed, str) else seed.canonical_name
    if name not in graph.nodes:
        raise SeedNotInGraph(name)
    return name


def find_cross_stage_paths(
    graph: KnowledgeGraph,
    seed: KnowledgeNode | str,
    min_depth: int = 2,
    max_depth: int = DEFAULT_MAX_DEPTH,
    limit: int | None = DEFAULT_PATH_LIMIT,
    adjacency: dict | None = None,
) -> list[CausalPath]:
    """Simple undirected paths from ``seed`` that cross stages via a bridge.

    Ordered by (edge count, node names); at most ``limit`` paths are kept.
    """
    start = _seed_name(graph, seed)
    if not 2 <= min_depth <= max_depth:
        raise ValueError("need 2 <= min_depth <= max_depth")
    adj = adjacency if adjacency is not None else graph.adjacency()
    found: list[list[str]] = []
    path = [start]
    on_path = {start}

    def walk():
        depth = len(path) - 1
        if depth >= min_depth and is_cross_stage([graph.nodes[n] for n in path]):
            found.append(list(path))
        if depth == max_depth:
            return
        for nxt in sorted(adj[path[-1]]):
            if nxt in on_path:
                continue
            path.append(nxt)
            on_path.add(nxt)
            walk()
            path.pop()
            on_path.discard(nxt)

    walk()
    found.sort(key=lambda p: (len(p), p))
    if limit is not None:
        found = found[:limit]
    return [_make_path(graph, adj, names) for names in found]


def _make_path(graph: KnowledgeGraph, adj, names: list[str]) -> CausalPath:
    relations, forward = [], []
    for u, v in zip(names, names[1:]):
        # prefer an edge in reading direction, then the smallest relation text
        rel, fwd = min(adj[u][v], key=lambda rf: (not rf[1], rf[0]))
        relations.append(rel)
        forward.append(fwd)
    nodes = tuple(graph.nodes[n] for n in names)
    return CausalPath(nodes, tuple(relations), tuple(forward), _stages_crossed(nodes))


def expand_one_hop(graph: KnowledgeGraph, seed: KnowledgeNode | str) -> list[Triple]:
    name = _seed_name(graph, seed)
    return [
        Triple(graph.nodes[h].display_name, r, graph.nodes[t].display_name, p)
        for h, r, t, p in graph.incident(name)
    ]


def verbalize_paths(paths: Sequence[CausalPath]) -> str:
    lines = []
    for p in paths:
        parts = [p.nodes[0].display_name]
        for rel, fwd, node in zip(p.relations, p.forward, p.nodes[1:]):
            arrow = f" -[{rel}]-> " if fwd else f" <-[{rel}]- "
            parts.append(arrow + node.display_name)
        stages = " → ".join(s.id for s in p.stages_crossed)
        lines.append("".join(parts) + f" (stages: {stages})")
    return "\n".join(lines)


def verbalize_triples(triples: Sequence[Triple]) -> str:
    return "\n".join(f"({t.head} | {t.relation} | {t.tail})" for t in triples)


ONE_HOP_HEADER = "One-hop evidence:"


def verbalize(paths: Sequence[CausalPath], triples: Sequence[Triple] = ()) -> str:
    blocks = []
    if paths:
        blocks.append(verbalize_paths(paths))
    if triples:
        blocks.append(ONE_HOP_HEADER + "\n" + verbalize_triples(triples))
    return "\n\n".join(blocks)


def dedupe_paths(paths: Iterable[CausalPath]) -> list[CausalPath]:
    unique = {}
    for p in paths:
        unique.setdefault(p.names, p)
    return sorted(unique.values(), key=lambda p: (len(p), p.names))


def dedupe_triples(triples: Iterable[Triple]) -> list[Triple]:
    return sorted(set(triples), key=lambda t: (canonicalize(t.head), t.relation, canonicalize(t.tail), t.provenance.value))
