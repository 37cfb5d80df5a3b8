"""Online pipeline: retrieve, compose one structured prompt, call the backbone once."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .causal import (
    DEFAULT_DELTA,
    DEFAULT_MAX_DEPTH,
    DEFAULT_PATH_LIMIT,
    DEFAULT_TOP_N,
    RetrievalTrace,
    dedupe_paths,
    dedupe_triples,
    expand_one_hop,
    extract_keywords,
    find_cross_stage_paths,
    select_seeds,
    verbalize_paths,
    verbalize_triples,
)
from .embedder import Encoder
from .gateway import BackendHandle, UsageRecord, count_tokens
from .graph import KnowledgeGraph
from .prompts_tree import PromptChain, PromptsTree, retrieve_prompt_chain

log = logging.getLogger(__name__)

NONE_RETRIEVED = "(none retrieved)"
DEFAULT_BUDGET = 1024
TRUNCATION_ORDER = ("knowledge", "causal", "chain")


class BudgetTooSmall(ValueError):
    pass


@lru_cache(maxsize=1)
def template() -> str:
    return resources.files("collabchain").joinpath("templates/composed_prompt.txt").read_text(encoding="utf-8")


def preamble() -> str:
    return template().split("\n\n", 1)[0]


@dataclass(frozen=True)
class ComposedPrompt:
    fixed_preamble: str
    knowledge_block: str
    causal_block: str
    prompt_chain_block: str
    user_need: str
    token_estimate: int
    text: str
    removed_lines: dict = field(default_factory=dict, compare=False)


def render_chain(chain: PromptChain | None) -> str:
    if chain is None:
        return ""
    return "\n".join(f"{i}. [{stage.id}] {text}" for i, (stage, text) in enumerate(chain.body(), 1))


def _render(blocks: dict[str, list[str]], user_need: str) -> str:
    def block(lines):
        return "\n".join(lines) if lines else NONE_RETRIEVED
    return template().format(
        knowledge=block(blocks["knowledge"]),
        causal=block(blocks["causal"]),
        chain=block(blocks["chain"]),
        user_need=user_need,
    )


def compose_prompt(
    user_need: str,
    knowledge: str,
    causal: str,
    chain: PromptChain | str | None,
    budget: int = DEFAULT_BUDGET,
) -> ComposedPrompt:
    """Fill the template; over budget, drop trailing lines knowledge first,
    then causal, then the prompt chain. The user need is never cut."""
    if not user_need or not user_need.strip():
        raise ValueError("user_need must be non-empty")
    user_need = user_need.strip()
    chain_text = chain if isinstance(chain, str) else render_chain(chain)
    blocks = {
        "knowledge": [ln for ln in (knowledge or "").splitlines() if ln.strip()],
        "causal": [ln for ln in (causal or "").splitlines() if ln.strip()],
        "chain": [ln for ln in (chain_text or "").splitlines() if ln.strip()],
    }
    floor = count_tokens(_render({k: [] for k in blocks}, user_need))
    if floor > budget:
        raise BudgetTooSmall(f"budget {budget} is below the {floor} tokens of preamble and user need")
    removed = {k: 0 for k in blocks}
    for key in TRUNCATION_ORDER:
        while blocks[key] and count_tokens(_render(blocks, user_need)) > budget:
            blocks[key].pop()
            removed[key] += 1
    text = _render(blocks, user_need)
    return ComposedPrompt(
        fixed_preamble=preamble(),
        knowledge_block="\n".join(blocks["knowledge"]) or NONE_RETRIEVED,
        causal_block="\n".join(blocks["causal"]) or NONE_RETRIEVED,
        prompt_chain_block="\n".join(blocks["chain"]) or NONE_RETRIEVED,
        user_need=user_need,
        token_estimate=count_tokens(text),
        text=text,
        removed_lines={k: v for k, v in removed.items() if v},
    )


@dataclass
class QueryConfig:
    delta: float = DEFAULT_DELTA
    top_n: int = DEFAULT_TOP_N
    max_depth: int = DEFAULT_MAX_DEPTH
    path_limit: int | None = DEFAULT_PATH_LIMIT
    budget: int = DEFAULT_BUDGET
    keyword_mode: str = "heuristic"
    skip_stages: tuple[str, ...] = ()
    # robustness probe: pretend the keyword stage found nothing
    mask_keywords: bool = False


@dataclass
class QueryBackends:
    backbone: BackendHandle
    encoder: Encoder
    keywords: BackendHandle | None = None


@dataclass
class QueryResult:
    answer: str
    usage: UsageRecord
    trace: RetrievalTrace
    prompt: ComposedPrompt

    def to_json(self) -> dict:
        return {"answer": self.answer, "usage": self.usage.to_dict(), "trace": self.trace.to_dict()}


def retrieve_blocks(query: str, graph: KnowledgeGraph | None, tree: PromptsTree | None,
                    backends: QueryBackends, config: QueryConfig, trace: RetrievalTrace):
    """Knowledge text, causal text and prompt chain for ``query``.

    Failures in any retrieval step leave that block empty and add a warning.
    """
    knowledge = causal = ""
    chain = None
    seeds = []
    if graph is None or not graph.nodes:
        trace.warnings.append("knowledge graph is empty")
    else:
        try:
            keywords = set() if config.mask_keywords else extract_keywords(
                query, config.keyword_mode, backends.keywords)
            seeds = select_seeds(graph, query, keywords, backends.encoder, config.delta, config.top_n, trace)
        except Exception as exc:
            trace.warnings.append(f"seed selection failed: {exc}")
            seeds = []
        if not seeds:
            trace.warnings.append("no seed node passed the similarity threshold")
        try:
            adjacency = graph.adjacency()
            triples, paths = [], []
            for s in seeds:
                triples.extend(expand_one_hop(graph, s.node))
                found = find_cross_stage_paths(graph, s.node, 2, config.max_depth, config.path_limit, adjacency)
                trace.path_counts[s.node.canonical_name] = len(found)
                paths.extend(found)
            triples = dedupe_triples(triples)
            paths = dedupe_paths(paths)
            trace.one_hop_count = len(triples)
            knowledge = verbalize_triples(triples)
            causal = verbalize_paths(paths)
        except Exception as exc:
            trace.warnings.append(f"graph expansion failed: {exc}")
    if tree is None:
        trace.warnings.append("no prompts tree loaded")
    else:
        try:
            chain = retrieve_prompt_chain(tree, query, backends.encoder, config.skip_stages)
            trace.chain_node_ids = list(chain.node_ids)
            trace.chain_visited = chain.visited
        except Exception as exc:
            trace.warnings.append(f"prompt chain retrieval failed: {exc}")
    trace.skipped_stages = sorted(config.skip_stages)
    return knowledge, causal, chain


def answer_query(
    query: str,
    graph: KnowledgeGraph | None,
    tree: PromptsTree | None,
    backends: QueryBackends,
    config: QueryConfig | None = None,
) -> QueryResult:
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    config = config or QueryConfig()
    trace = RetrievalTrace()
    with backends.backbone.gateway.track() as ledger:
        knowledge, causal, chain = retrieve_blocks(query, graph, tree, backends, config, trace)
        prompt = compose_prompt(query, knowledge, causal, chain, config.budget)
        trace.token_estimate = prompt.token_estimate
        trace.truncated_lines = dict(prompt.removed_lines)
        answer = backends.backbone.ask(prompt.text)
    return QueryResult(answer=answer, usage=ledger.usage(), trace=trace, prompt=prompt)
