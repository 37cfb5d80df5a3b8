"""Prompts tree: offline distillation of stage prompts into a rooted tree, and
greedy retrieval of one root-to-leaf prompt chain per query.

Growth is breadth-first. Each queued entry holds a parent node, an answer and
the stage that answer belongs to; the stage agent distills candidate prompts
from the answer, keeps its top ``m``, and every kept prompt becomes a child.
For all but the last stage, each child also yields a question for the next
stage whose answer is queued under that child. Prompts kept at the last stage
are attached as leaves so that chains cover every stage.
"""

from __future__ import annotations

import contextvars
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .embedder import Encoder, cosine
from .gateway import BackendHandle
from .graph import AGENT_SYSTEM, QAPair, StageLabel

log = logging.getLogger(__name__)

ROOT_STAGE = StageLabel(order=-1, id="root")
DEFAULT_M = 3


class DistillationEmpty(RuntimeError):
    pass


class TreeEmpty(RuntimeError):
    pass


class AllStagesExcluded(RuntimeError):
    pass


DISTILL_SYSTEM = (
    "You distill reusable guidance from an answer given at the {stage} stage of a business "
    "workflow. Write short prompts that a specialist can act on directly, each naming a decision "
    "and the conditions it has to meet. Reply with a numbered list, one prompt per line."
)

RANK_SYSTEM = (
    "Rank the candidate prompts for the {stage} stage by how useful and actionable they are, best first. "
    "Reply with one line of the form RANKING: i, j, k, ... using the candidate numbers."
)

QUESTION_SYSTEM = "You write one question for the specialist of the next workflow stage. Reply with the question only."

_NUMBERED = re.compile(r"^\s*\d+\s*[.):]\s*(.*?)\s*$")
_RANKING_LINE = re.compile(r"RANKING\s*:(.*)", re.IGNORECASE)


def distill_prompts(answer: str, stage: StageLabel, agent: BackendHandle) -> list[str]:
    if not answer or not answer.strip():
        raise ValueError("answer must be non-empty")
    text = agent.ask(f"Answer to distill:\n{answer}", DISTILL_SYSTEM.format(stage=stage.id))
    candidates = []
    for line in text.splitlines():
        m = _NUMBERED.match(line)
        if m and m.group(1):
            candidates.append(m.group(1))
    if not candidates:
        raise DistillationEmpty(f"no numbered prompts in distillation output for stage {stage.id}")
    return candidates


def parse_ranking(text: str, n: int) -> list[int]:
    """Zero-based indices named in a ranking reply, in order, duplicates removed."""
    m = _RANKING_LINE.search(text)
    body = m.group(1) if m else text
    order: list[int] = []
    for tok in re.findall(r"\d+", body):
        idx = int(tok) - 1
        if 0 <= idx < n and idx not in order:
            order.append(idx)
    return order


def self_evaluate(candidates: Sequence[str], m: int, agent: BackendHandle, stage: StageLabel | None = None) -> list[str]:
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if m < 1:
        raise ValueError("m must be positive")
    keep = min(m, len(candidates))
    if len(candidates) == 1:
        return list(candidates)
    listing = "\n".join(f"{i}. {c}" for i, c in enumerate(candidates, 1))
    stage_id = stage.id if stage else "current"
    try:
        reply = agent.ask(f"Candidates:\n{listing}", RANK_SYSTEM.format(stage=stage_id))
    except Exception as exc:  # ranking is advisory; fall back to input order
        log.warning("self-evaluation failed, keeping input order: %s", exc)
        reply = ""
    order = parse_ranking(reply, len(candidates))
    if not order:
        return list(candidates[:keep])
    order += [i for i in range(len(candidates)) if i not in order]
    return [candidates[i] for i in order[:keep]]


def question_prompt(prompt_text: str, next_stage: StageLabel) -> str:
    return (
        f"Upstream prompt:\n{prompt_text}\n\n"
        f"Next stage: {next_stage.id}\n"
        f"Ask what the {next_stage.id} stage has to do so that this prompt holds."
    )


def generate_next_question(prompt_text: str, next_stage: StageLabel, agent: BackendHandle) -> str:
    if not prompt_text or not prompt_text.strip():
        raise ValueError("prompt_text must be non-empty")
    return agent.ask(question_prompt(prompt_text, next_stage), QUESTION_SYSTEM).strip()


@dataclass
class PromptNode:
    id: int
    stage: StageLabel
    prompt_text: str
    evidence: QAPair
    parent: int | None = None
    children: list[int] = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.parent is None


@dataclass
class PromptsTree:
    root: int
    nodes: dict[int, PromptNode]
    branching_limit: int

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        def down(nid: int) -> int:
            kids = self.nodes[nid].children
            return 1 + max(map(down, kids)) if kids else 0
        return down(self.root)

    def leaves(self) -> list[int]:
        return [n.id for n in self.nodes.values() if not n.children]

    def path_to(self, nid: int) -> list[int]:
        out = []
        cur: int | None = nid
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur].parent
        return out[::-1]

    def save(self, path: str | Path) -> None:
        lines = []
        for node in sorted(self.nodes.values(), key=lambda n: n.id):
            obj = {
                "id": node.id,
                "stage": node.stage.to_json(),
                "prompt": node.prompt_text,
                "parent": node.parent,
                "children": list(node.children),
                "evidence_ref": {
                    "instruction": node.evidence.instruction,
                    "response": node.evidence.response,
                    "stage": node.evidence.stage.to_json(),
                },
            }
            if node.id == self.root:
                obj["branching_limit"] = self.branching_limit
            lines.append(json.dumps(obj, sort_keys=True, ensure_ascii=False))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PromptsTree":
        nodes: dict[int, PromptNode] = {}
        root, m = None, DEFAULT_M
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                ev = obj["evidence_ref"]
                node = PromptNode(
                    id=int(obj["id"]),
                    stage=StageLabel.from_json(obj["stage"]),
                    prompt_text=obj["prompt"],
                    evidence=QAPair(ev["instruction"], ev["response"], StageLabel.from_json(ev["stage"])),
                    parent=obj["parent"],
                    children=[int(c) for c in obj["children"]],
                )
                nodes[node.id] = node
                if node.parent is None:
                    if root is not None:
                        raise ValueError(f"{path}: more than one root")
                    root, m = node.id, int(obj.get("branching_limit", DEFAULT_M))
        if root is None:
            raise ValueError(f"{path}: no root node")
        return cls(root, nodes, m)


def build_tree(
    seed: QAPair,
    stages: Sequence[StageLabel],
    agents: Mapping[str, BackendHandle],
    m: int = DEFAULT_M,
    workers: int = 1,
) -> PromptsTree:
    """Grow a prompts tree from ``seed``; ``agents`` is keyed by stage id."""
    stages = sorted(stages)
    if not stages:
        raise ValueError("stages must be non-empty")
    if m < 1:
        raise ValueError("m must be positive")
    missing = [s.id for s in stages if s.id not in agents]
    if missing:
        raise ValueError(f"no agent for stage(s): {', '.join(missing)}")

    def expand(entry):
        _, qa, k = entry
        stage, agent = stages[k], agents[stages[k].id]
        best = self_evaluate(distill_prompts(qa.response, stage, agent), m, agent, stage)
        if k == len(stages) - 1:
            return [(p, None) for p in best]
        nxt = stages[k + 1]
        out = []
        for p in best:
            try:
                question = generate_next_question(p, nxt, agent)
                answer = agents[nxt.id].ask(question, AGENT_SYSTEM.format(stage=nxt.id))
                out.append((p, QAPair(question, answer, nxt)))
            except Exception as exc:
                log.warning("pruning branch %r at stage %s: %s", p[:40], nxt.id, exc)
        return out

    def safe_expand(entry):
        try:
            return expand(entry)
        except Exception as exc:
            log.warning("pruning below node %d: %s", entry[0], exc)
            return []

    root = PromptNode(0, ROOT_STAGE, seed.instruction, seed)
    nodes = {0: root}
    level = [(0, seed, 0)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while level:
            futures = [pool.submit(contextvars.copy_context().run, safe_expand, e) for e in level]
            expansions = [f.result() for f in futures]
            next_level = []
            for (parent_id, qa, k), result in zip(level, expansions):
                for prompt, next_qa in result:
                    child = PromptNode(len(nodes), stages[k], prompt, qa, parent=parent_id)
                    nodes[child.id] = child
                    nodes[parent_id].children.append(child.id)
                    if next_qa is not None:
                        next_level.append((child.id, next_qa, k + 1))
            level = next_level
    if not root.children:
        raise TreeEmpty("prompts tree has no node below the root")
    return PromptsTree(0, nodes, m)


@dataclass(frozen=True)
class PromptChain:
    node_ids: tuple[int, ...]
    texts: tuple[str, ...]
    stages: tuple[StageLabel, ...]
    visited: int = 0

    def body(self) -> list[tuple[StageLabel, str]]:
        """Stage-tagged prompts below the root."""
        return [(s, t) for s, t in zip(self.stages, self.texts) if s != ROOT_STAGE]


def retrieve_prompt_chain(
    tree: PromptsTree,
    query: str,
    encoder: Encoder,
    exclude_stages: Iterable[StageLabel | str] = (),
) -> PromptChain:
    """Greedy descent: at each node take the child closest to the query."""
    if not tree.nodes[tree.root].children:
        raise TreeEmpty("prompts tree has no node below the root")
    excluded = {s.id if isinstance(s, StageLabel) else s for s in exclude_stages}
    qvec = encoder.encode(query)
    current = tree.nodes[tree.root]
    chain = [current]
    visited = 1
    while current.children:
        best, best_score = None, float("-inf")
        for cid in current.children:
            child = tree.nodes[cid]
            visited += 1
            score = cosine(qvec, encoder.encode(child.prompt_text))
            if score > best_score:
                best, best_score = child, score
        current = best
        chain.append(current)
    kept = [n for n in chain if n.is_root or n.stage.id not in excluded]
    if len(kept) == 1:
        raise AllStagesExcluded("every stage on the chain was excluded")
    return PromptChain(
        node_ids=tuple(n.id for n in kept),
        texts=tuple(n.prompt_text for n in kept),
        stages=tuple(n.stage for n in kept),
        visited=visited,
    )
