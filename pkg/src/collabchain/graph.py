"""Stage-labeled collaborative knowledge graph.

Explicit triples come straight from corpus Q&A pairs. Tacit triples come from
counterfactual probing: an instruction is perturbed, the stage agent answers,
an evaluator grades the answer and the loop retries with the evaluator's
feedback appended until the answer is judged reasonable. Both triple sets are
labeled with the stage they were found in and unioned into one graph.

Whatever reasoning drives a counterfactual answer is never observed directly;
the variant that produced the probe is its stand-in, kept in the metadata of
tacit edges.
"""

from __future__ import annotations

import contextvars
import itertools
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from .gateway import BackendError, BackendHandle

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+")
CAUSAL_CUES = ("depends on", "relies on", "applies to")


def canonicalize(text: str) -> str:
    """Case-fold, trim and collapse internal whitespace. No stemming."""
    return " ".join(text.split()).casefold()


def tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.casefold())


@dataclass(frozen=True, order=True)
class StageLabel:
    order: int
    id: str

    def to_json(self) -> dict:
        return {"id": self.id, "order": self.order}

    @classmethod
    def from_json(cls, obj: Mapping) -> "StageLabel":
        return cls(order=int(obj["order"]), id=str(obj["id"]))


def make_stages(ids: Sequence[str]) -> list[StageLabel]:
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate stage ids in {list(ids)}")
    return [StageLabel(order=i, id=s) for i, s in enumerate(ids)]


@dataclass(frozen=True)
class QAPair:
    instruction: str
    response: str
    stage: StageLabel

    def __post_init__(self):
        if not self.instruction.strip() or not self.response.strip():
            raise ValueError("instruction and response must be non-empty")

    def to_json(self) -> dict:
        return {"instruction": self.instruction, "response": self.response, "stage": self.stage.id}


class Provenance(str, Enum):
    EXPLICIT = "explicit"
    TACIT = "tacit"


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str
    provenance: Provenance = Provenance.EXPLICIT

    def __post_init__(self):
        if not canonicalize(self.head) or not self.relation.strip() or not canonicalize(self.tail):
            raise ValueError(f"triple has an empty part: {self!r}")


@dataclass(frozen=True)
class KnowledgeNode:
    canonical_name: str
    stage_labels: frozenset[StageLabel]
    surface_forms: frozenset[str]

    @property
    def display_name(self) -> str:
        return min(self.surface_forms)

    @property
    def is_bridge(self) -> bool:
        return len(self.stage_labels) >= 2

    def sorted_labels(self) -> list[StageLabel]:
        return sorted(self.stage_labels)


EdgeKey = tuple[str, str, str, Provenance]


@dataclass
class KnowledgeGraph:
    nodes: dict[str, KnowledgeNode] = field(default_factory=dict)
    # (head, relation, tail, provenance) -> metadata
    edges: dict[EdgeKey, dict] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def add_node(self, surface: str, labels: Iterable[StageLabel]) -> KnowledgeNode:
        surface = " ".join(surface.split())
        name = canonicalize(surface)
        labels = frozenset(labels)
        old = self.nodes.get(name)
        if old is None:
            node = KnowledgeNode(name, labels, frozenset({surface}))
        else:
            node = KnowledgeNode(name, old.stage_labels | labels, old.surface_forms | {surface})
        self.nodes[name] = node
        return node

    def add_triple(self, triple: Triple, stage: StageLabel, variant: "Variant | None" = None) -> None:
        head = self.add_node(triple.head, [stage])
        tail = self.add_node(triple.tail, [stage])
        key = (head.canonical_name, " ".join(triple.relation.split()), tail.canonical_name,
               Provenance(triple.provenance))
        meta = self.edges.setdefault(key, {})
        if variant is not None:
            meta["variants"] = sorted(set(meta.get("variants", [])) | {Variant(variant).value})

    def incident(self, name: str) -> list[EdgeKey]:
        return sorted((k for k in self.edges if k[0] == name or k[2] == name), key=_edge_sort_key)

    def adjacency(self) -> dict[str, dict[str, list[tuple[str, bool]]]]:
        """Undirected adjacency: node -> neighbour -> [(relation, forward)]."""
        adj: dict[str, dict[str, list[tuple[str, bool]]]] = {n: {} for n in self.nodes}
        for head, rel, tail, _ in self.edges:
            if head == tail:
                continue
            adj[head].setdefault(tail, []).append((rel, True))
            adj[tail].setdefault(head, []).append((rel, False))
        return adj

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        node_lines = [
            _dumps({
                "name": n.canonical_name,
                "labels": [s.to_json() for s in n.sorted_labels()],
                "surfaces": sorted(n.surface_forms),
            })
            for n in self.nodes.values()
        ]
        edge_lines = [
            _dumps({"head": h, "rel": r, "tail": t, "prov": p.value, "meta": meta})
            for (h, r, t, p), meta in self.edges.items()
        ]
        _write_lines(directory / "nodes.jsonl", node_lines)
        _write_lines(directory / "edges.jsonl", edge_lines)

    @classmethod
    def load(cls, directory: str | Path) -> "KnowledgeGraph":
        directory = Path(directory)
        graph = cls()
        for obj in _read_jsonl(directory / "nodes.jsonl"):
            labels = frozenset(StageLabel.from_json(s) for s in obj["labels"])
            if not labels:
                raise ValueError(f"node {obj['name']!r} has no stage labels")
            graph.nodes[obj["name"]] = KnowledgeNode(obj["name"], labels, frozenset(obj["surfaces"]))
        for obj in _read_jsonl(directory / "edges.jsonl"):
            key = (obj["head"], obj["rel"], obj["tail"], Provenance(obj["prov"]))
            for end in (key[0], key[2]):
                if end not in graph.nodes:
                    raise ValueError(f"edge endpoint {end!r} missing from nodes.jsonl")
            graph.edges[key] = dict(obj.get("meta") or {})
        return graph


def _edge_sort_key(key: EdgeKey):
    h, r, t, p = key
    return (h, r, t, p.value)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in sorted(lines)), encoding="utf-8")


def _read_jsonl(path: Path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def merge_graphs(a: KnowledgeGraph, b: KnowledgeGraph) -> KnowledgeGraph:
    merged = KnowledgeGraph()
    for graph in (a, b):
        for name, node in graph.nodes.items():
            old = merged.nodes.get(name)
            if old is None:
                merged.nodes[name] = node
            else:
                merged.nodes[name] = KnowledgeNode(
                    name, old.stage_labels | node.stage_labels, old.surface_forms | node.surface_forms
                )
        for key, meta in graph.edges.items():
            into = merged.edges.setdefault(key, {})
            if "variants" in meta or "variants" in into:
                into["variants"] = sorted(set(into.get("variants", [])) | set(meta.get("variants", [])))
    return merged


def keyword_search(graph: KnowledgeGraph, keywords: Iterable[str]) -> list[KnowledgeNode]:
    """Nodes whose name or a surface form contains a keyword as a whole token run."""
    patterns = {tuple(tokens(canonicalize(k))) for k in keywords}
    patterns.discard(())
    if not patterns:
        return []
    hits = []
    for name in sorted(graph.nodes):
        node = graph.nodes[name]
        forms = [tokens(name)] + [tokens(s) for s in sorted(node.surface_forms)]
        if any(_contains_run(form, pat) for form in forms for pat in patterns):
            hits.append(node)
    return hits


def _contains_run(seq: list[str], pat: tuple[str, ...]) -> bool:
    n = len(pat)
    return any(tuple(seq[i:i + n]) == pat for i in range(len(seq) - n + 1))


# --- triple extraction -------------------------------------------------------

EXTRACTION_SYSTEM = (
    "You extract knowledge triples from a question-answer pair taken from one stage of a "
    "business workflow. Output one triple per line in the exact form (head | relation | tail) "
    "and nothing else. Prefer causal relations and keep cue phrases such as "
    + ", ".join(f'"{c}"' for c in CAUSAL_CUES)
    + " verbatim."
)

_TRIPLE_LINE = re.compile(r"^\s*\((.*)\)\s*$")


class ExtractionBackendFailure(RuntimeError):
    pass


class Extraction(NamedTuple):
    triples: list[Triple]
    skipped: int


def extraction_prompt(instruction: str, response: str) -> str:
    return f"Instruction:\n{instruction}\n\nResponse:\n{response}"


def parse_triples(text: str, provenance: Provenance = Provenance.EXPLICIT) -> Extraction:
    """Parse ``(head | relation | tail)`` lines; other non-blank lines are skipped."""
    triples, skipped = [], 0
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _TRIPLE_LINE.match(line)
        parts = [p.strip() for p in m.group(1).split("|")] if m else []
        if len(parts) != 3 or not all(parts):
            skipped += 1
            continue
        triples.append(Triple(parts[0], parts[1], parts[2], provenance))
    return Extraction(triples, skipped)


def extract_triples(
    qa: QAPair, extractor: BackendHandle, provenance: Provenance = Provenance.EXPLICIT
) -> Extraction:
    try:
        text = extractor.ask(extraction_prompt(qa.instruction, qa.response), EXTRACTION_SYSTEM)
    except BackendError as exc:
        raise ExtractionBackendFailure(str(exc)) from exc
    result = parse_triples(text, provenance)
    if result.skipped:
        log.debug("skipped %d malformed triple lines", result.skipped)
    return result


# --- counterfactual elicitation ----------------------------------------------

class Variant(str, Enum):
    CAUSAL = "causal"
    ADVERSARIAL = "adversarial"
    SUBSTITUTION = "substitution"
    EXTREME = "extreme"
    BACKWARD_CAUSAL = "backward_causal"


VARIANTS = tuple(Variant)

VARIANT_DIRECTIVES = {
    Variant.CAUSAL: "Change one important cause or precondition in the request and keep its goal unchanged.",
    Variant.ADVERSARIAL: "Introduce one plausible adverse condition (a conflict, failure or competing demand) the request must cope with, keeping its goal unchanged.",
    Variant.SUBSTITUTION: "Substitute one key material, component, party or method in the request with a realistic alternative, keeping its goal unchanged.",
    Variant.EXTREME: "Push one important quantity or condition in the request to an extreme but possible value, keeping its goal unchanged.",
    Variant.BACKWARD_CAUSAL: "Fix the desired outcome and ask which upstream condition would have to change to reach it, keeping the request's goal unchanged.",
}

COUNTERFACTUAL_SYSTEM = (
    "You rewrite workflow requests into counterfactual versions. Change exactly one important "
    "condition and keep what the request is trying to achieve. Reply with the rewritten request only."
)


class EmptyInstruction(ValueError):
    pass


def auto_variants() -> Iterable[Variant]:
    """Round-robin over the five variants."""
    return itertools.cycle(VARIANTS)


def counterfactual_prompt(instruction: str, variant: Variant) -> str:
    variant = Variant(variant)
    return (
        f"Variant: {variant.value}\n"
        f"Directive: {VARIANT_DIRECTIVES[variant]}\n\n"
        f"Original request:\n{instruction}"
    )


def generate_counterfactual(instruction: str, variant: Variant, generator: BackendHandle) -> str:
    if not instruction or not instruction.strip():
        raise EmptyInstruction("instruction must be non-empty")
    return generator.ask(counterfactual_prompt(instruction, variant), COUNTERFACTUAL_SYSTEM).strip()


# --- refinement loop ---------------------------------------------------------

LABELS = ("reasonable", "ambiguous", "unreasonable")

EVALUATOR_SYSTEM = (
    "You judge whether an answer to a counterfactual workflow request is reasonable. "
    "Reply with two lines:\nVERDICT: reasonable | ambiguous | unreasonable\n"
    "FEEDBACK: what is wrong with the answer and how to fix it"
)

AGENT_SYSTEM = "You are the specialist agent for the {stage} stage of a business workflow. Answer the request."

_VERDICT = re.compile(r"^\s*VERDICT\s*:\s*([A-Za-z_-]+)", re.IGNORECASE | re.MULTILINE)
_FEEDBACK = re.compile(r"^\s*FEEDBACK\s*:\s*(.*)", re.IGNORECASE | re.MULTILINE | re.DOTALL)


@dataclass(frozen=True)
class Verdict:
    label: str
    feedback: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown verdict label {self.label!r}")
        if self.label != "reasonable" and not self.feedback.strip():
            raise ValueError("feedback is required for a non-reasonable verdict")


def parse_verdict(text: str) -> Verdict:
    m = _VERDICT.search(text)
    label = m.group(1).lower() if m else ""
    fb = _FEEDBACK.search(text)
    feedback = fb.group(1).strip() if fb else ""
    if label not in LABELS:
        return Verdict("ambiguous", text.strip() or "evaluator output could not be parsed")
    if label != "reasonable" and not feedback:
        feedback = text.strip()
    return Verdict(label, feedback)


def evaluation_prompt(cf_instruction: str, answer: str) -> str:
    return f"Request:\n{cf_instruction}\n\nAnswer:\n{answer}"


class RefinementExhausted(RuntimeError):
    def __init__(self, last_answer: str, verdicts: list[Verdict]):
        super().__init__(f"no reasonable answer after {len(verdicts)} rounds")
        self.last_answer = last_answer
        self.verdicts = verdicts


class Refinement(NamedTuple):
    answer: str
    verdicts: list[Verdict]
    instruction: str


def refine_counterfactual(
    cf_instruction: str,
    agent: BackendHandle,
    evaluator: BackendHandle,
    max_rounds: int = 5,
    agent_system: str = "",
) -> Refinement:
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    verdicts: list[Verdict] = []
    answer = ""
    for _ in range(max_rounds):
        answer = agent.ask(cf_instruction, agent_system)
        verdict = parse_verdict(evaluator.ask(evaluation_prompt(cf_instruction, answer), EVALUATOR_SYSTEM))
        verdicts.append(verdict)
        if verdict.label == "reasonable":
            return Refinement(answer, verdicts, cf_instruction)
        cf_instruction = f"{cf_instruction}\n\nFeedback: {verdict.feedback}"
    raise RefinementExhausted(answer, verdicts)


# --- construction ------------------------------------------------------------

class BuildError(RuntimeError):
    pass


def _explicit_sample(qa: QAPair, extractor: BackendHandle) -> list[Triple]:
    return extract_triples(qa, extractor, Provenance.EXPLICIT).triples


def _tacit_sample(qa, variant, agent, evaluator, generator, extractor, max_rounds) -> list[Triple]:
    cf = generate_counterfactual(qa.instruction, variant, generator)
    if not cf:
        raise BuildError("counterfactual generator returned empty text")
    refined = refine_counterfactual(
        cf, agent, evaluator, max_rounds, AGENT_SYSTEM.format(stage=qa.stage.id)
    )
    cf_qa = QAPair(refined.instruction, refined.answer, qa.stage)
    return extract_triples(cf_qa, extractor, Provenance.TACIT).triples


def build_graph(
    datasets: Sequence[tuple[StageLabel, Sequence[QAPair]]],
    *,
    extractor: BackendHandle,
    agents: Mapping[str, BackendHandle] | None = None,
    evaluator: BackendHandle | None = None,
    generator: BackendHandle | None = None,
    tacit: bool = True,
    lenient: bool = False,
    max_rounds: int = 5,
    variant: Variant | str = "auto",
    workers: int = 1,
) -> KnowledgeGraph:
    """Build explicit and tacit graphs over every stage and merge them.

    ``agents`` is keyed by stage id. ``generator`` writes counterfactual
    inputs and defaults to the evaluator.
    """
    samples = [
        (stage, qa)
        for stage, qas in sorted(datasets, key=lambda d: d[0].order)
        for qa in qas
    ]
    generator = generator or evaluator
    if tacit and samples:
        if evaluator is None:
            raise BuildError("tacit construction needs an evaluator")
        missing = sorted({s.id for s, _ in samples} - set(agents or {}))
        if missing:
            raise BuildError(f"no agent configured for stage(s): {', '.join(missing)}")

    def run(jobs):
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = [pool.submit(contextvars.copy_context().run, fn, *args) for fn, args in jobs]
        results = []
        for (fn, args), fut in zip(jobs, futures):
            try:
                results.append(fut.result())
            except Exception as exc:  # per-sample failure
                qa = args[0]
                if not lenient:
                    raise BuildError(f"sample failed in stage {qa.stage.id!r}: {exc}") from exc
                log.warning("skipping sample in stage %s: %s", qa.stage.id, exc)
                results.append([])
        return results

    explicit = KnowledgeGraph()
    jobs = [(_explicit_sample, (qa, extractor)) for _, qa in samples]
    for (stage, _), triples in zip(samples, run(jobs)):
        for t in triples:
            explicit.add_triple(t, stage)

    tacit_graph = KnowledgeGraph()
    if tacit:
        if variant == "auto":
            kinds = list(itertools.islice(auto_variants(), len(samples)))
        else:
            kinds = [Variant(variant)] * len(samples)
        jobs = [
            (_tacit_sample, (qa, kind, agents[stage.id], evaluator, generator, extractor, max_rounds))
            for (stage, qa), kind in zip(samples, kinds)
        ]
        for (stage, _), kind, triples in zip(samples, kinds, run(jobs)):
            for t in triples:
                tacit_graph.add_triple(t, stage, variant=kind)

    return merge_graphs(explicit, tacit_graph)


# --- corpus ingestion --------------------------------------------------------

def load_corpus(path: str | Path, stages: Sequence[StageLabel]) -> list[tuple[StageLabel, list[QAPair]]]:
    """Read ``{instruction, response, stage}`` JSONL grouped by stage order."""
    by_id = {s.id: s for s in stages}
    grouped: dict[str, list[QAPair]] = {s.id: [] for s in stages}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                stage = by_id[obj["stage"]]
            except KeyError:
                raise ValueError(f"{path}:{lineno}: unknown or missing stage {obj.get('stage')!r}") from None
            grouped[stage.id].append(QAPair(obj["instruction"], obj["response"], stage))
    return [(s, grouped[s.id]) for s in sorted(stages) if grouped[s.id]]
