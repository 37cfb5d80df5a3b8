"""Command line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .composer import QueryBackends, answer_query
from .config import ConfigError, Runtime, load_config
from .gateway import BackendError, BudgetExceeded
from .graph import KnowledgeGraph, QAPair, build_graph, load_corpus
from .metrics import EmptyText, gleu, rouge_l
from .prompts_tree import PromptsTree, build_tree
from .report import append_usage, cost_table, format_table, load_usage, render_cost_figure, render_score_figure

log = logging.getLogger("collabchain")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collabchain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help, required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=required, type=Path, help="run configuration (YAML)")
        return sp

    sp = with_config("build-kg", "build the collaborative knowledge graph from the corpus")
    sp.add_argument("--corpus", type=Path, help="override paths.corpus")
    sp.add_argument("--out", type=Path, help="override paths.graph_dir")

    sp = with_config("build-tree", "build the prompts tree from a seed Q&A")
    sp.add_argument("--seed", type=Path, help="override paths.seed (JSON with instruction, response)")
    sp.add_argument("--out", type=Path, help="override paths.tree")

    sp = with_config("query", "answer one question")
    sp.add_argument("--question", required=True)
    sp.add_argument("--trace", nargs="?", const="", default=None, metavar="PATH",
                    help="write the retrieval trace JSON (default: trace.json beside the tree)")
    sp.add_argument("--skip-stages", default="", help="comma-separated stage ids left out of the prompt chain")
    sp.add_argument("--json", action="store_true", help="print the full result (answer, usage, trace) as JSON")

    sp = with_config("eval", "score candidate/reference pairs with GLEU and ROUGE-L", required=False)
    sp.add_argument("--pairs", required=True, type=Path, help="JSONL with candidate and reference per line")
    sp.add_argument("--figure", type=Path, help="also write a score histogram image")

    sp = with_config("cost-report", "summarize the usage log")
    sp.add_argument("--figure", type=Path, help="also write a token/cost chart image")
    return p


def _split_stages(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_build_kg(args) -> int:
    cfg = load_config(args.config)
    rt = Runtime(cfg)
    corpus = args.corpus or cfg.path("corpus")
    if not Path(corpus).exists():
        raise FileNotFoundError(f"corpus not found: {corpus}")
    datasets = load_corpus(corpus, cfg.stages)
    with rt.gateway.track() as ledger:
        graph = build_graph(
            datasets,
            extractor=rt.role("extractor"),
            agents=rt.agents() if cfg.tacit else None,
            evaluator=rt.role("evaluator", required=cfg.tacit),
            generator=rt.role("generator", required=False),
            tacit=cfg.tacit,
            lenient=cfg.lenient,
            max_rounds=cfg.max_rounds,
            workers=cfg.workers,
        )
    out = args.out or cfg.path("graph_dir")
    graph.save(out)
    _log_usage(cfg, "build-kg", ledger.usage())
    print(f"wrote {len(graph.nodes)} nodes and {len(graph.edges)} edges to {out}")
    return 0


def _load_seed(path: Path, cfg) -> QAPair:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return QAPair(obj["instruction"], obj["response"], cfg.stages[0])


def cmd_build_tree(args) -> int:
    cfg = load_config(args.config)
    rt = Runtime(cfg)
    seed_path = args.seed or cfg.paths.get("seed")
    if seed_path is not None:
        if not Path(seed_path).exists():
            raise FileNotFoundError(f"seed file not found: {seed_path}")
        seed = _load_seed(seed_path, cfg)
    else:
        corpus = cfg.path("corpus")
        if not corpus.exists():
            raise FileNotFoundError(f"corpus not found: {corpus}")
        datasets = load_corpus(corpus, cfg.stages)
        if not datasets:
            raise RuntimeError(f"corpus {corpus} holds no Q&A to seed the tree")
        seed = datasets[0][1][0]
    with rt.gateway.track() as ledger:
        tree = build_tree(seed, cfg.stages, rt.agents(), cfg.m, cfg.workers)
    out = args.out or cfg.path("tree")
    tree.save(out)
    _log_usage(cfg, "build-tree", ledger.usage())
    print(f"wrote {len(tree.nodes)} prompt nodes (depth {tree.depth}) to {out}")
    return 0


def cmd_query(args) -> int:
    cfg = load_config(args.config)
    qcfg = cfg.query_config(_split_stages(args.skip_stages))
    rt = Runtime(cfg)
    graph_dir, tree_path = cfg.path("graph_dir"), cfg.path("tree")
    for p in (graph_dir / "nodes.jsonl", graph_dir / "edges.jsonl", tree_path):
        if not p.exists():
            raise FileNotFoundError(f"artifact not found: {p} (run build-kg / build-tree first)")
    graph = KnowledgeGraph.load(graph_dir)
    tree = PromptsTree.load(tree_path)
    backends = QueryBackends(
        backbone=rt.role("backbone"),
        encoder=rt.encoder(),
        keywords=rt.role("keywords", required=cfg.keyword_mode == "llm"),
    )
    result = answer_query(args.question, graph, tree, backends, qcfg)
    if args.json:
        print(json.dumps(result.to_json(), indent=2, sort_keys=True, ensure_ascii=False))
    else:
        print(result.answer)
    if args.trace is not None:
        trace_path = Path(args.trace) if args.trace else tree_path.parent / "trace.json"
        trace_path.write_text(json.dumps(result.trace.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        log.info("trace written to %s", trace_path)
    _log_usage(cfg, "query", result.usage)
    return 0


def cmd_eval(args) -> int:
    if args.config is not None:
        load_config(args.config)
    if not args.pairs.exists():
        raise FileNotFoundError(f"pairs file not found: {args.pairs}")
    rows = []
    with open(args.pairs, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                cand, ref = obj["candidate"], obj["reference"]
                rows.append({"gleu": gleu(cand, ref).value, "rouge_l": rouge_l(cand, ref).value})
            except (KeyError, EmptyText) as exc:
                raise ValueError(f"{args.pairs}:{lineno}: {exc}") from None
    mean = {k: (sum(r[k] for r in rows) / len(rows) if rows else 0.0) for k in ("gleu", "rouge_l")}
    print(json.dumps({"pairs": rows, "mean": mean, "count": len(rows)}, indent=2, sort_keys=True))
    if args.figure:
        render_score_figure({k: [r[k] for r in rows] for k in ("gleu", "rouge_l")}, args.figure)
    return 0


def cmd_cost_report(args) -> int:
    cfg = load_config(args.config)
    log_path = cfg.path("usage_log")
    if not log_path.exists():
        raise FileNotFoundError(f"usage log not found: {log_path}")
    rows = cost_table(load_usage(log_path))
    print(format_table(rows))
    if args.figure:
        render_cost_figure(rows, args.figure)
    return 0


def _log_usage(cfg, kind, usage) -> None:
    if "usage_log" in cfg.paths:
        append_usage(cfg.paths["usage_log"], kind, usage)


COMMANDS = {
    "build-kg": cmd_build_kg,
    "build-tree": cmd_build_tree,
    "query": cmd_query,
    "eval": cmd_eval,
    "cost-report": cmd_cost_report,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"collabchain: config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, BackendError, BudgetExceeded, RuntimeError, ValueError, KeyError) as exc:
        print(f"collabchain: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
