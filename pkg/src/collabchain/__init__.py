"""Collaboration artifacts for multi-stage workflows: a stage-labeled knowledge
graph and a prompts tree, composed into a single backbone-model call."""

from .causal import CausalPath, RetrievalTrace, ScoredNode, extract_keywords, find_cross_stage_paths, select_seeds
from .composer import ComposedPrompt, QueryBackends, QueryConfig, QueryResult, answer_query, compose_prompt
from .embedder import EmbeddingVector, HashingEncoder, RemoteEncoder, cosine
from .gateway import BackendHandle, ChatRequest, ChatResponse, Gateway, HttpBackend, ScriptedBackend, UsageRecord
from .graph import KnowledgeGraph, KnowledgeNode, QAPair, StageLabel, Triple, build_graph, merge_graphs
from .metrics import gleu, rouge_l
from .prompts_tree import PromptChain, PromptsTree, build_tree, retrieve_prompt_chain

__version__ = "0.1.0"
