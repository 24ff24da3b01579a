"""Knowledge-edit routing: augmented edit memory, relevance-filtered retrieval
and base/aligned backend routing, with an editing evaluation harness."""

from .augmenter import AugmentedEdit, Augmenter, Edit, EditForm, FormKind, augment_llm, augment_rule_based, render_qa
from .backends import HttpCompletionBackend, MockAlignedBackend, MockBaseBackend, mock_backends
from .embedding import HttpEmbedder, NgramEmbedder
from .evaluator import EvalRecord, MetricReport, harmonic_mean, load_dataset, run_incremental, run_sequential, run_single
from .memory import Memory, MemoryEntry
from .retrieval import FilterModel, RetrievalCandidate, retrieve_topk, train_filter
from .router import EditingSystem, RouteDecision, RoutedAnswer, RoutePath, build_ke_prompt, route

__version__ = "0.1.0"

__all__ = [
    "AugmentedEdit",
    "Augmenter",
    "Edit",
    "EditForm",
    "EditingSystem",
    "EvalRecord",
    "FilterModel",
    "FormKind",
    "HttpCompletionBackend",
    "HttpEmbedder",
    "Memory",
    "MemoryEntry",
    "MetricReport",
    "MockAlignedBackend",
    "MockBaseBackend",
    "NgramEmbedder",
    "RetrievalCandidate",
    "RouteDecision",
    "RoutePath",
    "RoutedAnswer",
    "augment_llm",
    "augment_rule_based",
    "build_ke_prompt",
    "harmonic_mean",
    "load_dataset",
    "mock_backends",
    "render_qa",
    "retrieve_topk",
    "route",
    "run_incremental",
    "run_sequential",
    "run_single",
    "train_filter",
]
