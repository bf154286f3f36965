"""Knowledge-prompted visual grounding for synthetic medical images."""
from .boxes import Box
from .config import RunConfig, load_config
from .kg import KnowledgeGraph, build_graph, load_graph, save_graph
from .metrics import EvalReport, evaluate

__all__ = ["Box", "EvalReport", "KnowledgeGraph", "RunConfig", "build_graph", "evaluate", "load_config",
           "load_graph", "save_graph"]
__version__ = "0.1.0"
