"""Hierarchical multi-task tagger for dialogue acts, frames and frame elements."""
__version__ = "0.1.0"

from .corpus import AnnotatedSentence, parse_conll, serialize_conll  # noqa: E402
from .evaluation import evaluate, wilcoxon_signed_rank  # noqa: E402
from .model import ABLATIONS, HermitConfig, HermitModel, build, load, save  # noqa: E402

__all__ = ["__version__", "AnnotatedSentence", "parse_conll", "serialize_conll", "evaluate",
           "wilcoxon_signed_rank", "ABLATIONS", "HermitConfig", "HermitModel", "build",
           "load", "save"]
