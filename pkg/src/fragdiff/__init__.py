"""Cross-domain fragment diffusion toolkit."""

from . import align, diffusion, featstore, graph, metrics, patchkit, pipeline, pseudolabel
from .errors import FragdiffError

__version__ = "0.1.0"

__all__ = [
    "FragdiffError",
    "__version__",
    "align",
    "diffusion",
    "featstore",
    "graph",
    "metrics",
    "patchkit",
    "pipeline",
    "pseudolabel",
]
