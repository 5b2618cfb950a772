"""Cross-scale relational feature aggregation for semantic segmentation.

The package is self-contained: a small reverse-mode autodiff tensor core
(:mod:`rsphead.tensor`), the window-relation operator and its residual
fusion (:mod:`rsphead.rse`), feature-pyramid segmentation heads
(:mod:`rsphead.pyramid`), a deterministic trainer and metrics
(:mod:`rsphead.training`), dataset synthesis and file formats
(:mod:`rsphead.data`), analytic parameter/FLOP accounting
(:mod:`rsphead.costs`), and a CLI (:mod:`rsphead.cli`).
"""

from rsphead.tensor import Tensor, backward, finite_diff_check

__all__ = ["Tensor", "backward", "finite_diff_check"]
__version__ = "0.1.0"
