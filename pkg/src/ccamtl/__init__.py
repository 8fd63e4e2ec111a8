"""Cross-task channel affinity, AffineMix and orthogonal regularization on a small autodiff core."""

from .harness.estimator import MultiTaskSegDepth

__version__ = "0.1.0"
__all__ = ["MultiTaskSegDepth", "__version__"]
