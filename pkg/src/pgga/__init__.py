"""Pose-guided graph attention embedder for person re-identification."""

__all__ = ["PoseGuidedEmbedder"]
__version__ = "0.1.0"


def __getattr__(name):
    if name == "PoseGuidedEmbedder":
        from .estimator import PoseGuidedEmbedder

        return PoseGuidedEmbedder
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
