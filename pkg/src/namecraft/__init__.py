"""Character-level name classifiers with relevance-based explanations."""

__version__ = "0.1.0"
