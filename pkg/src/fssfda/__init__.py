"""Few-shot source-free domain adaptation toolkit and benchmark harness."""

__version__ = "0.1.0"
