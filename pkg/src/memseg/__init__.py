"""memseg: incremental few-shot segmentation with an embedding memory pool."""

__version__ = "0.1.0"
