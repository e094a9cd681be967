"""Few-shot NER with bi-encoders and knowledge-base derived label interpretation corpora."""

__version__ = "0.1.0"
