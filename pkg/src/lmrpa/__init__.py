"""lmrpa: LLM-assisted invoice processing pipeline.

Watches a directory for invoice images, runs OCR through pluggable engines,
structures the text into schema-validated records with an LLM client (with a
deterministic offline mock), persists idempotently, and renders CSV sheet and
templated report outputs. A benchmark driver compares pipelined against
sequential execution on synthetic corpora.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
