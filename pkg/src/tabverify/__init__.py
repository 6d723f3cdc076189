"""Open-domain fact verification over collections of tables.

The pipeline: entity-based character n-gram TF-IDF retrieval of candidate
tables, claim-aware table linearisation, a pluggable text encoder, cross-table
attention fusion, and two output heads (joint reranking-and-verification, or
per-table ternary verification) with detectors for insufficient retrieved
evidence.
"""

__version__ = "0.1.0"

from tabverify.corpus import Claim, Corpus, EntitySpan, Table

__all__ = ["Claim", "Corpus", "EntitySpan", "Table", "__version__"]
