"""Relation-based entity matching with embedding blocking and LLM relation classification."""

from relmatch.model import (
    EntityRecord,
    EntityTable,
    MatchReport,
    Multiplicity,
    RelationCatalog,
    RelationSpec,
    RelationVerdict,
    ResolvedMatch,
    ResolutionStatus,
    load_catalog,
    load_table,
)

__version__ = "0.1.0"

__all__ = [
    "EntityRecord",
    "EntityTable",
    "MatchReport",
    "Multiplicity",
    "RelationCatalog",
    "RelationSpec",
    "RelationVerdict",
    "ResolvedMatch",
    "ResolutionStatus",
    "load_catalog",
    "load_table",
]
