"""Domain types shared across the pipeline, plus catalog and table loaders."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

from relmatch.errors import EmptyTable, InvalidCatalog, MalformedCatalog, MalformedCsv


@dataclass(frozen=True)
class EntityRecord:
    id: str
    attributes: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("entity id must be non-empty")
        names = [name for name, _ in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in record {self.id!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attributes)

    def get(self, name: str, default: str | None = None) -> str | None:
        for key, value in self.attributes:
            if key == name:
                return value
        return default


@dataclass(frozen=True)
class EntityTable:
    name: str
    schema: tuple[str, ...]
    records: tuple[EntityRecord, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for record in self.records:
            if record.names != self.schema:
                raise ValueError(
                    f"record {record.id!r} attributes {record.names} do not follow schema {self.schema}"
                )
            if record.id in seen:
                raise ValueError(f"duplicate record id {record.id!r} in table {self.name!r}")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EntityRecord]:
        return iter(self.records)

    def by_id(self) -> dict[str, EntityRecord]:
        return {record.id: record for record in self.records}


class Multiplicity(str, enum.Enum):
    SINGLE = "single"
    MANY = "many"


@dataclass(frozen=True)
class RelationExample:
    source_text: str
    target_text: str
    explanation: str


@dataclass(frozen=True)
class RelationSpec:
    id: str
    display_name: str
    description: str
    examples: tuple[RelationExample, ...]
    priority_rank: int
    multiplicity: Multiplicity = Multiplicity.SINGLE

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "display_name": self.display_name,
            "description": self.description,
            "examples": [
                {
                    "source_text": ex.source_text,
                    "target_text": ex.target_text,
                    "explanation": ex.explanation,
                }
                for ex in self.examples
            ],
            "priority_rank": self.priority_rank,
            "multiplicity": self.multiplicity.value,
        }


@dataclass(frozen=True)
class RelationCatalog:
    relations: tuple[RelationSpec, ...]

    def __post_init__(self) -> None:
        validate_relations(self.relations)

    def __len__(self) -> int:
        return len(self.relations)

    def __iter__(self) -> Iterator[RelationSpec]:
        return iter(self.relations)

    def get(self, relation_id: str) -> RelationSpec:
        for relation in self.relations:
            if relation.id == relation_id:
                return relation
        raise KeyError(relation_id)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.relations)

    def by_rank(self) -> list[RelationSpec]:
        return sorted(self.relations, key=lambda r: r.priority_rank)

    def to_dict(self) -> dict[str, Any]:
        return {"relations": [r.to_dict() for r in self.relations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def validate_relations(relations: Sequence[RelationSpec]) -> None:
    """Raise InvalidCatalog naming the first offending relation."""
    if not relations:
        raise InvalidCatalog("catalog defines no relations")
    seen: set[str] = set()
    for relation in relations:
        if not relation.id:
            raise InvalidCatalog("relation with empty id", relation.id)
        if relation.id in seen:
            raise InvalidCatalog(f"duplicate relation id {relation.id!r}", relation.id)
        seen.add(relation.id)
        if not relation.description.strip():
            raise InvalidCatalog(f"relation {relation.id!r} has an empty description", relation.id)
        if not relation.examples:
            raise InvalidCatalog(f"relation {relation.id!r} has no examples", relation.id)
        if isinstance(relation.priority_rank, bool) or not isinstance(relation.priority_rank, int):
            raise InvalidCatalog(f"relation {relation.id!r} has a non-integer priority_rank", relation.id)
        if relation.priority_rank < 1:
            raise InvalidCatalog(f"relation {relation.id!r} has priority_rank < 1", relation.id)
    ranks = sorted(r.priority_rank for r in relations)
    expected = list(range(1, len(relations) + 1))
    if ranks != expected:
        # name the first relation whose rank falls outside 1..n or repeats
        seen_ranks: set[int] = set()
        for relation in sorted(relations, key=lambda r: (r.priority_rank, r.id)):
            if relation.priority_rank > len(relations) or relation.priority_rank in seen_ranks:
                raise InvalidCatalog(
                    f"priority ranks must be unique and contiguous from 1; "
                    f"relation {relation.id!r} has rank {relation.priority_rank}",
                    relation.id,
                )
            seen_ranks.add(relation.priority_rank)


def catalog_from_dict(data: Any) -> RelationCatalog:
    if not isinstance(data, dict) or not isinstance(data.get("relations"), list):
        raise MalformedCatalog("catalog must be an object with a 'relations' list")
    specs = []
    for position, item in enumerate(data["relations"]):
        rel_id = item.get("id") if isinstance(item, dict) else None
        label = rel_id if isinstance(rel_id, str) else f"#{position}"
        if not isinstance(item, dict):
            raise MalformedCatalog(f"relation {label} is not an object")
        try:
            examples = tuple(
                RelationExample(
                    source_text=str(ex["source_text"]),
                    target_text=str(ex["target_text"]),
                    explanation=str(ex["explanation"]),
                )
                for ex in item.get("examples", [])
            )
            spec = RelationSpec(
                id=str(item["id"]),
                display_name=str(item.get("display_name", item["id"])),
                description=str(item.get("description", "")),
                examples=examples,
                priority_rank=item["priority_rank"],
                multiplicity=Multiplicity(item.get("multiplicity", "single")),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedCatalog(f"relation {label}: missing or invalid field {exc}") from exc
        except ValueError as exc:
            raise MalformedCatalog(f"relation {label}: {exc}") from exc
        specs.append(spec)
    return RelationCatalog(tuple(specs))


def load_catalog(path: str | Path) -> RelationCatalog:
    """Load and validate a relation catalog JSON file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedCatalog(f"{path}: not UTF-8") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCatalog(f"{path}: {exc}") from exc
    return catalog_from_dict(data)


def load_table(path: str | Path, table_name: str) -> EntityTable:
    """Read a UTF-8 CSV with a header row.

    An ``id`` column, when present, supplies record ids; otherwise rows get
    1-based ordinal ids. Values are kept verbatim apart from BOM removal.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"{path}: not UTF-8") from exc
    return parse_table(text, table_name, source=str(path))


def parse_table(text: str, table_name: str, source: str = "<string>") -> EntityTable:
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows:
        raise EmptyTable(f"{source}: no header row")
    header = rows[0]
    if len(set(header)) != len(header):
        raise MalformedCsv(f"{source}: duplicate column names in header")
    data_rows = rows[1:]
    if not data_rows:
        raise EmptyTable(f"{source}: table {table_name!r} has no data rows")
    id_col = header.index("id") if "id" in header else None
    schema = tuple(name for i, name in enumerate(header) if i != id_col)
    records = []
    seen: set[str] = set()
    for line_no, row in enumerate(data_rows, start=2):
        if len(row) != len(header):
            raise MalformedCsv(
                f"{source}:{line_no}: expected {len(header)} fields, got {len(row)}"
            )
        record_id = row[id_col] if id_col is not None else str(line_no - 1)
        if not record_id:
            raise MalformedCsv(f"{source}:{line_no}: empty id")
        if record_id in seen:
            raise MalformedCsv(f"{source}:{line_no}: duplicate id {record_id!r}")
        seen.add(record_id)
        attrs = tuple((name, value) for i, (name, value) in enumerate(zip(header, row)) if i != id_col)
        records.append(EntityRecord(record_id, attrs))
    return EntityTable(table_name, schema, tuple(records))


def write_table(table: EntityTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *table.schema])
        for record in table.records:
            writer.writerow([record.id, *(value for _, value in record.attributes)])


class Provenance:
    """Verdict provenance tags: ``remote_model:<name>``, ``oracle`` or ``cache``."""

    ORACLE = "oracle"
    CACHE = "cache"

    @staticmethod
    def remote(model_name: str) -> str:
        return f"remote_model:{model_name}"


@dataclass(frozen=True)
class RelationVerdict:
    relation_id: str
    source_id: str
    target_id: str
    decision: bool
    rationale: str = ""
    provenance: str = Provenance.ORACLE

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.relation_id, self.source_id, self.target_id)


class ResolutionStatus(str, enum.Enum):
    RESOLVED = "resolved"
    COMPONENT_ONLY = "component_only"
    UNRESOLVED = "unresolved"


@dataclass(frozen=True)
class ResolvedMatch:
    source_id: str
    status: ResolutionStatus
    relation_id: str | None
    target_ids: tuple[str, ...]
    selection_reason: str

    def __post_init__(self) -> None:
        if self.status is ResolutionStatus.UNRESOLVED and self.target_ids:
            raise ValueError("unresolved match cannot carry targets")
        if self.status is not ResolutionStatus.UNRESOLVED and (
            self.relation_id is None or not self.target_ids
        ):
            raise ValueError(f"{self.status.value} match needs a relation and targets")

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "status": self.status.value,
            "relation_id": self.relation_id,
            "target_ids": list(self.target_ids),
            "selection_reason": self.selection_reason,
        }


@dataclass
class RetrievalStats:
    """Per (source, relation) loop bookkeeping."""

    batches_fetched: int = 0
    candidates_examined: int = 0
    confirmed_per_batch: list[int] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "batches_fetched": self.batches_fetched,
            "candidates_examined": self.candidates_examined,
            "confirmed_per_batch": list(self.confirmed_per_batch),
            "batch_sizes": list(self.batch_sizes),
            "failed": self.failed,
            "error": self.error,
        }


@dataclass(frozen=True)
class ConfirmedTarget:
    target_id: str
    distance: float
    rationale: str


@dataclass
class EntityReport:
    source_id: str
    resolution: ResolvedMatch
    verdicts_by_relation: dict[str, list[ConfirmedTarget]]
    stats: dict[str, RetrievalStats]

    def to_dict(self, relation_order: Sequence[str]) -> dict[str, Any]:
        return {
            "source_id": self.source_id,
            "resolutions": self.resolution.to_dict(),
            "verdicts_by_relation": [
                {
                    "relation_id": rel_id,
                    "targets": [
                        {"target_id": t.target_id, "distance": t.distance, "rationale": t.rationale}
                        for t in self.verdicts_by_relation.get(rel_id, [])
                    ],
                }
                for rel_id in relation_order
            ],
            "stats": {
                "relations": [
                    {"relation_id": rel_id, **self.stats[rel_id].to_dict()}
                    for rel_id in relation_order
                    if rel_id in self.stats
                ],
                "batches_fetched": max(
                    (s.batches_fetched for s in self.stats.values()), default=0
                ),
                "candidates_examined": max(
                    (s.candidates_examined for s in self.stats.values()), default=0
                ),
            },
        }


@dataclass
class MatchReport:
    run: dict[str, Any]
    relation_order: tuple[str, ...]
    entities: list[EntityReport]

    @property
    def failed_pairs(self) -> list[tuple[str, str, str]]:
        return [
            (entity.source_id, rel_id, stats.error or "")
            for entity in self.entities
            for rel_id, stats in entity.stats.items()
            if stats.failed
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run": self.run,
            "entities": [e.to_dict(self.relation_order) for e in self.entities],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        lines = [f"relmatch report: {len(self.entities)} source entities"]
        for entity in self.entities:
            res = entity.resolution
            if res.status is ResolutionStatus.UNRESOLVED:
                outcome = "UNRESOLVED"
            else:
                outcome = f"{res.status.value} via {res.relation_id}: {', '.join(res.target_ids)}"
            lines.append(f"{entity.source_id}: {outcome}")
            for rel_id in self.relation_order:
                targets = entity.verdicts_by_relation.get(rel_id, [])
                stats = entity.stats.get(rel_id)
                flag = " [FAILED]" if stats is not None and stats.failed else ""
                shown = ", ".join(f"{t.target_id} ({t.distance:.4f})" for t in targets) or "-"
                lines.append(f"  {rel_id}{flag}: {shown}")
        return "\n".join(lines) + "\n"
