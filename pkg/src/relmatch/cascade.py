"""Pick one match per source entity by walking relations in priority order."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

from relmatch.errors import MissingDistance
from relmatch.model import (
    Multiplicity,
    RelationCatalog,
    RelationSpec,
    RelationVerdict,
    ResolutionStatus,
    ResolvedMatch,
)

# Ordering key over (target_id, distance); the smallest key is the preferred
# target for single-multiplicity relations. Swap in another comparator to
# judge specificity differently.
SpecificityKey = Callable[[tuple[str, float]], object]


def nearest_first(item: tuple[str, float]) -> tuple[float, str]:
    target_id, distance = item
    return (distance, target_id)


def select_within_rank(
    relation: RelationSpec,
    confirmed_targets: Sequence[tuple[str, float]],
    key: SpecificityKey = nearest_first,
) -> list[str]:
    if not confirmed_targets:
        raise ValueError("select_within_rank needs at least one confirmed target")
    ordered = sorted(confirmed_targets, key=key)
    if relation.multiplicity is Multiplicity.MANY:
        return [target_id for target_id, _ in ordered]
    return [ordered[0][0]]


def resolve(
    source_id: str,
    verdicts: Iterable[RelationVerdict],
    catalog: RelationCatalog,
    distances: Mapping[str, float],
    key: SpecificityKey = nearest_first,
) -> ResolvedMatch:
    confirmed: dict[str, set[str]] = {}
    for verdict in verdicts:
        if verdict.source_id != source_id:
            raise ValueError(f"verdict for {verdict.source_id!r} passed to resolve({source_id!r})")
        if verdict.decision:
            confirmed.setdefault(verdict.relation_id, set()).add(verdict.target_id)

    for relation in catalog.by_rank():
        targets = confirmed.get(relation.id)
        if not targets:
            continue
        pairs = []
        for target_id in sorted(targets):
            if target_id not in distances:
                raise MissingDistance(f"no retrieval distance for confirmed target {target_id!r}")
            pairs.append((target_id, distances[target_id]))
        chosen = select_within_rank(relation, pairs, key)
        if relation.multiplicity is Multiplicity.MANY:
            status = ResolutionStatus.COMPONENT_ONLY
            reason = (
                f"{relation.display_name} (rank {relation.priority_rank}) is the best relation found; "
                f"returning all {len(chosen)} confirmed targets for manual handling"
            )
        else:
            status = ResolutionStatus.RESOLVED
            reason = (
                f"{relation.display_name} (rank {relation.priority_rank}) is the best relation found; "
                f"picked the nearest of {len(pairs)} confirmed targets"
            )
        return ResolvedMatch(source_id, status, relation.id, tuple(chosen), reason)

    return ResolvedMatch(
        source_id, ResolutionStatus.UNRESOLVED, None, (), "no relation has a confirmed target"
    )
