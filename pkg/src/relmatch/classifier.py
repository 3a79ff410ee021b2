"""Prompt construction, verdict parsing and the adaptive retrieval loop.

For every (source entity, relation) pair the matcher pages through the
source's nearest targets ``k`` at a time. After each page it asks the backend
which candidates stand in the relation, and fetches the next page only while
the confirmed fraction of the last page reaches the continuation threshold.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from relmatch.backends import Backend, BackendResponse
from relmatch.cache import NullCache, VerdictCache, cache_key
from relmatch.embedding import CandidateBatch, EmbeddingProvider, VectorIndex, embed, query_topk, serialize_entity
from relmatch.errors import BackendUnavailable, InvalidPolicy, ParseError, TransportError
from relmatch.model import (
    EntityRecord,
    EntityTable,
    Provenance,
    RelationCatalog,
    RelationSpec,
    RelationVerdict,
    RetrievalStats,
)

logger = logging.getLogger(__name__)

NAIVE_RELATION_ID = "match"

PROMPT_TEMPLATE = (
    "Task: Decide input & output entity relation.\n"
    "Data: The input entity: {input_entity_row}\n"
    "The output entities: {output_entity_rows}\n"
    "Relation: {relation_description_with_example}\n"
    "Steps:\n"
    "1. Repeat input entity and relation.\n"
    "2. Go through each output entity. \n"
    "Reason if it has the relation to input entity.\n"
)

RESPONSE_CONTRACT = (
    'After reasoning, output a line "VERDICTS:" followed by one line per output entity: '
    '"<entity_id>: YES" or "<entity_id>: NO".\n'
)

NAIVE_TEMPLATE = (
    "Task: Decide whether each output entity matches the input entity.\n"
    "Data: The input entity: {input_entity_row}\n"
    "The output entities: {output_entity_rows}\n"
    "A match means the output entity refers to exactly the same entity as the input entity.\n"
    "Steps:\n"
    "1. Repeat input entity.\n"
    "2. Go through each output entity. \n"
    "Reason if it matches the input entity.\n"
)


@dataclass(frozen=True)
class RetrievalPolicy:
    k: int = 10
    continuation_threshold: float = 0.30
    max_batches: int = 5

    def __post_init__(self) -> None:
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise InvalidPolicy(f"k must be an integer >= 1, got {self.k!r}")
        if not 0.0 <= self.continuation_threshold <= 1.0:
            raise InvalidPolicy(
                f"continuation_threshold must lie in [0, 1], got {self.continuation_threshold!r}"
            )
        if isinstance(self.max_batches, bool) or not isinstance(self.max_batches, int) or self.max_batches < 1:
            raise InvalidPolicy(f"max_batches must be an integer >= 1, got {self.max_batches!r}")


@dataclass(frozen=True)
class ClassificationRequest:
    prompt: str
    source_id: str
    relation_id: str
    candidate_ids: tuple[str, ...]
    model_hint: str = ""

    def __post_init__(self) -> None:
        if not self.candidate_ids:
            raise ValueError("a classification request needs at least one candidate")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise ValueError("candidate ids must be unique")

    @property
    def key(self) -> str:
        return cache_key(self.prompt, self.model_hint)


def _candidate_rows(candidates: Sequence[EntityRecord], schema: Sequence[str] | None) -> str:
    lines = []
    for ordinal, record in enumerate(candidates, start=1):
        text = serialize_entity(record, schema if schema is not None else record.names)
        lines.append(f"{ordinal}. [{record.id}] {text}")
    return "\n".join(lines)


def describe_relation(relation: RelationSpec) -> str:
    lines = [relation.description]
    for ex in relation.examples:
        lines.append(f'Example: input "{ex.source_text}", output "{ex.target_text}": {ex.explanation}')
    return "\n".join(lines)


def build_prompt(
    source: EntityRecord,
    candidates: Sequence[EntityRecord],
    relation: RelationSpec,
    model_hint: str = "",
    source_schema: Sequence[str] | None = None,
    target_schema: Sequence[str] | None = None,
) -> ClassificationRequest:
    if not candidates:
        raise ValueError("build_prompt needs at least one candidate")
    prompt = PROMPT_TEMPLATE.format(
        input_entity_row=serialize_entity(source, source_schema or source.names),
        output_entity_rows=_candidate_rows(candidates, target_schema),
        relation_description_with_example=describe_relation(relation),
    ) + RESPONSE_CONTRACT
    return ClassificationRequest(
        prompt=prompt,
        source_id=source.id,
        relation_id=relation.id,
        candidate_ids=tuple(c.id for c in candidates),
        model_hint=model_hint,
    )


def build_naive_prompt(
    source: EntityRecord,
    candidates: Sequence[EntityRecord],
    model_hint: str = "",
    source_schema: Sequence[str] | None = None,
    target_schema: Sequence[str] | None = None,
) -> ClassificationRequest:
    if not candidates:
        raise ValueError("build_naive_prompt needs at least one candidate")
    prompt = NAIVE_TEMPLATE.format(
        input_entity_row=serialize_entity(source, source_schema or source.names),
        output_entity_rows=_candidate_rows(candidates, target_schema),
    ) + RESPONSE_CONTRACT
    return ClassificationRequest(
        prompt=prompt,
        source_id=source.id,
        relation_id=NAIVE_RELATION_ID,
        candidate_ids=tuple(c.id for c in candidates),
        model_hint=model_hint,
    )


def _is_verdicts_header(line: str) -> bool:
    return line.strip().strip("*#` ").upper() == "VERDICTS:"


def _clean_id(token: str) -> str:
    token = token.strip().strip("*`").strip()
    if token.startswith(("-", "•")):
        token = token[1:].strip()
    if token.startswith("[") and token.endswith("]"):
        token = token[1:-1].strip()
    return token


def parse_response(response: BackendResponse, request: ClassificationRequest) -> list[RelationVerdict]:
    """One verdict per requested candidate, in request order, from the final VERDICTS block."""
    raw = response.raw_text
    lines = raw.splitlines()
    header_at = None
    for i, line in enumerate(lines):
        if _is_verdicts_header(line):
            header_at = i
    if header_at is None:
        raise ParseError("response has no VERDICTS: block", raw)
    rationale = "\n".join(lines[:header_at]).strip()
    wanted = set(request.candidate_ids)
    decisions: dict[str, bool] = {}
    for line in lines[header_at + 1 :]:
        if not line.strip():
            continue
        name, sep, token = line.rpartition(":")
        if not sep:
            raise ParseError(f"unparseable verdict line {line!r}", raw)
        entity_id = _clean_id(name)
        value = token.strip().strip("*`.").strip().upper()
        if value not in ("YES", "NO"):
            raise ParseError(f"verdict for {entity_id!r} is {token.strip()!r}, expected YES or NO", raw)
        if entity_id not in wanted:
            raise ParseError(f"verdict for unknown id {entity_id!r}", raw)
        if entity_id in decisions:
            raise ParseError(f"duplicate verdict for {entity_id!r}", raw)
        decisions[entity_id] = value == "YES"
    missing = [cid for cid in request.candidate_ids if cid not in decisions]
    if missing:
        raise ParseError(f"no verdict for {', '.join(missing)}", raw)
    return [
        RelationVerdict(
            relation_id=request.relation_id,
            source_id=request.source_id,
            target_id=cid,
            decision=decisions[cid],
            rationale=rationale,
            provenance=response.provenance,
        )
        for cid in request.candidate_ids
    ]


def classify_batch(
    request: ClassificationRequest,
    backend: Backend,
    cache: VerdictCache | None = None,
    *,
    attempts: int = 3,
    backoff: float = 1.0,
    sleep: Callable[[float], None] | None = None,
) -> list[RelationVerdict]:
    """Classify one candidate batch, consulting the cache first.

    Transport failures are retried with exponential backoff; a ParseError is
    not retried, and the offending response is stored in the cache's failure
    area before the error propagates.
    """
    cache = cache if cache is not None else NullCache()
    sleep = sleep or time.sleep
    key = request.key
    hit = cache.get(key)
    if hit is not None and set(hit.get("decisions", {})) == set(request.candidate_ids):
        return [
            RelationVerdict(
                relation_id=request.relation_id,
                source_id=request.source_id,
                target_id=cid,
                decision=bool(hit["decisions"][cid]),
                rationale=hit.get("rationale", ""),
                provenance=Provenance.CACHE,
            )
            for cid in request.candidate_ids
        ]

    delay = backoff
    last_error: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            response = backend.complete(request)
            break
        except TransportError as exc:
            last_error = exc
            logger.warning("backend attempt %d/%d failed: %s", attempt, attempts, exc)
            if attempt < attempts:
                sleep(delay)
                delay *= 2
    else:
        raise BackendUnavailable(f"backend failed after {attempts} attempts: {last_error}")

    try:
        verdicts = parse_response(response, request)
    except ParseError as exc:
        cache.put_failure(key, exc.raw_text, str(exc))
        raise
    cache.put(
        key,
        {
            "decisions": {v.target_id: v.decision for v in verdicts},
            "rationale": verdicts[0].rationale,
            "raw_text": response.raw_text,
        },
    )
    return verdicts


class CandidateStream:
    """Lazily paged nearest-neighbor batches for one source, shared across relations."""

    def __init__(self, index: VectorIndex, probe: np.ndarray, k: int) -> None:
        self.index = index
        self.probe = probe
        self.k = k
        self._batches: dict[int, CandidateBatch] = {}
        self._lock = threading.Lock()

    def batch(self, n: int) -> CandidateBatch:
        with self._lock:
            if n not in self._batches:
                self._batches[n] = query_topk(self.index, self.probe, self.k, n * self.k)
            return self._batches[n]

    def exhausted_after(self, n: int) -> bool:
        return (n + 1) * self.k >= len(self.index)

    def distances(self) -> dict[str, float]:
        with self._lock:
            return {
                entity_id: dist
                for n in sorted(self._batches)
                for entity_id, dist in self._batches[n].candidates
            }


@dataclass
class MatchRun:
    """Output of :meth:`RelationMatcher.match_all`."""

    verdicts: list[RelationVerdict] = field(default_factory=list)
    stats: dict[tuple[str, str], RetrievalStats] = field(default_factory=dict)
    distances: dict[str, dict[str, float]] = field(default_factory=dict)
    examined: dict[tuple[str, str], list[str]] = field(default_factory=dict)

    @property
    def failures(self) -> dict[tuple[str, str], str]:
        return {key: s.error or "" for key, s in self.stats.items() if s.failed}

    def confirmed(self) -> set[tuple[str, str, str]]:
        return {v.key for v in self.verdicts if v.decision}


class RelationMatcher:
    """Runs the retrieve-classify loop against one target table and index."""

    def __init__(
        self,
        index: VectorIndex,
        targets: EntityTable,
        provider: EmbeddingProvider,
        backend: Backend,
        cache: VerdictCache | None = None,
        policy: RetrievalPolicy | None = None,
        *,
        workers: int = 1,
        attempts: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] | None = None,
    ) -> None:
        self.index = index
        self.targets = targets
        self._target_by_id = targets.by_id()
        missing = [i for i in index.ids if i not in self._target_by_id]
        if missing:
            raise ValueError(f"index ids missing from target table: {missing[:5]}")
        self.provider = provider
        self.backend = backend
        self.cache = cache if cache is not None else NullCache()
        self.policy = policy or RetrievalPolicy()
        self.workers = max(1, workers)
        self._classify_kwargs = {"attempts": attempts, "backoff": backoff, "sleep": sleep}

    def stream_for(self, source: EntityRecord, schema: Sequence[str] | None = None) -> CandidateStream:
        text = serialize_entity(source, schema or source.names)
        return CandidateStream(self.index, embed(text, self.provider), self.policy.k)

    def _records(self, batch: CandidateBatch) -> list[EntityRecord]:
        return [self._target_by_id[i] for i in batch.ids]

    def match_relation(
        self,
        source: EntityRecord,
        relation: RelationSpec,
        stream: CandidateStream | None = None,
        source_schema: Sequence[str] | None = None,
    ) -> tuple[list[RelationVerdict], RetrievalStats]:
        stream = stream or self.stream_for(source, source_schema)
        policy = self.policy
        stats = RetrievalStats()
        verdicts: list[RelationVerdict] = []
        n = 0
        while True:
            batch = stream.batch(n)
            if not batch.candidates:
                break
            stats.batches_fetched += 1
            stats.candidates_examined += len(batch)
            stats.batch_sizes.append(len(batch))
            request = build_prompt(
                source,
                self._records(batch),
                relation,
                model_hint=self.backend.model_hint,
                source_schema=source_schema,
                target_schema=self.targets.schema,
            )
            try:
                found = classify_batch(request, self.backend, self.cache, **self._classify_kwargs)
            except (ParseError, BackendUnavailable) as exc:
                stats.failed = True
                stats.error = f"{type(exc).__name__}: {exc}"
                logger.error("source %s relation %s batch %d failed: %s", source.id, relation.id, n, exc)
                break
            verdicts.extend(found)
            confirmed = sum(v.decision for v in found)
            stats.confirmed_per_batch.append(confirmed)
            fraction = confirmed / len(batch)
            if (
                fraction >= policy.continuation_threshold
                and not stream.exhausted_after(n)
                and stats.batches_fetched < policy.max_batches
            ):
                n += 1
                continue
            break
        return verdicts, stats

    def match_all(self, sources: EntityTable, catalog: RelationCatalog) -> MatchRun:
        run = MatchRun()
        if not sources.records:
            return run
        relations = catalog.by_rank()
        streams = {s.id: self.stream_for(s, sources.schema) for s in sources.records}
        tasks = [(s, r) for s in sources.records for r in relations]

        def work(task: tuple[EntityRecord, RelationSpec]):
            source, relation = task
            return self.match_relation(source, relation, streams[source.id], sources.schema)

        if self.workers == 1:
            results = [work(t) for t in tasks]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(work, tasks))

        for (source, relation), (verdicts, stats) in zip(tasks, results):
            run.verdicts.extend(verdicts)
            run.stats[(source.id, relation.id)] = stats
            run.examined[(relation.id, source.id)] = [v.target_id for v in verdicts]
            if stats.failed:
                # the failed batch was fetched but never classified
                fetched = [
                    eid for b in range(stats.batches_fetched) for eid in streams[source.id].batch(b).ids
                ]
                run.examined[(relation.id, source.id)] = fetched
        for source in sources.records:
            run.distances[source.id] = streams[source.id].distances()
        return run

    def naive_match(self, source: EntityRecord, candidates: Sequence[EntityRecord], source_schema=None) -> list[RelationVerdict]:
        return naive_match(
            source,
            candidates,
            self.backend,
            self.cache,
            source_schema=source_schema,
            target_schema=self.targets.schema,
            **self._classify_kwargs,
        )


def naive_match(
    source: EntityRecord,
    candidates: Sequence[EntityRecord],
    backend: Backend,
    cache: VerdictCache | None = None,
    *,
    source_schema: Sequence[str] | None = None,
    target_schema: Sequence[str] | None = None,
    **classify_kwargs,
) -> list[RelationVerdict]:
    """Binary exactly-the-same baseline over a fixed candidate list."""
    request = build_naive_prompt(
        source, candidates, backend.model_hint, source_schema=source_schema, target_schema=target_schema
    )
    return classify_batch(request, backend, cache, **classify_kwargs)
