"""End-to-end orchestration behind the ``relmatch`` commands."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from relmatch.backends import Backend, CountingBackend, RemoteChatBackend, DEFAULT_CHAT_MODEL
from relmatch.cache import DirectoryCache, MemoryCache, NullCache, VerdictCache
from relmatch.cascade import resolve
from relmatch.catalogs import EXACT
from relmatch.classifier import RelationMatcher, RetrievalPolicy, naive_match
from relmatch.embedding import (
    CachedProvider,
    EmbeddingProvider,
    LocalHashProvider,
    RemoteEmbeddingProvider,
    build_index,
    embed,
    load_index,
    query_topk,
    save_index,
    serialize_entity,
)
from relmatch.errors import InputError
from relmatch.metrics import compute_metrics
from relmatch.model import (
    ConfirmedTarget,
    EntityReport,
    EntityTable,
    MatchReport,
    RelationCatalog,
    load_table,
)
from relmatch.synthetic import (
    GeneratorParams,
    OracleBackend,
    TaxonomyProvider,
    generate_taxonomy,
    load_truth,
)

logger = logging.getLogger(__name__)

INDEX_FILE = "index.bin"
MANIFEST_FILE = "manifest.json"
TARGETS_FILE = "targets.csv"
DEFAULT_CACHE_DIR = ".relmatch-cache"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- configuration -----------------------------------------------------------


@dataclass
class ProviderConfig:
    kind: str = "local"
    dimension: int = 16
    seed: int = 0
    taxonomy: str | None = None
    endpoint: str | None = None
    model: str = "text-embedding-ada-002"
    cache_dir: str | None = None

    def build(self) -> EmbeddingProvider:
        if self.kind == "local":
            return LocalHashProvider(self.dimension, self.seed)
        if self.kind == "taxonomy":
            if not self.taxonomy:
                raise InputError("the taxonomy provider needs --taxonomy PATH")
            return TaxonomyProvider.from_file(self.taxonomy, self.seed)
        if self.kind == "remote":
            if not self.endpoint:
                raise InputError("the remote provider needs --embed-endpoint URL")
            provider = RemoteEmbeddingProvider(self.endpoint, self.model, self.dimension)
            cache_root = Path(self.cache_dir or DEFAULT_CACHE_DIR) / "embeddings"
            return CachedProvider(provider, cache_root)
        raise InputError(f"unknown provider kind {self.kind!r}")


@dataclass
class BackendConfig:
    kind: str = "oracle"
    truth: str | None = None
    endpoint: str | None = None
    model: str = DEFAULT_CHAT_MODEL

    def build(self) -> Backend:
        if self.kind == "oracle":
            if not self.truth:
                raise InputError("the oracle backend needs --truth PATH")
            return OracleBackend(load_truth(self.truth))
        if self.kind == "remote":
            if not self.endpoint:
                raise InputError("the remote backend needs --chat-endpoint URL")
            return RemoteChatBackend(self.endpoint, self.model)
        raise InputError(f"unknown backend kind {self.kind!r}")


def make_cache(cache_dir: str | None, enabled: bool = True) -> VerdictCache:
    if not enabled:
        return NullCache()
    return DirectoryCache(Path(cache_dir or DEFAULT_CACHE_DIR) / "verdicts")


# -- offline: index ----------------------------------------------------------


@dataclass
class IndexResult:
    out_dir: Path
    manifest: dict[str, Any]
    skipped: bool


def build_target_index(
    target_csv: str | Path, provider: EmbeddingProvider, out_dir: str | Path, table_name: str = "targets"
) -> IndexResult:
    out_dir = Path(out_dir)
    csv_hash = sha256_file(target_csv)
    manifest_path = out_dir / MANIFEST_FILE
    if manifest_path.exists() and (out_dir / INDEX_FILE).exists() and (out_dir / TARGETS_FILE).exists():
        try:
            previous = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            previous = {}
        if previous.get("csv_sha256") == csv_hash and previous.get("provider_id") == provider.id:
            logger.info("index in %s is up to date; skipping", out_dir)
            return IndexResult(out_dir, previous, skipped=True)

    table = load_table(target_csv, table_name)
    pairs = [(r.id, embed(serialize_entity(r, table.schema), provider)) for r in table.records]
    index = build_index(pairs)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_index(index, out_dir / INDEX_FILE)
    shutil.copyfile(target_csv, out_dir / (TARGETS_FILE + ".tmp"))
    os.replace(out_dir / (TARGETS_FILE + ".tmp"), out_dir / TARGETS_FILE)
    manifest = {
        "provider_id": provider.id,
        "model_name": getattr(provider, "model", provider.id),
        "dimension": index.dimension,
        "row_count": len(index),
        "csv_sha256": csv_hash,
        "table_name": table_name,
        "schema": list(table.schema),
        "index_file": INDEX_FILE,
        "targets_file": TARGETS_FILE,
    }
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return IndexResult(out_dir, manifest, skipped=False)


# -- online: match -----------------------------------------------------------


def assemble_report(
    sources: EntityTable,
    catalog: RelationCatalog,
    matcher_run,
    run_info: dict[str, Any],
) -> MatchReport:
    order = tuple(r.id for r in catalog.by_rank())
    by_source: dict[str, list] = {}
    for verdict in matcher_run.verdicts:
        by_source.setdefault(verdict.source_id, []).append(verdict)
    entities = []
    for source in sources.records:
        verdicts = by_source.get(source.id, [])
        distances = matcher_run.distances.get(source.id, {})
        grouped: dict[str, list[ConfirmedTarget]] = {}
        for verdict in verdicts:
            if verdict.decision:
                grouped.setdefault(verdict.relation_id, []).append(
                    ConfirmedTarget(verdict.target_id, distances[verdict.target_id], verdict.rationale)
                )
        for targets in grouped.values():
            targets.sort(key=lambda t: (t.distance, t.target_id))
        stats = {rel: matcher_run.stats[(source.id, rel)] for rel in order if (source.id, rel) in matcher_run.stats}
        entities.append(
            EntityReport(
                source_id=source.id,
                resolution=resolve(source.id, verdicts, catalog, distances),
                verdicts_by_relation=grouped,
                stats=stats,
            )
        )
    return MatchReport(run=run_info, relation_order=order, entities=entities)


def exit_code_for(report: MatchReport) -> int:
    failures = report.failed_pairs
    if not failures:
        return 0
    total = sum(len(e.stats) for e in report.entities)
    if len(failures) == total and all(err.startswith("BackendUnavailable") for _, _, err in failures):
        return 3
    return 4


@dataclass
class MatchOutcome:
    report: MatchReport
    exit_code: int
    backend_calls: int
    run: Any = field(repr=False, default=None)


def run_match(
    source_csv: str | Path,
    index_dir: str | Path,
    catalog: RelationCatalog,
    policy: RetrievalPolicy,
    provider: EmbeddingProvider,
    backend: Backend,
    cache: VerdictCache,
    workers: int = 1,
) -> MatchOutcome:
    index_dir = Path(index_dir)
    manifest_path = index_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise InputError(f"{index_dir} has no {MANIFEST_FILE}; run 'relmatch index' first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("provider_id") != provider.id:
        raise InputError(
            f"index was built with provider {manifest.get('provider_id')!r} but {provider.id!r} is "
            "configured; embeddings from different providers are not comparable"
        )
    index = load_index(index_dir / manifest.get("index_file", INDEX_FILE))
    targets = load_table(index_dir / manifest.get("targets_file", TARGETS_FILE), manifest.get("table_name", "targets"))
    sources = load_table(source_csv, "sources")
    counting = CountingBackend(backend)
    matcher = RelationMatcher(index, targets, provider, counting, cache, policy, workers=workers)
    run = matcher.match_all(sources, catalog)
    run_info = {
        "policy": {
            "k": policy.k,
            "continuation_threshold": policy.continuation_threshold,
            "max_batches": policy.max_batches,
        },
        "provider_id": provider.id,
        "backend": backend.model_hint,
        "relations": [r.id for r in catalog.by_rank()],
        "source_sha256": sha256_file(source_csv),
        "index_csv_sha256": manifest.get("csv_sha256"),
        "source_count": len(sources),
        "target_count": len(targets),
    }
    report = assemble_report(sources, catalog, run, run_info)
    return MatchOutcome(report, exit_code_for(report), counting.calls, run)


def write_report(report: MatchReport, json_path: str | Path) -> Path:
    json_path = Path(json_path)
    text_path = json_path.with_suffix(".txt")
    atomic_write_text(json_path, report.to_json())
    atomic_write_text(text_path, report.to_text())
    return text_path


# -- evaluation --------------------------------------------------------------


def run_eval(seed: int, params: GeneratorParams, policy: RetrievalPolicy, embed_seed: int = 0) -> dict[str, Any]:
    """Compare embedding-only, naive binary matching and relation-based matching on a synthetic corpus."""
    from relmatch.catalogs import esg_catalog

    corpus = generate_taxonomy(seed, params)
    catalog = esg_catalog()
    provider = TaxonomyProvider.from_corpus(corpus, embed_seed)
    index = build_index(
        (r.id, embed(serialize_entity(r, corpus.targets.schema), provider)) for r in corpus.targets.records
    )
    oracle = OracleBackend(corpus.truth, aliases={"match": EXACT})
    truth = corpus.truth
    exact_pairs = {(s, t) for rel, s, t in truth if rel == EXACT}
    related_pairs = {(s, t) for _, s, t in truth}
    targets_by_id = corpus.targets.by_id()

    # nearest neighbour as the match
    top1 = {}
    for source in corpus.sources.records:
        probe = embed(serialize_entity(source, corpus.sources.schema), provider)
        top1[source.id] = query_topk(index, probe, 1).ids[0]
    top1_pairs = set(top1.items())
    embedding_baseline = {
        "top1_exact_precision": len(top1_pairs & exact_pairs) / len(top1_pairs),
        "top1_related_precision": len(top1_pairs & related_pairs) / len(top1_pairs),
        "exact_recall": len(top1_pairs & exact_pairs) / len(exact_pairs) if exact_pairs else "n/a",
    }

    matcher = RelationMatcher(index, corpus.targets, provider, oracle, MemoryCache(), policy)
    run = matcher.match_all(corpus.sources, catalog)

    # binary "match" question over the first batch only
    naive_confirmed = set()
    for source in corpus.sources.records:
        probe = embed(serialize_entity(source, corpus.sources.schema), provider)
        batch = query_topk(index, probe, policy.k)
        verdicts = naive_match(
            source, [targets_by_id[i] for i in batch.ids], oracle, MemoryCache(),
            source_schema=corpus.sources.schema, target_schema=corpus.targets.schema,
        )
        naive_confirmed |= {(v.source_id, v.target_id) for v in verdicts if v.decision}
    relation_exact_tp = {(s, t) for rel, s, t in run.confirmed() if rel == EXACT} & exact_pairs
    relation_any = {(s, t) for _, s, t in run.confirmed()}
    naive_baseline = {
        "predicted": len(naive_confirmed),
        "true_positives": len(naive_confirmed & exact_pairs),
        "precision": len(naive_confirmed & exact_pairs) / len(naive_confirmed) if naive_confirmed else "n/a",
        "exact_recall": len(naive_confirmed & exact_pairs) / len(exact_pairs) if exact_pairs else "n/a",
        "related_recall": len(naive_confirmed & related_pairs) / len(related_pairs),
    }
    relation_metrics = compute_metrics(run.verdicts, truth, run.examined, catalog.ids)
    relation_metrics["exact_true_positives"] = len(relation_exact_tp)
    relation_metrics["related_recall"] = len(relation_any & related_pairs) / len(related_pairs)
    return {
        "seed": seed,
        "params": params.to_dict(),
        "policy": {"k": policy.k, "continuation_threshold": policy.continuation_threshold, "max_batches": policy.max_batches},
        "truth_triples": len(truth),
        "embedding_baseline": embedding_baseline,
        "naive_baseline": naive_baseline,
        "relation_based": relation_metrics,
        "checks": {
            "naive_tp_le_relation_exact_tp": naive_baseline["true_positives"] <= len(relation_exact_tp),
            "naive_recall_le_relation_recall": naive_baseline["related_recall"] <= relation_metrics["related_recall"],
        },
    }
