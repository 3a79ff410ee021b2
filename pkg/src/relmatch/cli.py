"""``relmatch`` command line: index, match, eval, generate.

Exit codes: 0 success, 2 bad configuration or input, 3 provider/backend
exhaustion, 4 partial failure (report written with failed pairs flagged).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from relmatch.classifier import RetrievalPolicy
from relmatch.errors import (
    BackendUnavailable,
    InputError,
    ProviderUnavailable,
    RelmatchError,
    UnknownNode,
    VectorIndexError,
)
from relmatch.model import load_catalog

logger = logging.getLogger("relmatch")

DEFAULTS: dict[str, Any] = {
    "k": 10,
    "threshold": 0.30,
    "max_batches": 5,
    "provider": "local",
    "dim": 16,
    "embed_seed": 0,
    "taxonomy": None,
    "embed_endpoint": None,
    "embed_model": "text-embedding-ada-002",
    "backend": "oracle",
    "truth": None,
    "chat_endpoint": None,
    "chat_model": "gpt-4",
    "cache_dir": ".relmatch-cache",
    "no_cache": False,
    "workers": 1,
    "seed": 42,
    "tree_depth": 3,
    "branching": 3,
    "targets": 500,
    "sources": 50,
    "synonym_rate": 0.3,
    "detail_rate": 0.4,
}


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults (flags override it)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_provider(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("embedding provider")
    g.add_argument("--provider", choices=["local", "taxonomy", "remote"], help="embedding provider (default local)")
    g.add_argument("--dim", type=int, help="embedding dimension for local/remote providers (default 16)")
    g.add_argument("--embed-seed", type=int, help="seed of the local or taxonomy provider (default 0)")
    g.add_argument("--taxonomy", help="taxonomy.json written by 'relmatch generate' (taxonomy provider)")
    g.add_argument("--embed-endpoint", help="embedding endpoint URL (remote provider)")
    g.add_argument("--embed-model", help="embedding model name (remote provider)")
    g.add_argument("--cache-dir", help="cache directory (default .relmatch-cache)")


def _add_policy(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("retrieval policy")
    g.add_argument("--k", type=int, help="candidates per batch (default 10)")
    g.add_argument("--threshold", type=float, help="confirmed fraction needed to fetch another batch (default 0.30)")
    g.add_argument("--max-batches", type=int, help="batch cap per source and relation (default 5)")


def _add_generator(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic corpus")
    g.add_argument("--seed", type=int, help="generator seed (default 42)")
    g.add_argument("--tree-depth", type=int, help="taxonomy levels (default 3)")
    g.add_argument("--branching", type=int, help="children per concept (default 3)")
    g.add_argument("--targets", type=int, help="target entities (default 500)")
    g.add_argument("--sources", type=int, help="source entities (default 50)")
    g.add_argument("--synonym-rate", type=float, help="chance of a non-canonical word (default 0.3)")
    g.add_argument("--detail-rate", type=float, help="chance of filling each detail slot (default 0.4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relmatch",
        description="Relation-based entity matching: embedding blocking plus LLM relation classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="embed a target table and write a vector index")
    p.add_argument("target_csv", help="target table (CSV with header)")
    p.add_argument("--out", required=True, help="output directory for index.bin, manifest.json, targets.csv")
    _add_provider(p)
    _add_config(p)

    p = sub.add_parser("match", help="match a source table against an index and write a report")
    p.add_argument("source_csv", help="source table (CSV with header)")
    p.add_argument("--index", required=True, help="directory written by 'relmatch index'")
    p.add_argument("--catalog", help="relation catalog JSON (default: bundled ESG catalog)")
    p.add_argument("--report", required=True, help="report JSON path; a .txt summary is written next to it")
    _add_policy(p)
    _add_provider(p)
    g = p.add_argument_group("classification backend")
    g.add_argument("--backend", choices=["oracle", "remote"], help="classification backend (default oracle)")
    g.add_argument("--truth", help="ground-truth JSON for the oracle backend")
    g.add_argument("--chat-endpoint", help="chat-completion endpoint URL (remote backend)")
    g.add_argument("--chat-model", help="chat model name (remote backend, default gpt-4)")
    g.add_argument("--no-cache", action="store_true", default=None, help="disable the verdict cache")
    g.add_argument("--workers", type=int, help="concurrent (source, relation) tasks (default 1)")
    _add_config(p)

    p = sub.add_parser("eval", help="compare baselines and relation matching on a synthetic corpus")
    p.add_argument("--metrics", required=True, help="metrics JSON output path")
    _add_generator(p)
    _add_policy(p)
    p.add_argument("--embed-seed", type=int, help="mock embedder noise seed (default 0)")
    _add_config(p)

    p = sub.add_parser("generate", help="write a synthetic corpus (sources, targets, truth, taxonomy)")
    p.add_argument("--out", required=True, help="output directory")
    _add_generator(p)
    _add_config(p)
    return parser


def resolve_options(args: argparse.Namespace) -> dict[str, Any]:
    """Built-in defaults, overridden by the config file, overridden by flags."""
    options = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InputError("config file must hold a JSON object")
        options.update({key.replace("-", "_"): value for key, value in loaded.items()})
    options.update({key: value for key, value in vars(args).items() if value is not None})
    return options


def _provider_config(opts: dict[str, Any]):
    from relmatch.pipeline import ProviderConfig

    return ProviderConfig(
        kind=opts["provider"],
        dimension=opts["dim"],
        seed=opts["embed_seed"],
        taxonomy=opts["taxonomy"],
        endpoint=opts["embed_endpoint"],
        model=opts["embed_model"],
        cache_dir=opts["cache_dir"],
    )


def _policy(opts: dict[str, Any]) -> RetrievalPolicy:
    return RetrievalPolicy(k=opts["k"], continuation_threshold=opts["threshold"], max_batches=opts["max_batches"])


def _params(opts: dict[str, Any]):
    from relmatch.synthetic import GeneratorParams

    return GeneratorParams(
        tree_depth=opts["tree_depth"],
        branching=opts["branching"],
        targets_count=opts["targets"],
        sources_count=opts["sources"],
        synonym_rate=opts["synonym_rate"],
        detail_rate=opts["detail_rate"],
    )


def cmd_index(opts: dict[str, Any]) -> int:
    from relmatch.pipeline import build_target_index

    provider = _provider_config(opts).build()
    result = build_target_index(opts["target_csv"], provider, opts["out"])
    verb = "unchanged" if result.skipped else "wrote"
    print(f"{verb} index of {result.manifest['row_count']} rows (dimension {result.manifest['dimension']}) in {result.out_dir}")
    return 0


def cmd_match(opts: dict[str, Any]) -> int:
    from relmatch.catalogs import esg_catalog
    from relmatch.pipeline import BackendConfig, make_cache, run_match, write_report

    policy = _policy(opts)
    catalog = load_catalog(opts["catalog"]) if opts.get("catalog") else esg_catalog()
    provider = _provider_config(opts).build()
    backend = BackendConfig(
        kind=opts["backend"], truth=opts["truth"], endpoint=opts["chat_endpoint"], model=opts["chat_model"]
    ).build()
    cache = make_cache(opts["cache_dir"], enabled=not opts["no_cache"])
    outcome = run_match(
        opts["source_csv"], opts["index"], catalog, policy, provider, backend, cache, workers=opts["workers"]
    )
    text_path = write_report(outcome.report, opts["report"])
    for source_id, relation_id, error in outcome.report.failed_pairs:
        print(f"failed: {source_id} / {relation_id}: {error}", file=sys.stderr)
    print(f"wrote {opts['report']} and {text_path}; backend calls: {outcome.backend_calls}")
    return outcome.exit_code


def cmd_eval(opts: dict[str, Any]) -> int:
    from relmatch.pipeline import atomic_write_text, run_eval

    params = _params(opts)
    params.validate()
    metrics = run_eval(opts["seed"], params, _policy(opts), embed_seed=opts["embed_seed"])
    atomic_write_text(opts["metrics"], json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    rb = metrics["relation_based"]
    print(f"wrote {opts['metrics']}; retrieval recall {rb['retrieval_recall']}")
    return 0


def cmd_generate(opts: dict[str, Any]) -> int:
    from relmatch.synthetic import generate_taxonomy

    params = _params(opts)
    corpus = generate_taxonomy(opts["seed"], params)
    paths = corpus.write(opts["out"])
    print(f"wrote {len(corpus.sources)} sources, {len(corpus.targets)} targets, {len(corpus.truth)} truth triples to {opts['out']}")
    for name, path in paths.items():
        logger.info("%s: %s", name, path)
    return 0


COMMANDS = {"index": cmd_index, "match": cmd_match, "eval": cmd_eval, "generate": cmd_generate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except (ProviderUnavailable, BackendUnavailable) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (InputError, VectorIndexError, UnknownNode, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except RelmatchError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
