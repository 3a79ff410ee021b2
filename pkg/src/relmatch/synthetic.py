"""Synthetic taxonomy corpora with known relation ground truth.

A corpus is a forest of concept nodes. Each node may declare detail slots
(size, power, ...) that its descendants inherit, and part nodes hang off
non-leaf concepts. Entities are node instances with some slots filled,
rendered as short noun phrases ("compact electric automobile"). Ground truth
between a source and a target entity follows from their nodes and details:

* exactly the same: same node, same details
* general without details: target node is an ancestor-or-self and the
  target's details are a proper subset of the source's
* additional details: target node is a descendant-or-self and the target
  assumes something the source does not (deeper node or an extra slot)
* wrong details: nodes on one lineage and a shared slot disagrees
* component: target node is a part of the source node or of an ancestor
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from relmatch.backends import BackendResponse
from relmatch.catalogs import ADDITIONAL, COMPONENT, EXACT, GENERAL, WRONG
from relmatch.embedding import serialize_entity
from relmatch.errors import InvalidParams, UnknownNode
from relmatch.model import EntityRecord, EntityTable, Provenance

ATTRIBUTE = "item"
SCHEMA = (ATTRIBUTE,)

Triple = tuple[str, str, str]


@dataclass(frozen=True)
class GeneratorParams:
    tree_depth: int = 3
    branching: int = 3
    targets_count: int = 500
    sources_count: int = 50
    synonym_rate: float = 0.3
    detail_rate: float = 0.4
    roots: int = 3
    max_parts: int = 2
    part_target_rate: float = 0.15

    def validate(self) -> None:
        for name in ("tree_depth", "branching", "targets_count", "sources_count", "roots"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidParams(f"{name} must be a positive integer, got {value!r}")
        if self.tree_depth < 2:
            raise InvalidParams("tree_depth must be at least 2")
        if not isinstance(self.max_parts, int) or self.max_parts < 0:
            raise InvalidParams("max_parts must be a non-negative integer")
        for name in ("synonym_rate", "detail_rate", "part_target_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParams(f"{name} must lie in [0, 1], got {value!r}")

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class TaxonomyNode:
    node_id: str
    label: str
    parent: str | None = None
    parts: list[str] = field(default_factory=list)
    detail_slots: list[tuple[str, list[str]]] = field(default_factory=list)
    is_part: bool = False
    surface_forms: list[str] = field(default_factory=list)
    # part nodes remember the concept they were attached to; used for embedding only
    part_of: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "label": self.label,
            "parent": self.parent,
            "parts": list(self.parts),
            "detail_slots": [[slot, list(values)] for slot, values in self.detail_slots],
            "is_part": self.is_part,
            "surface_forms": list(self.surface_forms),
            "part_of": self.part_of,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TaxonomyNode:
        return cls(
            node_id=data["node_id"],
            label=data["label"],
            parent=data["parent"],
            parts=list(data["parts"]),
            detail_slots=[(slot, list(values)) for slot, values in data["detail_slots"]],
            is_part=data["is_part"],
            surface_forms=list(data["surface_forms"]),
            part_of=data.get("part_of"),
        )


@dataclass(frozen=True)
class Entity:
    id: str
    node_id: str
    details: tuple[tuple[str, str], ...]
    text: str

    @property
    def detail_map(self) -> dict[str, str]:
        return dict(self.details)


class Forest:
    """Node graph plus the slot vocabulary needed to render and embed entities."""

    def __init__(self, nodes: Iterable[TaxonomyNode], slot_order: Iterable[str], slot_values: Mapping[str, list[str]]):
        self.nodes: dict[str, TaxonomyNode] = {n.node_id: n for n in nodes}
        self.slot_order = list(slot_order)
        self.slot_values = {k: list(v) for k, v in slot_values.items()}
        self._check()

    def _check(self) -> None:
        for node in self.nodes.values():
            seen = set()
            cur: str | None = node.node_id
            while cur is not None:
                if cur in seen:
                    raise ValueError(f"cycle through {cur}")
                seen.add(cur)
                if cur not in self.nodes:
                    raise ValueError(f"dangling parent {cur}")
                cur = self.nodes[cur].parent
            for part in node.parts:
                if part == node.parent or self.nodes[part].parent is not None:
                    raise ValueError(f"part edge {node.node_id}->{part} overlaps parent edges")

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def node(self, node_id: str) -> TaxonomyNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"unknown taxonomy node {node_id!r}") from None

    def lineage(self, node_id: str) -> list[str]:
        """Root-first path ending at ``node_id``."""
        path = []
        cur: str | None = node_id
        while cur is not None:
            path.append(cur)
            cur = self.node(cur).parent
        return path[::-1]

    def slots_for(self, node_id: str) -> list[tuple[str, list[str]]]:
        slots = []
        for nid in self.lineage(node_id):
            slots.extend(self.node(nid).detail_slots)
        return slots

    def parts_for(self, node_id: str) -> set[str]:
        return {p for nid in self.lineage(node_id) for p in self.node(nid).parts}

    def concepts(self) -> list[str]:
        return [nid for nid, n in self.nodes.items() if not n.is_part]

    def part_nodes(self) -> list[str]:
        return [nid for nid, n in self.nodes.items() if n.is_part]

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": [n.to_dict() for n in self.nodes.values()],
            "slot_order": self.slot_order,
            "slot_values": self.slot_values,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Forest:
        return cls(
            (TaxonomyNode.from_dict(n) for n in data["nodes"]),
            data["slot_order"],
            data["slot_values"],
        )


def relations_between(forest: Forest, source: Entity, target: Entity) -> set[str]:
    """Relation ids that hold from ``source`` to ``target`` under the generation rules."""
    found: set[str] = set()
    s_line = forest.lineage(source.node_id)
    t_line = forest.lineage(target.node_id)
    ds, dt = source.detail_map, target.detail_map
    same_node = source.node_id == target.node_id
    if target.node_id in forest.parts_for(source.node_id):
        found.add(COMPONENT)
    t_above = target.node_id in s_line
    t_below = source.node_id in t_line
    if not (t_above or t_below):
        return found
    conflict = any(slot in ds and ds[slot] != value for slot, value in dt.items())
    if same_node and ds == dt:
        found.add(EXACT)
        return found
    if t_above and not conflict and set(dt.items()) <= set(ds.items()):
        found.add(GENERAL)
    extra = (not same_node and t_below) or any(slot not in ds for slot in dt)
    if t_below and extra:
        found.add(ADDITIONAL)
    if conflict:
        found.add(WRONG)
    return found


def _load_vocabulary() -> dict[str, Any]:
    text = (resources.files("relmatch") / "data" / "vocabulary.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass
class Corpus:
    sources: EntityTable
    targets: EntityTable
    truth: set[Triple]
    forest: Forest
    entities: dict[str, Entity]
    params: GeneratorParams
    seed: int

    def lexicon(self) -> dict[str, tuple[str, tuple[tuple[str, str], ...]]]:
        return {
            serialize_entity(EntityRecord(e.id, ((ATTRIBUTE, e.text),)), SCHEMA): (e.node_id, e.details)
            for e in self.entities.values()
        }

    def taxonomy_document(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "params": self.params.to_dict(),
            "forest": self.forest.to_dict(),
            "lexicon": {
                text: {"node_id": node_id, "details": [list(d) for d in details]}
                for text, (node_id, details) in sorted(self.lexicon().items())
            },
        }

    def write(self, directory: str | Path) -> dict[str, Path]:
        from relmatch.model import write_table

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "sources": directory / "sources.csv",
            "targets": directory / "targets.csv",
            "truth": directory / "truth.json",
            "taxonomy": directory / "taxonomy.json",
        }
        write_table(self.sources, paths["sources"])
        write_table(self.targets, paths["targets"])
        write_truth(self.truth, paths["truth"])
        paths["taxonomy"].write_text(
            json.dumps(self.taxonomy_document(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
        return paths


def generate_taxonomy(seed: int, params: GeneratorParams | None = None) -> Corpus:
    params = params or GeneratorParams()
    params.validate()
    rng = random.Random(seed)
    vocab = _load_vocabulary()
    concept_pool = [list(g) for g in vocab["concepts"]]
    part_pool = [list(g) for g in vocab["parts"]]
    rng.shuffle(concept_pool)
    rng.shuffle(part_pool)
    slot_order = list(vocab["slots"])
    slot_values = {slot: list(values) for slot, values in vocab["slots"].items()}

    def take(pool: list[list[str]], counter: list[int]) -> list[str]:
        i = counter[0]
        counter[0] += 1
        group = pool[i % len(pool)]
        if i < len(pool):
            return group
        lap = i // len(pool) + 1
        return [f"{word} mark {lap}" for word in group]

    concept_i, part_i = [0], [0]
    nodes: list[TaxonomyNode] = []

    def add_concept(parent: TaxonomyNode | None, level: int) -> TaxonomyNode:
        forms = take(concept_pool, concept_i)
        node = TaxonomyNode(f"n{len(nodes):03d}", forms[0], parent.node_id if parent else None, surface_forms=forms)
        nodes.append(node)
        inherited = set()
        cur = parent
        while cur is not None:
            inherited.update(slot for slot, _ in cur.detail_slots)
            cur = next((n for n in nodes if n.node_id == cur.parent), None)
        free = [s for s in slot_order if s not in inherited]
        wanted = 2 if parent is None else (1 if level == 1 else 0)
        for slot in rng.sample(free, min(wanted, len(free))):
            node.detail_slots.append((slot, list(slot_values[slot])))
        node.detail_slots.sort(key=lambda sv: slot_order.index(sv[0]))
        if level < params.tree_depth - 1:
            for _ in range(params.max_parts and rng.randint(1, params.max_parts)):
                part_forms = take(part_pool, part_i)
                part = TaxonomyNode(
                    f"n{len(nodes):03d}", part_forms[0], None, is_part=True,
                    surface_forms=part_forms, part_of=node.node_id,
                )
                nodes.append(part)
                node.parts.append(part.node_id)
            for _ in range(params.branching):
                add_concept(node, level + 1)
        return node

    for _ in range(params.roots):
        add_concept(None, 0)
    forest = Forest(nodes, slot_order, slot_values)

    lexicon: dict[str, tuple[str, tuple[tuple[str, str], ...]]] = {}
    vocab_slots = vocab["slots"]

    def render(node_id: str, details: tuple[tuple[str, str], ...], canonical: bool) -> str:
        node = forest.node(node_id)
        words = []
        for slot, value in sorted(details, key=lambda sv: slot_order.index(sv[0])):
            forms = vocab_slots[slot][value]
            words.append(forms[0] if canonical or rng.random() >= params.synonym_rate else rng.choice(forms[1:]))
        forms = node.surface_forms
        noun = forms[0] if canonical or rng.random() >= params.synonym_rate else rng.choice(forms[1:])
        return " ".join([*words, noun])

    def make_entity(prefix: str, number: int, node_id: str) -> Entity:
        details = []
        for slot, values in forest.slots_for(node_id):
            if rng.random() < params.detail_rate:
                details.append((slot, rng.choice(values)))
        details_t = tuple(sorted(details, key=lambda sv: slot_order.index(sv[0])))
        text = render(node_id, details_t, canonical=False)
        if lexicon.get(text, (node_id, details_t)) != (node_id, details_t):
            text = render(node_id, details_t, canonical=True)
            if lexicon.get(text, (node_id, details_t)) != (node_id, details_t):
                raise ValueError(f"surface form collision on {text!r}")
        lexicon[text] = (node_id, details_t)
        return Entity(f"{prefix}{number:04d}", node_id, details_t, text)

    concepts = forest.concepts()
    parts = forest.part_nodes()
    sources = [make_entity("s", i + 1, rng.choice(concepts)) for i in range(params.sources_count)]
    targets = []
    for i in range(params.targets_count):
        pool = parts if parts and rng.random() < params.part_target_rate else concepts
        targets.append(make_entity("t", i + 1, rng.choice(pool)))

    truth = {
        (rel, s.id, t.id)
        for s in sources
        for t in targets
        for rel in relations_between(forest, s, t)
    }

    def table(name: str, ents: list[Entity]) -> EntityTable:
        return EntityTable(name, SCHEMA, tuple(EntityRecord(e.id, ((ATTRIBUTE, e.text),)) for e in ents))

    return Corpus(
        sources=table("sources", sources),
        targets=table("targets", targets),
        truth=truth,
        forest=forest,
        entities={e.id: e for e in [*sources, *targets]},
        params=params,
        seed=seed,
    )


# -- ground truth files ------------------------------------------------------


def write_truth(truth: Iterable[Triple], path: str | Path) -> None:
    triples = sorted(truth)
    Path(path).write_text(
        json.dumps({"triples": [list(t) for t in triples]}, indent=0) + "\n", encoding="utf-8"
    )


def load_truth(path: str | Path) -> set[Triple]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return {(str(r), str(s), str(t)) for r, s, t in data["triples"]}


# -- mock embedder -----------------------------------------------------------

TOP_LEVEL_WEIGHT = 2.0
DETAIL_WEIGHT = 0.2
NOISE = 0.01
_GRID = 2.0**15


class TaxonomyEmbedder:
    """Structure-aware embedding for synthetic entities.

    Layout: one block per tree level holding a one-hot of the node's position
    among its siblings (scaled by a level weight that halves with depth), then
    one block per detail slot holding a one-hot of the filled value, then
    seeded per-text noise. Part nodes embed one level below their owner.
    Output is rounded to a 2**-15 grid so distance arithmetic is exact.
    """

    def __init__(self, forest: Forest, seed: int = 0) -> None:
        self.forest = forest
        self.seed = seed
        self._position: dict[str, int] = {}
        children: dict[str | None, list[str]] = {}
        for nid, node in forest.nodes.items():
            owner = node.part_of if node.is_part else node.parent
            children.setdefault(owner, []).append(nid)
        for siblings in children.values():
            for pos, nid in enumerate(sorted(siblings)):
                self._position[nid] = pos
        self._depth = max(len(self._path(nid)) for nid in forest.nodes)
        self._level_width = [
            max((self._position[nid] + 1 for nid in forest.nodes if len(self._path(nid)) > lvl), default=1)
            for lvl in range(self._depth)
        ]
        self._level_offset = np.cumsum([0, *self._level_width]).tolist()
        base = self._level_offset[-1]
        self._slot_offset = {}
        for slot in forest.slot_order:
            self._slot_offset[slot] = base
            base += len(forest.slot_values[slot])
        self.dimension = base

    def _path(self, node_id: str) -> list[str]:
        node = self.forest.node(node_id)
        if node.is_part and node.part_of is not None:
            return [*self._path(node.part_of), node_id]
        return self.forest.lineage(node_id)

    def embed_entity(self, node_id: str, details: Iterable[tuple[str, str]], text: str) -> np.ndarray:
        if node_id not in self.forest:
            raise UnknownNode(f"unknown taxonomy node {node_id!r}")
        vec = np.zeros(self.dimension)
        for level, nid in enumerate(self._path(node_id)):
            weight = TOP_LEVEL_WEIGHT / 2**level
            vec[self._level_offset[level] + self._position[nid]] = weight
        for slot, value in details:
            vec[self._slot_offset[slot] + self.forest.slot_values[slot].index(value)] = DETAIL_WEIGHT
        digest = hashlib.sha256(f"{self.seed}\0{text}".encode("utf-8")).digest()
        noise_rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec += noise_rng.uniform(-NOISE, NOISE, self.dimension)
        return np.round(vec * _GRID) / _GRID


def mock_embed(entity: Entity, forest: Forest, seed: int = 0) -> np.ndarray:
    return TaxonomyEmbedder(forest, seed).embed_entity(entity.node_id, entity.details, entity.text)


class TaxonomyProvider:
    """Embedding provider that looks serialized entity text up in a corpus lexicon."""

    def __init__(
        self,
        forest: Forest,
        lexicon: Mapping[str, tuple[str, tuple[tuple[str, str], ...]]],
        seed: int = 0,
        digest: str = "",
    ) -> None:
        self.embedder = TaxonomyEmbedder(forest, seed)
        self.lexicon = dict(lexicon)
        self.dimension = self.embedder.dimension
        self.id = f"taxonomy:{digest or 'inline'}:s{seed}"
        self.calls = 0

    @classmethod
    def from_corpus(cls, corpus: Corpus, seed: int = 0) -> TaxonomyProvider:
        return cls(corpus.forest, corpus.lexicon(), seed)

    @classmethod
    def from_file(cls, path: str | Path, seed: int = 0) -> TaxonomyProvider:
        raw = Path(path).read_bytes()
        doc = json.loads(raw)
        lexicon = {
            text: (entry["node_id"], tuple((s, v) for s, v in entry["details"]))
            for text, entry in doc["lexicon"].items()
        }
        digest = hashlib.sha256(raw).hexdigest()[:16]
        return cls(Forest.from_dict(doc["forest"]), lexicon, seed, digest)

    def embed_text(self, text: str) -> np.ndarray:
        self.calls += 1
        try:
            node_id, details = self.lexicon[text]
        except KeyError:
            raise UnknownNode(f"text {text!r} is not in the taxonomy lexicon") from None
        return self.embedder.embed_entity(node_id, details, text)


# -- oracle backend ----------------------------------------------------------


class OracleBackend:
    """Answers from ground truth using the request's structured fields only."""

    def __init__(self, truth: Iterable[Triple], aliases: Mapping[str, str] | None = None, name: str = "") -> None:
        self.truth = frozenset(truth)
        self.aliases = dict(aliases or {})
        if not name:
            h = hashlib.sha256()
            for triple in sorted(self.truth):
                h.update("\0".join(triple).encode("utf-8") + b"\n")
            for alias, target in sorted(self.aliases.items()):
                h.update(f"alias {alias}={target}\n".encode("utf-8"))
            name = h.hexdigest()[:16]
        self.model_hint = f"oracle:{name}"
        self.calls = 0

    def complete(self, request) -> BackendResponse:
        self.calls += 1
        return oracle_classify(request, self.truth, self.aliases)


def oracle_classify(request, truth: frozenset[Triple] | set[Triple], aliases: Mapping[str, str] | None = None) -> BackendResponse:
    relation_id = (aliases or {}).get(request.relation_id, request.relation_id)
    lines = [f"Input entity {request.source_id}; relation {request.relation_id}."]
    decisions = []
    for ordinal, cid in enumerate(request.candidate_ids, start=1):
        holds = (relation_id, request.source_id, cid) in truth
        decisions.append(holds)
        verb = "has" if holds else "does not have"
        lines.append(f"{ordinal}. {cid} {verb} the relation to the input entity.")
    lines.append("VERDICTS:")
    lines.extend(f"{cid}: {'YES' if d else 'NO'}" for cid, d in zip(request.candidate_ids, decisions))
    return BackendResponse("\n".join(lines) + "\n", Provenance.ORACLE)
