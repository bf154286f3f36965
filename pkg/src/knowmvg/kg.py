"""Localization-oriented knowledge graph construction.

Entities are pulled from report/answer text by a pluggable provider, each
entity is resolved to localization descriptions through a knowledge client
(fixture directory or a small REST endpoint, cached on disk), and the result
is assembled into an entity -> description graph.
"""
from __future__ import annotations

import json
import logging
import os
import re
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

RELATION = "localized_in"
API_KEY_ENV = "KNOWMVG_KG_API_KEY"


class RetriableError(RuntimeError):
    """Transient failure; the same call may succeed later."""


class ProviderUnavailable(RetriableError):
    pass


class KnowledgeSourceError(RetriableError):
    pass


class GraphFormatError(ValueError):
    pass


class UnknownEntityWarning(UserWarning):
    pass


def normalize(text: str) -> str:
    text = re.sub(r"[^\w\s-]", " ", text.lower())
    return " ".join(text.split())


@dataclass(frozen=True)
class CorpusRecord:
    record_id: str
    question_text: str = ""
    answer_text: str = ""

    def __post_init__(self):
        if not (self.question_text or self.answer_text):
            raise ValueError(f"record {self.record_id!r} has no text")


@dataclass(frozen=True)
class LocalizationSet:
    entity: str
    descriptions: tuple[str, ...] = ()


class EntityProvider(Protocol):
    def extract(self, text: str) -> list[str]: ...


class LexiconProvider:
    """Deterministic whole-word matcher over a fixed term list.

    Matches are reported in order of first appearance in the text; longer
    terms win over their own sub-terms at the same position.
    """

    def __init__(self, terms: Iterable[str]):
        self.terms = sorted({normalize(t) for t in terms if normalize(t)}, key=lambda t: (-len(t), t))
        alternation = "|".join(re.escape(t) for t in self.terms)
        self._pattern = re.compile(rf"(?<![\w-])(?:{alternation})(?![\w-])") if self.terms else None

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "LexiconProvider":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line.strip() and not line.startswith("#"))

    def extract(self, text: str) -> list[str]:
        if not text or self._pattern is None:
            return []
        found = []
        for match in self._pattern.finditer(normalize(text)):
            if match.group(0) not in found:
                found.append(match.group(0))
        return found


class SpacyProvider:
    """Adapter for a spaCy/SciSpaCy pipeline; optional at runtime."""

    def __init__(self, model: str = "en_core_sci_sm"):
        try:
            import spacy  # noqa: F401
            self._nlp = spacy.load(model)
        except Exception as exc:  # ImportError or missing model
            raise ProviderUnavailable(f"spaCy model {model!r} unavailable: {exc}") from exc

    def extract(self, text: str) -> list[str]:
        found = []
        for ent in self._nlp(text).ents:
            norm = normalize(ent.text)
            if norm and norm not in found:
                found.append(norm)
        return found


def extract_entities(text: str, provider: EntityProvider) -> list[str]:
    """Normalized, deduplicated entity mentions in first-occurrence order."""
    if not text:
        return []
    out = []
    for ent in provider.extract(text):
        ent = normalize(ent)
        if ent and ent not in out:
            out.append(ent)
    return out


def entity_filename(entity: str) -> str:
    return urllib.parse.quote(entity, safe="") + ".json"


def _dedup(items: Iterable[str]) -> tuple[str, ...]:
    out: list[str] = []
    for item in items:
        item = " ".join(str(item).split())
        if item and item not in out:
            out.append(item)
    return tuple(out)


class KnowledgeClient:
    """Resolves entities to localization descriptions.

    Exactly one of ``fixture_dir`` / ``base_url`` is used as the source.
    With ``cache_dir`` set, every resolved entity is written there and later
    lookups of the same entity never touch the source.
    """

    def __init__(
        self,
        fixture_dir: str | os.PathLike | None = None,
        base_url: str | None = None,
        cache_dir: str | os.PathLike | None = None,
        api_key: str | None = None,
        timeout: float = 10.0,
        retries: int = 2,
        offline: bool = False,
    ):
        if (fixture_dir is None) == (base_url is None):
            raise ValueError("configure exactly one of fixture_dir or base_url")
        self.fixture_dir = Path(fixture_dir) if fixture_dir is not None else None
        self.base_url = base_url.rstrip("/") if base_url else None
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.retries = retries
        self.offline = offline
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, entity: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(entity, threading.Lock())

    def _read_cache(self, entity: str) -> list[str] | None:
        if self.cache_dir is None:
            return None
        path = self.cache_dir / entity_filename(entity)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _write_cache(self, entity: str, descriptions: Sequence[str]) -> None:
        if self.cache_dir is None:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(list(descriptions), fh)
        os.replace(tmp, self.cache_dir / entity_filename(entity))

    def _fetch_fixture(self, entity: str) -> list[str] | None:
        path = self.fixture_dir / entity_filename(entity)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise GraphFormatError(f"fixture {path.name}: expected a JSON array")
        return data

    def _fetch_remote(self, entity: str) -> list[str] | None:
        if self.offline:
            raise KnowledgeSourceError(f"network disabled and no cache entry for {entity!r}")
        url = f"{self.base_url}/localize?" + urllib.parse.urlencode({"entity": entity})
        headers = {"Accept": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(url, headers=headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode("utf-8"))
                if not isinstance(data, list):
                    raise GraphFormatError(f"{url}: expected a JSON array")
                return data
            except urllib.error.HTTPError as exc:
                if exc.code == 404:
                    return None
                last = exc
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                last = exc
            if attempt < self.retries:
                time.sleep(0.1 * 2**attempt)
        raise KnowledgeSourceError(f"lookup of {entity!r} failed: {last}")

    def lookup(self, entity: str) -> LocalizationSet:
        entity = normalize(entity)
        with self._lock(entity):
            cached = self._read_cache(entity)
            if cached is not None:
                return LocalizationSet(entity, _dedup(cached))
            if self.fixture_dir is not None:
                data = self._fetch_fixture(entity)
            else:
                data = self._fetch_remote(entity)
            if data is None:
                warnings.warn(f"no localization knowledge for {entity!r}", UnknownEntityWarning, stacklevel=2)
                return LocalizationSet(entity, ())
            descriptions = _dedup(data)
            self._write_cache(entity, descriptions)
            return LocalizationSet(entity, descriptions)


def lookup_localization(entity: str, client: KnowledgeClient) -> LocalizationSet:
    return client.lookup(entity)


@dataclass(frozen=True)
class Node:
    node_id: int
    text: str
    kind: str  # "entity" | "localization"


@dataclass(frozen=True)
class KnowledgeGraph:
    nodes: tuple[Node, ...]
    triples: tuple[tuple[int, str, int], ...]
    adjacency: np.ndarray = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        validate(self.nodes, self.triples)
        object.__setattr__(self, "adjacency", adjacency_from_triples(len(self.nodes), self.triples))
        self.adjacency.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def is_empty(self) -> bool:
        return not self.nodes

    @property
    def texts(self) -> list[str]:
        return [n.text for n in self.nodes]

    def degree(self, node_id: int) -> int:
        return int(self.adjacency[node_id].sum())

    def __eq__(self, other):
        return (
            isinstance(other, KnowledgeGraph)
            and self.nodes == other.nodes
            and self.triples == other.triples
            and np.array_equal(self.adjacency, other.adjacency)
        )

    __hash__ = None


def validate(nodes: Sequence[Node], triples: Sequence[tuple[int, str, int]]) -> None:
    for i, node in enumerate(nodes):
        if node.node_id != i:
            raise GraphFormatError(f"nodes[{i}].id: expected {i}, got {node.node_id}")
        if node.kind not in ("entity", "localization"):
            raise GraphFormatError(f"nodes[{i}].kind: unknown kind {node.kind!r}")
    n = len(nodes)
    for j, (h, _, t) in enumerate(triples):
        if not (0 <= h < n and 0 <= t < n):
            raise GraphFormatError(f"triples[{j}]: triple references unknown node")
        if nodes[h].kind != "entity" or nodes[t].kind != "localization":
            raise GraphFormatError(f"triples[{j}]: head must be an entity and tail a localization node")


def adjacency_from_triples(n: int, triples: Iterable[tuple[int, str, int]]) -> np.ndarray:
    adj = np.zeros((n, n), dtype=np.int8)
    for h, _, t in triples:
        adj[h, t] = adj[t, h] = 1
    return adj


def build_graph(
    corpus: Sequence[CorpusRecord],
    provider: EntityProvider,
    client: KnowledgeClient,
    max_workers: int = 1,
) -> KnowledgeGraph:
    if not corpus:
        raise ValueError("corpus is empty")
    ids = [r.record_id for r in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record_id in corpus")

    entities: list[str] = []
    for record in corpus:
        for text in (record.question_text, record.answer_text):
            for ent in extract_entities(text, provider):
                if ent not in entities:
                    entities.append(ent)
    if not entities:
        log.warning("no entities extracted; knowledge prompting will be skipped")
        return KnowledgeGraph((), ())

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            lookups = list(pool.map(client.lookup, entities))
    else:
        lookups = [client.lookup(e) for e in entities]

    nodes = [Node(i, e, "entity") for i, e in enumerate(entities)]
    loc_ids: dict[str, int] = {}
    triples = []
    for head, loc in enumerate(lookups):
        for desc in loc.descriptions:
            if desc not in loc_ids:
                loc_ids[desc] = len(nodes)
                nodes.append(Node(len(nodes), desc, "localization"))
            triples.append((head, RELATION, loc_ids[desc]))
    return KnowledgeGraph(tuple(nodes), tuple(triples))


def save_graph(kg: KnowledgeGraph, path: str | os.PathLike) -> None:
    payload = {
        "nodes": [{"id": n.node_id, "text": n.text, "kind": n.kind} for n in kg.nodes],
        "triples": [[h, r, t] for h, r, t in kg.triples],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_graph(path: str | os.PathLike) -> KnowledgeGraph:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise GraphFormatError("top level must be an object")
    for key in ("nodes", "triples"):
        if not isinstance(payload.get(key), list):
            raise GraphFormatError(f"{key}: missing or not an array")
    nodes = []
    for i, raw in enumerate(payload["nodes"]):
        for key, typ in (("id", int), ("text", str), ("kind", str)):
            if not isinstance(raw, dict) or not isinstance(raw.get(key), typ):
                raise GraphFormatError(f"nodes[{i}].{key}: missing or wrong type")
        nodes.append(Node(raw["id"], raw["text"], raw["kind"]))
    triples = []
    for j, raw in enumerate(payload["triples"]):
        if not (isinstance(raw, list) and len(raw) == 3 and isinstance(raw[0], int)
                and isinstance(raw[1], str) and isinstance(raw[2], int)):
            raise GraphFormatError(f"triples[{j}]: expected [head, relation, tail]")
        triples.append(tuple(raw))
    return KnowledgeGraph(tuple(nodes), tuple(triples))


def read_corpus(path: str | os.PathLike) -> list[CorpusRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            raw = json.loads(line)
            records.append(CorpusRecord(str(raw["id"]), raw.get("question", ""), raw.get("answer", "")))
    return records
