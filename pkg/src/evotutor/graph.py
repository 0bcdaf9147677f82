"""Concept graph with cross-disciplinary link edges and misconception bug rules.

The graph is the ground truth for three things: the mastery vector is indexed
by its concepts, interdisciplinary link attempts are checked against its
``cross_links``, and the "shadow graph" of misconception rules attaches a
sensitivity/resilience coefficient pair to host concepts.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class GraphSpecError(ValueError):
    """A graph document failed to parse or violates a structural invariant."""


@dataclass(frozen=True)
class ConceptNode:
    id: int
    name: str
    discipline: str
    prerequisites: tuple[int, ...] = ()


@dataclass(frozen=True)
class MisconceptionRule:
    """A bug rule attached to a host concept.

    ``beta_ambiguity`` scales how strongly ambiguous instruction activates the
    rule; ``gamma_resilience`` scales how strongly host mastery suppresses it.
    """

    id: int
    host_concept: int
    description: str
    beta_ambiguity: float
    gamma_resilience: float


@dataclass(frozen=True)
class KnowledgeGraph:
    concepts: tuple[ConceptNode, ...]
    cross_links: frozenset[tuple[int, int]]
    misconceptions: tuple[MisconceptionRule, ...]

    def __post_init__(self) -> None:
        hosts = np.array([r.host_concept for r in self.misconceptions], dtype=np.int64)
        betas = np.array([r.beta_ambiguity for r in self.misconceptions], dtype=np.float64)
        gammas = np.array([r.gamma_resilience for r in self.misconceptions], dtype=np.float64)
        object.__setattr__(self, "_rule_hosts", hosts)
        object.__setattr__(self, "_rule_beta", betas)
        object.__setattr__(self, "_rule_gamma", gammas)
        by_host: dict[int, list[int]] = {}
        for rule in self.misconceptions:
            by_host.setdefault(rule.host_concept, []).append(rule.id)
        object.__setattr__(
            self, "_rules_by_host", {h: tuple(ids) for h, ids in by_host.items()}
        )

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    @property
    def n_rules(self) -> int:
        return len(self.misconceptions)

    @property
    def rule_hosts(self) -> np.ndarray:
        return self._rule_hosts  # type: ignore[attr-defined]

    @property
    def rule_beta(self) -> np.ndarray:
        return self._rule_beta  # type: ignore[attr-defined]

    @property
    def rule_gamma(self) -> np.ndarray:
        return self._rule_gamma  # type: ignore[attr-defined]

    def rules_on(self, concept_id: int) -> tuple[int, ...]:
        """Ids of the misconception rules hosted on ``concept_id``."""
        return self._rules_by_host.get(concept_id, ())  # type: ignore[attr-defined]


def _check_ids_dense(ids: list[int], kind: str) -> None:
    if sorted(ids) != list(range(len(ids))):
        raise GraphSpecError(f"{kind} ids must be dense 0..{len(ids) - 1}, got {sorted(ids)}")


def _check_prerequisite_dag(concepts: list[ConceptNode]) -> None:
    # Kahn's algorithm over prerequisite -> concept edges.
    n = len(concepts)
    indegree = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for node in concepts:
        for pre in node.prerequisites:
            children[pre].append(node.id)
            indegree[node.id] += 1
    queue = [i for i in range(n) if indegree[i] == 0]
    seen = 0
    while queue:
        i = queue.pop()
        seen += 1
        for child in children[i]:
            indegree[child] -= 1
            if indegree[child] == 0:
                queue.append(child)
    if seen != n:
        raise GraphSpecError("prerequisite cycle")


def _validated_graph(
    concepts: list[ConceptNode],
    links: list[tuple[int, int]],
    rules: list[MisconceptionRule],
) -> KnowledgeGraph:
    if len(concepts) == 0:
        raise GraphSpecError("graph has no concepts")
    _check_ids_dense([c.id for c in concepts], "concept")
    concepts = sorted(concepts, key=lambda c: c.id)
    n = len(concepts)
    for node in concepts:
        if not node.discipline:
            raise GraphSpecError(f"concept {node.id} has an empty discipline tag")
        for pre in node.prerequisites:
            if not 0 <= pre < n:
                raise GraphSpecError(f"dangling id {pre} in prerequisites of concept {node.id}")
        if node.id in node.prerequisites:
            raise GraphSpecError("prerequisite cycle")
    _check_prerequisite_dag(concepts)

    normalized: set[tuple[int, int]] = set()
    for a, b in links:
        if not (0 <= a < n and 0 <= b < n):
            raise GraphSpecError(f"dangling id in cross_link ({a}, {b})")
        if a == b:
            raise GraphSpecError(f"self link on concept {a}")
        if concepts[a].discipline == concepts[b].discipline:
            raise GraphSpecError(
                f"same-discipline link ({a}, {b}): both '{concepts[a].discipline}'"
            )
        normalized.add((min(a, b), max(a, b)))

    _check_ids_dense([r.id for r in rules], "misconception")
    rules = sorted(rules, key=lambda r: r.id)
    for rule in rules:
        if not 0 <= rule.host_concept < n:
            raise GraphSpecError(f"dangling host {rule.host_concept} in misconception {rule.id}")
        for name, value in (
            ("beta", rule.beta_ambiguity),
            ("gamma", rule.gamma_resilience),
        ):
            if not np.isfinite(value) or value < 0:
                raise GraphSpecError(
                    f"misconception {rule.id}: {name} must be finite and non-negative"
                )

    return KnowledgeGraph(
        concepts=tuple(concepts),
        cross_links=frozenset(normalized),
        misconceptions=tuple(rules),
    )


def graph_from_dict(doc: dict) -> KnowledgeGraph:
    """Build a validated graph from a parsed document dictionary."""
    header = doc.get("graph", {})
    version = header.get("version", 1)
    if version != 1:
        raise GraphSpecError(f"unsupported graph document version {version!r}")
    try:
        concepts = [
            ConceptNode(
                id=int(c["id"]),
                name=str(c["name"]),
                discipline=str(c["discipline"]),
                prerequisites=tuple(int(p) for p in c.get("prerequisites", [])),
            )
            for c in doc.get("concept", [])
        ]
        links = [(int(e["pair"][0]), int(e["pair"][1])) for e in doc.get("link", [])]
        rules = [
            MisconceptionRule(
                id=int(m["id"]),
                host_concept=int(m["host"]),
                description=str(m.get("description", "")),
                beta_ambiguity=float(m["beta"]),
                gamma_resilience=float(m["gamma"]),
            )
            for m in doc.get("misconception", [])
        ]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise GraphSpecError(f"malformed graph document: {exc}") from exc
    return _validated_graph(concepts, links, rules)


def build_graph(text: str) -> KnowledgeGraph:
    """Parse a TOML graph document and return a validated graph."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise GraphSpecError(f"parse failure: {exc}") from exc
    return graph_from_dict(doc)


def load_graph(path: str | Path) -> KnowledgeGraph:
    return build_graph(Path(path).read_text(encoding="utf-8"))


def is_valid_link(graph: KnowledgeGraph, a: int, b: int) -> bool:
    """True iff the unordered pair {a, b} is a sanctioned cross-disciplinary link."""
    n = graph.n_concepts
    if not (0 <= a < n and 0 <= b < n):
        raise GraphSpecError(f"invalid concept id in link query ({a}, {b})")
    if a == b:
        return False
    return (min(a, b), max(a, b)) in graph.cross_links


def synth_graph(c: int, d: int, link_density: float, seed: int) -> KnowledgeGraph:
    """Generate a deterministic synthetic graph fixture.

    Concepts are assigned to ``d`` disciplines round-robin; prerequisites only
    point backwards so the DAG invariant holds by construction; cross links are
    sampled from the distinct-discipline pairs at the requested density.
    """
    if c < 2:
        raise GraphSpecError(f"need at least 2 concepts, got {c}")
    if d < 1:
        raise GraphSpecError(f"need at least 1 discipline, got {d}")
    if not 0.0 <= link_density <= 1.0:
        raise GraphSpecError(f"link_density must be in [0, 1], got {link_density}")
    rng = np.random.default_rng(seed)
    concepts = []
    for i in range(c):
        n_pre = int(rng.integers(0, min(i, 2) + 1))
        pres = tuple(sorted(int(j) for j in rng.choice(i, size=n_pre, replace=False))) if n_pre else ()
        concepts.append(
            ConceptNode(id=i, name=f"concept_{i}", discipline=f"disc{i % d}", prerequisites=pres)
        )
    links = []
    for a in range(c):
        for b in range(a + 1, c):
            if concepts[a].discipline != concepts[b].discipline and rng.random() < link_density:
                links.append((a, b))
    n_rules = max(1, c // 2)
    hosts = rng.integers(0, c, size=n_rules)
    rules = [
        MisconceptionRule(
            id=k,
            host_concept=int(hosts[k]),
            description=f"bug_rule_{k}",
            beta_ambiguity=float(rng.uniform(2.0, 6.0)),
            gamma_resilience=float(rng.uniform(2.0, 6.0)),
        )
        for k in range(n_rules)
    ]
    return _validated_graph(concepts, links, rules)
