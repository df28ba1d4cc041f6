"""In-memory indexed triple store with provenance tags and IRI aliasing.

Set semantics throughout: a triple is stored at most once and the first
provenance wins, which makes replays idempotent.  IRI equivalences
(predicate m3:equivalentTo) are folded into a union-find whose canonical
representative is the lexicographically smallest IRI of the class; terms
are canonicalized on the way in, so matching never chases aliases.

Concurrency: single writer, any number of readers.  A re-entrant lock
guards every operation, which trivially gives readers a consistent
snapshot at desk scale.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Union

from .model import (
    Iri,
    Term,
    Triple,
    make_iri,
    parse_triples,
)

M3_EQUIVALENT_TO = make_iri("m3:equivalentTo")

_VARIABLE_RE = re.compile(r"[A-Za-z0-9_]+\Z")


class InvalidProvenance(ValueError):
    """Provenance id fields must be nonempty."""


class InvalidPattern(ValueError):
    """A concrete predicate position must hold an IRI."""


@dataclass(frozen=True)
class Asserted:
    """Triple stated by a device; source is the device IRI text."""

    source: str

    def __post_init__(self) -> None:
        if not self.source:
            raise InvalidProvenance("empty source")


@dataclass(frozen=True)
class Inferred:
    """Triple produced by a rule."""

    rule_id: str

    def __post_init__(self) -> None:
        if not self.rule_id:
            raise InvalidProvenance("empty rule_id")


@dataclass(frozen=True)
class Loaded:
    """Triple loaded from a knowledge pack file."""

    pack_id: str

    def __post_init__(self) -> None:
        if not self.pack_id:
            raise InvalidProvenance("empty pack_id")


Provenance = Union[Asserted, Inferred, Loaded]

#: retract() accepts either a concrete Provenance or one of these classes.
ProvenanceSelector = Union[Provenance, type]


@dataclass(frozen=True)
class Variable:
    name: str

    def __post_init__(self) -> None:
        if not _VARIABLE_RE.match(self.name):
            raise InvalidPattern(f"bad variable name {self.name!r}")


PatternTerm = Union[Term, Variable]


@dataclass(frozen=True)
class TriplePattern:
    subject: PatternTerm
    predicate: PatternTerm
    object: PatternTerm

    def __post_init__(self) -> None:
        if not isinstance(self.predicate, (Variable, Iri)):
            raise InvalidPattern("concrete predicate must be an IRI")

    def positions(self) -> tuple[PatternTerm, PatternTerm, PatternTerm]:
        return (self.subject, self.predicate, self.object)

    def variables(self) -> frozenset[str]:
        return frozenset(
            p.name for p in self.positions() if isinstance(p, Variable)
        )

    def concrete_count(self) -> int:
        return sum(1 for p in self.positions() if not isinstance(p, Variable))


class MatchResult(NamedTuple):
    triple: Triple
    bindings: dict[str, Term]


def unify(
    pattern: TriplePattern,
    triple: Triple,
    bindings: dict[str, Term] | None = None,
) -> dict[str, Term] | None:
    """Bindings extending `bindings` that make pattern equal triple, or None."""
    out = dict(bindings) if bindings else {}
    for pat, term in zip(pattern.positions(), (triple.subject, triple.predicate, triple.object)):
        if isinstance(pat, Variable):
            bound = out.get(pat.name)
            if bound is None:
                out[pat.name] = term
            elif bound != term:
                return None
        elif pat != term:
            return None
    return out


def substitute(pattern: TriplePattern, bindings: dict[str, Term]) -> TriplePattern:
    """Replace bound variables with their terms; unbound variables stay."""

    def sub(p: PatternTerm) -> PatternTerm:
        if isinstance(p, Variable) and p.name in bindings:
            return bindings[p.name]
        return p

    return TriplePattern(sub(pattern.subject), sub(pattern.predicate), sub(pattern.object))


def pattern_to_triple(pattern: TriplePattern) -> Triple:
    """A fully concrete pattern as a triple; raises if a variable remains."""
    s, p, o = pattern.positions()
    if isinstance(s, Variable) or isinstance(p, Variable) or isinstance(o, Variable):
        raise InvalidPattern("pattern still contains variables")
    return Triple(s, p, o)


class Store:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._triples: dict[Triple, Provenance] = {}
        self._by_subject: dict[Term, dict[Triple, None]] = {}
        self._by_predicate: dict[Term, dict[Triple, None]] = {}
        self._by_object: dict[Term, dict[Triple, None]] = {}
        self._alias_parent: dict[Iri, Iri] = {}

    def __len__(self) -> int:
        with self._lock:
            return len(self._triples)

    def __contains__(self, triple: Triple) -> bool:
        with self._lock:
            return triple in self._triples

    def __iter__(self) -> Iterator[Triple]:
        with self._lock:
            return iter(list(self._triples))

    def provenance(self, triple: Triple) -> Provenance | None:
        with self._lock:
            return self._triples.get(triple)

    def snapshot(self) -> dict[Triple, Provenance]:
        """Insertion-ordered copy of the (triple, provenance) map."""
        with self._lock:
            return dict(self._triples)

    # -- aliases -----------------------------------------------------------

    def resolve_alias(self, term: Term) -> Term:
        """Canonical representative of the term's equivalence class.

        Identity for non-IRIs and for IRIs with no recorded equivalence.
        Idempotent by construction (the canonical element maps to itself).
        """
        if not isinstance(term, Iri):
            return term
        with self._lock:
            cur = term
            while True:
                parent = self._alias_parent.get(cur)
                if parent is None or parent == cur:
                    return cur
                cur = parent

    def _union(self, a: Iri, b: Iri) -> None:
        ra = self.resolve_alias(a)
        rb = self.resolve_alias(b)
        if ra == rb:
            return
        # smaller IRI becomes the root, so the root is always the class minimum
        root, child = (ra, rb) if ra.value < rb.value else (rb, ra)
        self._alias_parent[child] = root
        # flatten both entry points onto the new root
        for node in (a, b):
            cur = node
            while cur != root:
                nxt = self._alias_parent.get(cur, root)
                self._alias_parent[cur] = root
                if nxt == cur:
                    break
                cur = nxt

    def _rebuild_aliases(self) -> None:
        self._alias_parent = {}
        for triple in self._triples:
            if triple.predicate == M3_EQUIVALENT_TO and isinstance(
                triple.subject, Iri
            ) and isinstance(triple.object, Iri):
                self._union(triple.subject, triple.object)

    def _canonical_triple(self, triple: Triple) -> Triple:
        # equivalence statements are stored verbatim so the alias map can be
        # rebuilt from them after a retract
        if triple.predicate == M3_EQUIVALENT_TO:
            return triple
        return Triple(
            self.resolve_alias(triple.subject),
            self.resolve_alias(triple.predicate),
            self.resolve_alias(triple.object),
        )

    # -- mutation ----------------------------------------------------------

    def insert(self, triple: Triple, prov: Provenance) -> bool:
        """Insert with set semantics; True iff the triple was absent.

        Terms are alias-canonicalized on the way in.  Re-insertion keeps
        the original provenance (first write wins).
        """
        with self._lock:
            if (
                triple.predicate == M3_EQUIVALENT_TO
                and isinstance(triple.subject, Iri)
                and isinstance(triple.object, Iri)
            ):
                self._union(triple.subject, triple.object)
            t = self._canonical_triple(triple)
            if t in self._triples:
                return False
            self._triples[t] = prov
            self._by_subject.setdefault(t.subject, {})[t] = None
            self._by_predicate.setdefault(t.predicate, {})[t] = None
            self._by_object.setdefault(t.object, {})[t] = None
            return True

    def retract(self, selector: ProvenanceSelector) -> int:
        """Remove all triples whose provenance matches; returns the count.

        The selector is a Provenance class (whole kind) or instance (exact).
        The alias map is rebuilt if any equivalence statement was removed.
        """
        if isinstance(selector, type):
            matches = lambda prov: isinstance(prov, selector)
        else:
            matches = lambda prov: prov == selector
        with self._lock:
            victims = [t for t, p in self._triples.items() if matches(p)]
            rebuild = False
            for t in victims:
                del self._triples[t]
                self._unindex(self._by_subject, t.subject, t)
                self._unindex(self._by_predicate, t.predicate, t)
                self._unindex(self._by_object, t.object, t)
                if t.predicate == M3_EQUIVALENT_TO:
                    rebuild = True
            if rebuild:
                self._rebuild_aliases()
            return len(victims)

    @staticmethod
    def _unindex(index: dict[Term, dict[Triple, None]], key: Term, t: Triple) -> None:
        bucket = index.get(key)
        if bucket is not None:
            bucket.pop(t, None)
            if not bucket:
                del index[key]

    def load_pack(self, document: str, pack_id: str) -> int:
        """Parse and insert a whole pack with Loaded provenance, all or nothing.

        Equivalence statements in the pack are applied to the alias map
        before any triple is inserted, so the pack's own data is stored in
        canonical form.  Returns the count of newly inserted triples.
        """
        parsed = parse_triples(document)  # raises before anything is inserted
        prov = Loaded(pack_id)
        with self._lock:
            for t in parsed:
                if (
                    t.predicate == M3_EQUIVALENT_TO
                    and isinstance(t.subject, Iri)
                    and isinstance(t.object, Iri)
                ):
                    self._union(t.subject, t.object)
            return sum(1 for t in parsed if self.insert(t, prov))

    # -- reads -------------------------------------------------------------

    def match(self, pattern: TriplePattern) -> list[MatchResult]:
        """All stored triples unifying with the pattern, with their bindings.

        Concrete pattern terms are alias-canonicalized first (mirroring
        insert), except on equivalence-statement lookups which match the
        verbatim stored form.  Result order follows insertion order of the
        surviving triples, hence is deterministic for a fixed store state.
        """
        with self._lock:
            if not (
                isinstance(pattern.predicate, Iri)
                and pattern.predicate == M3_EQUIVALENT_TO
            ):
                pattern = TriplePattern(
                    *(
                        p if isinstance(p, Variable) else self.resolve_alias(p)
                        for p in pattern.positions()
                    )
                )
            candidates = self._candidates(pattern)
            out: list[MatchResult] = []
            for t in candidates:
                b = unify(pattern, t)
                if b is not None:
                    out.append(MatchResult(t, b))
            return out

    def _candidates(self, pattern: TriplePattern) -> list[Triple]:
        if not isinstance(pattern.subject, Variable):
            return list(self._by_subject.get(pattern.subject, {}))
        if not isinstance(pattern.predicate, Variable):
            return list(self._by_predicate.get(pattern.predicate, {}))
        if not isinstance(pattern.object, Variable):
            return list(self._by_object.get(pattern.object, {}))
        return list(self._triples)
