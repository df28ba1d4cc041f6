"""SELECT queries over the store: basic graph patterns, numeric filters, LIMIT.

Grammar: ``SELECT ?v+ WHERE { pattern (. pattern)* } (FILTER guard)* (LIMIT n)?``
with the same term and guard lexemes as the rule grammar.  Evaluation is a
natural join over the patterns with binding propagation; rows are distinct
and deterministically ordered by the serialized terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from typing import Mapping

from .lexer import GrammarError, TokenCursor, read_pattern, tokenize
from .model import Term, numeric_value, serialize_term
from .rules import Guard
from .store import InvalidPattern, MatchResult, Store, TriplePattern, substitute


class QuerySyntaxError(GrammarError):
    """Query text does not conform to the grammar."""


class UnsafeQuery(ValueError):
    """A selected or filtered variable does not occur in any pattern."""

    def __init__(self, variable: str):
        super().__init__(f"variable ?{variable} does not occur in any pattern")
        self.variable = variable


@dataclass(frozen=True)
class Query:
    select: tuple[str, ...]
    patterns: tuple[TriplePattern, ...]
    filters: tuple[Guard, ...]
    limit: int | None = None

    def __post_init__(self) -> None:
        if not self.select or not self.patterns:
            raise ValueError("select list and patterns must be nonempty")
        if self.limit is not None and self.limit <= 0:
            raise ValueError("limit must be positive")

    def pattern_variables(self) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for p in self.patterns:
            out |= p.variables()
        return out


@dataclass
class ResultTable:
    columns: tuple[str, ...]
    rows: list[tuple[Term, ...]]


def check_query_safety(query: Query, presumed_bound: frozenset[str] = frozenset()) -> None:
    """Raise UnsafeQuery for the first select/filter variable bound nowhere."""
    bound = query.pattern_variables() | presumed_bound
    for name in query.select:
        if name not in bound:
            raise UnsafeQuery(name)
    for guard in query.filters:
        if guard.variable not in bound:
            raise UnsafeQuery(guard.variable)


def parse_query(text: str, presumed_bound: frozenset[str] = frozenset()) -> Query:
    """Parse and safety-check a query.

    presumed_bound names variables supplied externally at evaluation time
    (composition pipelines bind trigger variables this way); they count as
    bound for the safety check.
    """
    try:
        cursor = TokenCursor(tokenize(text))
        cursor.expect_keyword("SELECT")
        select = [cursor.expect("VAR").text]
        while cursor.peek().kind == "VAR":
            select.append(cursor.next().text)
        cursor.expect_keyword("WHERE")
        cursor.expect("LBRACE")
        patterns = [read_pattern(cursor)]
        while cursor.peek().kind == "DOT":
            cursor.next()
            patterns.append(read_pattern(cursor))
        cursor.expect("RBRACE")
        filters = []
        while cursor.at_keyword("FILTER"):
            cursor.next()
            var = cursor.expect("VAR")
            op = cursor.expect("OP")
            num = cursor.expect("NUMBER")
            filters.append(Guard(var.text, op.text, Fraction(Decimal(num.text))))
        limit = None
        if cursor.at_keyword("LIMIT"):
            cursor.next()
            num = cursor.expect("NUMBER")
            if not num.text.isdigit() or int(num.text) <= 0:
                raise cursor.error(num, "LIMIT must be a positive integer")
            limit = int(num.text)
        eof = cursor.peek()
        if eof.kind != "EOF":
            raise cursor.error(eof, f"unexpected {eof.text!r}")
    except QuerySyntaxError:
        raise
    except GrammarError as exc:
        raise QuerySyntaxError(exc.line, exc.col, exc.reason) from None
    query = Query(tuple(select), tuple(patterns), tuple(filters), limit)
    check_query_safety(query, presumed_bound)
    return query


def _row_key(row: tuple[Term, ...]) -> tuple[str, ...]:
    return tuple(serialize_term(t) for t in row)


def _matches(store: Store, pattern: TriplePattern, binding: dict[str, Term]) -> list[MatchResult]:
    try:
        bound = substitute(pattern, binding)
    except InvalidPattern:
        return []  # a literal landed in the predicate slot: matches nothing
    return store.match(bound)


def evaluate_query(
    query: Query,
    store: Store,
    bindings: Mapping[str, Term] | None = None,
) -> ResultTable:
    """Distinct satisfying rows, sorted by serialized terms, then truncated.

    Filters run after the join; a filter over a non-numeric binding
    excludes that row.  `bindings` pre-binds variables before evaluation.
    """
    seed: dict[str, Term] = dict(bindings) if bindings else {}
    patterns = list(query.patterns)
    if patterns:
        # seed the join with the currently cheapest pattern
        counts = [len(_matches(store, p, seed)) for p in patterns]
        first = counts.index(min(counts))
        patterns.insert(0, patterns.pop(first))
    partial: list[dict[str, Term]] = [seed]
    for pattern in patterns:
        extended: list[dict[str, Term]] = []
        for b in partial:
            for _, mb in _matches(store, pattern, b):
                extended.append({**b, **mb})
        partial = extended
        if not partial:
            break
    rows: set[tuple[Term, ...]] = set()
    for b in partial:
        ok = True
        for guard in query.filters:
            value = numeric_value(b[guard.variable])
            if value is None or not guard.holds(value):
                ok = False
                break
        if ok:
            rows.add(tuple(b[name] for name in query.select))
    ordered = sorted(rows, key=_row_key)
    if query.limit is not None:
        ordered = ordered[: query.limit]
    return ResultTable(tuple(query.select), ordered)
