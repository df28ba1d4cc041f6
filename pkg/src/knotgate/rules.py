"""Shareable if-then rule packs and naive forward chaining to fixpoint.

A rule joins its body patterns against the store, filters the resulting
bindings through numeric guards, and instantiates its head templates.
Safety (every head/guard variable bound in the body) guarantees that only
ground terms already in the finite store can appear in conclusions, so
chaining always terminates.

Chaining is round-based and naive: each round evaluates every rule against
the store as it stood when the round began, then commits the union of the
conclusions.  A round that commits nothing is the fixpoint.  This makes
round counts independent of rule order and keeps the engine easy to check
against a brute-force closure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction

from .lexer import GrammarError, TokenCursor, read_pattern, tokenize
from .model import InvalidTriple, Triple, numeric_value, serialize_term
from .store import InvalidPattern, Inferred, Store, TriplePattern, pattern_to_triple, substitute

log = logging.getLogger(__name__)

GUARD_OPS = ("<", "<=", ">", ">=", "=", "!=")


class RuleSyntaxError(GrammarError):
    """Rule-pack text does not conform to the grammar."""


class RuleSafetyError(ValueError):
    """A head or guard variable is not bound by the rule body."""

    def __init__(self, rule_id: str, variables: list[str]):
        super().__init__(f"rule {rule_id!r}: unbound variables {', '.join(variables)}")
        self.rule_id = rule_id
        self.variables = variables


@dataclass(frozen=True)
class Guard:
    """Numeric comparison applied to a bound variable."""

    variable: str
    op: str
    constant: Fraction

    def __post_init__(self) -> None:
        if self.op not in GUARD_OPS:
            raise ValueError(f"bad guard operator {self.op!r}")

    def holds(self, value: Fraction) -> bool:
        if self.op == "<":
            return value < self.constant
        if self.op == "<=":
            return value <= self.constant
        if self.op == ">":
            return value > self.constant
        if self.op == ">=":
            return value >= self.constant
        if self.op == "=":
            return value == self.constant
        return value != self.constant


@dataclass(frozen=True)
class Rule:
    id: str
    body: tuple[TriplePattern, ...]
    guards: tuple[Guard, ...]
    head: tuple[TriplePattern, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("empty rule id")
        if not self.body or not self.head:
            raise ValueError(f"rule {self.id!r}: body and head must be nonempty")

    def body_variables(self) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for p in self.body:
            out |= p.variables()
        return out


@dataclass(frozen=True)
class RulePack:
    pack_id: str
    domains: tuple[str, ...]
    rules: tuple[Rule, ...]

    def __post_init__(self) -> None:
        if not self.pack_id:
            raise ValueError("empty pack id")
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError(f"pack {self.pack_id!r}: duplicate rule ids")


@dataclass
class ChainStats:
    rounds: int
    derived: int
    per_rule: dict[str, int] = field(default_factory=dict)
    guard_type_errors: int = 0


def check_safety(rule: Rule) -> list[str]:
    """Head and guard variables not bound by the body, sorted; [] means safe."""
    bound = rule.body_variables()
    unbound: set[str] = set()
    for pattern in rule.head:
        unbound |= pattern.variables() - bound
    for guard in rule.guards:
        if guard.variable not in bound:
            unbound.add(guard.variable)
    return sorted(unbound)


# -- parsing ----------------------------------------------------------------


def _wrap_grammar_error(exc: GrammarError) -> RuleSyntaxError:
    err = RuleSyntaxError(exc.line, exc.col, exc.reason)
    return err


def _read_guard(cursor: TokenCursor) -> Guard:
    var = cursor.expect("VAR")
    op = cursor.expect("OP")
    num = cursor.expect("NUMBER")
    return Guard(var.text, op.text, Fraction(Decimal(num.text)))


def _read_rule(cursor: TokenCursor) -> Rule:
    cursor.expect_keyword("RULE")
    rid = cursor.expect("NAME")
    cursor.expect("COLON")
    cursor.expect_keyword("IF")
    body = [read_pattern(cursor)]
    while cursor.peek().kind == "DOT":
        cursor.next()
        body.append(read_pattern(cursor))
    guards = []
    while cursor.at_keyword("FILTER"):
        cursor.next()
        guards.append(_read_guard(cursor))
    cursor.expect_keyword("THEN")
    head = [read_pattern(cursor)]
    seen_final_dot = False
    while cursor.peek().kind == "DOT":
        cursor.next()
        nxt = cursor.peek()
        if nxt.kind == "EOF" or (nxt.kind == "NAME" and nxt.text == "RULE"):
            seen_final_dot = True
            break
        head.append(read_pattern(cursor))
        if cursor.peek().kind != "DOT":
            raise cursor.error(cursor.peek(), "expected '.' after head pattern")
    if not seen_final_dot:
        raise cursor.error(cursor.peek(), "rule must end with '.'")
    return Rule(rid.text, tuple(body), tuple(guards), tuple(head))


def parse_rulepack(text: str) -> RulePack:
    """Parse a rule pack, expand prefixes, and enforce safety on every rule.

    Raises RuleSyntaxError with a (line, column) position, or
    RuleSafetyError naming the offending rule and variables.
    """
    try:
        cursor = TokenCursor(tokenize(text))
        cursor.expect_keyword("PACK")
        pack_tok = cursor.peek()
        if pack_tok.kind != "NAME":
            raise cursor.error(pack_tok, "expected pack id")
        pack_id = cursor.next().text
        domains = []
        while cursor.at_keyword("DOMAIN"):
            cursor.next()
            domains.append(cursor.expect("NAME").text)
        rules = []
        while cursor.at_keyword("RULE"):
            rules.append(_read_rule(cursor))
        eof = cursor.peek()
        if eof.kind != "EOF":
            raise cursor.error(eof, f"unexpected {eof.text!r}")
    except RuleSyntaxError:
        raise
    except GrammarError as exc:
        raise _wrap_grammar_error(exc) from None
    for rule in rules:
        violations = check_safety(rule)
        if violations:
            raise RuleSafetyError(rule.id, violations)
    return RulePack(pack_id, tuple(domains), tuple(rules))


def parse_pattern(text: str) -> TriplePattern:
    """One standalone triple pattern in the rule grammar's term syntax."""
    try:
        cursor = TokenCursor(tokenize(text))
        pattern = read_pattern(cursor)
        eof = cursor.peek()
        if eof.kind != "EOF":
            raise cursor.error(eof, f"unexpected {eof.text!r}")
        return pattern
    except RuleSyntaxError:
        raise
    except GrammarError as exc:
        raise _wrap_grammar_error(exc) from None


# -- evaluation --------------------------------------------------------------


@dataclass
class RuleFire:
    triples: set[Triple]
    guard_type_errors: int = 0


def _join_body(rule: Rule, store: Store) -> list[dict]:
    bindings: list[dict] = [{}]
    for pattern in rule.body:
        extended: list[dict] = []
        for b in bindings:
            try:
                bound = substitute(pattern, b)
            except InvalidPattern:
                continue  # a literal landed in the predicate slot: matches nothing
            for _, mb in store.match(bound):
                extended.append({**b, **mb})
        bindings = extended
        if not bindings:
            break
    return bindings


def evaluate_rule(rule: Rule, store: Store) -> RuleFire:
    """Ground head instantiations for every body match passing all guards.

    Guards compare exact numeric values, so lexical form is irrelevant
    ("38.0" equals "38").  A guard variable bound to a non-numeric term
    skips that one binding and counts it as a guard type error.  A head
    instantiation that cannot form a triple (a literal in the subject or
    predicate slot) is skipped.
    """
    fire = RuleFire(set())
    for binding in _join_body(rule, store):
        ok = True
        for guard in rule.guards:
            value = numeric_value(binding[guard.variable])
            if value is None:
                fire.guard_type_errors += 1
                log.debug("rule %s: guard on non-numeric binding skipped", rule.id)
                ok = False
                break
            if not guard.holds(value):
                ok = False
                break
        if not ok:
            continue
        for template in rule.head:
            try:
                fire.triples.add(pattern_to_triple(substitute(template, binding)))
            except (InvalidTriple, InvalidPattern):
                log.debug("rule %s: structurally invalid head instantiation skipped", rule.id)
    return fire


def _triple_sort_key(t: Triple) -> tuple[str, str, str]:
    return (serialize_term(t.subject), serialize_term(t.predicate), serialize_term(t.object))


def forward_chain(store: Store, packs: list[RulePack]) -> ChainStats:
    """Run all rules to fixpoint, inserting conclusions as Inferred(rule_id).

    Every rule is evaluated against the store as of the start of the round;
    the round's conclusions are committed together afterwards.  per_rule
    counts the triples each rule newly added (first producer wins when two
    rules derive the same triple in one round); every rule id appears in
    the map.  rounds includes the final empty round, so rounds <= derived + 1.
    """
    rules: list[Rule] = [r for pack in packs for r in pack.rules]
    for rule in rules:
        violations = check_safety(rule)
        if violations:
            raise RuleSafetyError(rule.id, violations)
    stats = ChainStats(rounds=0, derived=0, per_rule={r.id: 0 for r in rules})
    while True:
        stats.rounds += 1
        pending: list[tuple[str, Triple]] = []
        for rule in rules:
            fire = evaluate_rule(rule, store)
            stats.guard_type_errors += fire.guard_type_errors
            pending.extend((rule.id, t) for t in sorted(fire.triples, key=_triple_sort_key))
        committed = 0
        for rule_id, triple in pending:
            if store.insert(triple, Inferred(rule_id)):
                stats.per_rule[rule_id] += 1
                stats.derived += 1
                committed += 1
        if committed == 0:
            break
    return stats
