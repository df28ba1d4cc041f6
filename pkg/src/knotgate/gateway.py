"""Protocol-facing ingestion pipeline and egress bridging.

Adapters (MQTT, CoAP, HTTP) decode device messages into readings and
submit them to a single FIFO queue; one worker consumes it sequentially,
so the store has exactly one writer and per-device observation sequences
follow arrival order.  Each ingest runs annotate -> insert -> chain ->
notify and either commits completely or leaves the store untouched.

Egress delivers envelopes to MQTT topics or webhooks with a fixed retry
budget; a failed delivery is recorded, never raised into the pipeline.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import urllib.request
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Callable, Union

from .annotation import Annotator, RawReading
from .model import Triple, triple_to_line
from .rules import ChainStats, RulePack, RuleSafetyError, check_safety, forward_chain
from .store import Asserted, Inferred, Store

log = logging.getLogger(__name__)

TRANSPORTS = frozenset({"mqtt", "coap", "http"})

RETRY_ATTEMPTS = 3
RETRY_SPACING_S = 0.2


class DecodeError(ValueError):
    """Payload is not a decodable reading."""


class BadTopic(ValueError):
    """Topic does not follow iot/{device_id}/{sensor_kind}."""


class InvalidTarget(ValueError):
    """Egress target is empty or malformed."""


@dataclass(frozen=True)
class InboundMessage:
    transport: str
    route: str
    payload: bytes
    received_at: int

    def __post_init__(self) -> None:
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if not self.payload:
            raise ValueError("empty payload")


@dataclass(frozen=True)
class MqttTopic:
    topic: str

    def __post_init__(self) -> None:
        if not self.topic or any(c.isspace() for c in self.topic):
            raise InvalidTarget(f"bad MQTT topic {self.topic!r}")


@dataclass(frozen=True)
class Webhook:
    url: str

    def __post_init__(self) -> None:
        if not self.url.startswith(("http://", "https://")):
            raise InvalidTarget(f"bad webhook URL {self.url!r}")


EgressTarget = Union[MqttTopic, Webhook]


@dataclass
class DeliveryRecord:
    target: EgressTarget
    ok: bool
    attempts: int
    error: str | None = None


@dataclass
class IngestReceipt:
    observation_iri: str
    triples_added: int
    derived: list[Triple]
    notifications_queued: int

    def to_json(self) -> dict:
        return {
            "observation_iri": self.observation_iri,
            "triples_added": self.triples_added,
            "derived": [triple_to_line(t) for t in self.derived],
            "notifications_queued": self.notifications_queued,
        }


@dataclass(frozen=True)
class DerivedContext:
    """What the notifier knows about one newly inferred fact."""

    rule_id: str
    observation_iri: str
    timestamp: int


#: A derived-fact hook returns the number of notifications it queued.
DerivedHook = Callable[[Triple, DerivedContext], int]


def now_ms() -> int:
    return int(time.time() * 1000)


def decode_reading(
    payload: bytes,
    fmt: str,
    received_at: int | None = None,
    route_hint: tuple[str, str] | None = None,
) -> RawReading:
    """Decode a JSON object or CSV line into a reading.

    JSON: {device_id, sensor_kind, value, unit, timestamp}.
    CSV:  device_id,sensor_kind,value,unit,timestamp.
    A missing timestamp falls back to received_at.  route_hint supplies
    device_id/sensor_kind parsed from an MQTT topic; payload fields win on
    conflict (the payload is authoritative, the topic is routing).
    """
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"bad encoding: {exc}") from None
    if fmt == "json":
        fields = _decode_json_fields(text)
    elif fmt == "csv":
        fields = _decode_csv_fields(text)
    else:
        raise DecodeError(f"unknown format {fmt!r}")
    if route_hint is not None:
        hint_device, hint_kind = route_hint
        for key, hint in (("device_id", hint_device), ("sensor_kind", hint_kind)):
            if key not in fields:
                fields[key] = hint
            elif fields[key] != hint:
                log.warning("payload %s=%r overrides topic %r", key, fields[key], hint)
    for key in ("device_id", "sensor_kind", "value", "unit"):
        if key not in fields:
            raise DecodeError(f"missing field {key!r}")
    if "timestamp" not in fields:
        if received_at is None:
            raise DecodeError("missing field 'timestamp'")
        fields["timestamp"] = received_at
    try:
        return RawReading(
            device_id=fields["device_id"],
            sensor_kind=fields["sensor_kind"],
            value=fields["value"],
            unit=fields["unit"],
            timestamp=fields["timestamp"],
        )
    except ValueError as exc:
        raise DecodeError(str(exc)) from None


def _decode_json_fields(text: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"bad JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise DecodeError("JSON payload must be an object")
    fields: dict = {}
    for key in ("device_id", "sensor_kind", "unit"):
        if key in obj:
            if not isinstance(obj[key], str):
                raise DecodeError(f"field {key!r} must be a string")
            fields[key] = obj[key]
    if "value" in obj:
        v = obj["value"]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DecodeError("field 'value' must be a number")
        fields["value"] = float(v)
    if "timestamp" in obj:
        ts = obj["timestamp"]
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise DecodeError("field 'timestamp' must be an integer")
        fields["timestamp"] = ts
    return fields


def _decode_csv_fields(text: str) -> dict:
    parts = [p.strip() for p in text.strip().split(",")]
    if len(parts) not in (4, 5):
        raise DecodeError(f"expected 4 or 5 CSV fields, got {len(parts)}")
    fields: dict = {
        "device_id": parts[0],
        "sensor_kind": parts[1],
        "unit": parts[3],
    }
    try:
        fields["value"] = float(parts[2])
    except ValueError:
        raise DecodeError(f"bad number {parts[2]!r}") from None
    if len(parts) == 5 and parts[4]:
        try:
            fields["timestamp"] = int(parts[4])
        except ValueError:
            raise DecodeError(f"bad timestamp {parts[4]!r}") from None
    return fields


def sniff_format(payload: bytes) -> str:
    """JSON when the payload starts with '{', CSV otherwise."""
    return "json" if payload.lstrip().startswith(b"{") else "csv"


def topic_to_route(topic: str) -> tuple[str, str]:
    """Split iot/{device_id}/{sensor_kind}; anything else is a BadTopic."""
    parts = topic.split("/")
    if len(parts) != 3 or parts[0] != "iot" or not parts[1] or not parts[2]:
        raise BadTopic(f"expected iot/{{device_id}}/{{sensor_kind}}, got {topic!r}")
    return parts[1], parts[2]


def fact_envelope(fact: Triple, ctx: DerivedContext) -> bytes:
    """The JSON envelope wrapping one derived fact for egress delivery."""
    return json.dumps(
        {
            "triple": triple_to_line(fact),
            "rule_id": ctx.rule_id,
            "observation_iri": ctx.observation_iri,
            "timestamp": ctx.timestamp,
        }
    ).encode("utf-8")


def _post_webhook(url: str, payload: bytes) -> int:
    req = urllib.request.Request(
        url, data=payload, headers={"Content-Type": "application/json"}, method="POST"
    )
    with urllib.request.urlopen(req, timeout=5) as resp:
        return resp.status


class Egress:
    """Delivers payload bytes to MQTT topics or webhooks with retries."""

    def __init__(
        self,
        mqtt_publish: Callable[[str, bytes], None] | None = None,
        http_post: Callable[[str, bytes], int] = _post_webhook,
        attempts: int = RETRY_ATTEMPTS,
        spacing_s: float = RETRY_SPACING_S,
    ):
        self.mqtt_publish = mqtt_publish
        self.http_post = http_post
        self.attempts = attempts
        self.spacing_s = spacing_s

    def deliver(self, target: EgressTarget, payload: bytes) -> DeliveryRecord:
        if isinstance(target, MqttTopic) and self.mqtt_publish is None:
            return DeliveryRecord(target, ok=False, attempts=0, error="no MQTT client configured")
        last_error = None
        for attempt in range(1, self.attempts + 1):
            try:
                if isinstance(target, MqttTopic):
                    self.mqtt_publish(target.topic, payload)
                else:
                    status = self.http_post(target.url, payload)
                    if not 200 <= status < 300:
                        raise RuntimeError(f"HTTP {status}")
                return DeliveryRecord(target, ok=True, attempts=attempt)
            except Exception as exc:  # delivery failures never propagate
                last_error = str(exc)
                log.warning("delivery to %s failed (attempt %d): %s", target, attempt, exc)
                if attempt < self.attempts:
                    time.sleep(self.spacing_s)
        return DeliveryRecord(target, ok=False, attempts=self.attempts, error=last_error)


class Gateway:
    """Owns the store, the active rule packs, and the sequential pipeline."""

    def __init__(self, store: Store, annotator: Annotator, egress: Egress | None = None):
        self.store = store
        self.annotator = annotator
        self.egress = egress or Egress()
        self.rulepacks: dict[str, RulePack] = {}
        self.per_rule: dict[str, int] = {}
        self.guard_type_errors = 0
        self._derived_hooks: list[DerivedHook] = []
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._run, name="ingest-pipeline", daemon=True)
        self._worker.start()

    # -- configuration -------------------------------------------------------

    def add_derived_hook(self, hook: DerivedHook) -> None:
        self._derived_hooks.append(hook)

    def active_packs(self) -> list[RulePack]:
        return list(self.rulepacks.values())

    def domains_for_rule(self, rule_id: str) -> tuple[str, ...]:
        for pack in self.rulepacks.values():
            if any(r.id == rule_id for r in pack.rules):
                return pack.domains
        return ()

    def set_rulepack(self, pack: RulePack, rechain: bool = False) -> ChainStats | None:
        """Install or replace a rule pack.

        With rechain=True all inferred triples are retracted and chaining
        reruns from the asserted/loaded base, so the store ends up exactly
        as if the new pack had been active from the start; cumulative
        per-rule counts are reset to that fresh run's counts.
        """
        for rule in pack.rules:
            violations = check_safety(rule)
            if violations:
                # refuse unsafe packs here so the pipeline can never fail mid-commit
                raise RuleSafetyError(rule.id, violations)
        self.rulepacks[pack.pack_id] = pack
        for rule in pack.rules:
            self.per_rule.setdefault(rule.id, 0)
        if not rechain:
            return None
        self.store.retract(Inferred)
        before = set(self.store.snapshot())
        stats = forward_chain(self.store, self.active_packs())
        self.per_rule = dict(stats.per_rule)
        self.guard_type_errors = stats.guard_type_errors
        self._notify(self._new_inferred(before), observation_iri="", timestamp=now_ms())
        return stats

    def load_knowledge_pack(self, document: str, pack_id: str) -> int:
        return self.store.load_pack(document, pack_id)

    # -- pipeline ------------------------------------------------------------

    def submit(self, reading: RawReading) -> "Future[IngestReceipt]":
        """Queue a reading; the returned future resolves to its receipt."""
        fut: Future = Future()
        self._queue.put((reading, fut))
        return fut

    def ingest(self, reading: RawReading, timeout: float = 30.0) -> IngestReceipt:
        """Submit and wait; raises whatever the pipeline raised."""
        return self.submit(reading).result(timeout=timeout)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            reading, fut = item
            try:
                fut.set_result(self._process(reading))
            except Exception as exc:
                fut.set_exception(exc)

    def _process(self, reading: RawReading) -> IngestReceipt:
        # annotate can fail; nothing is inserted until it has succeeded
        graph = self.annotator.annotate(reading)
        source = Asserted(f"urn:dev:{reading.device_id}")
        before = set(self.store.snapshot())
        added = sum(1 for t in graph.triples if self.store.insert(t, source))
        stats = forward_chain(self.store, self.active_packs())
        for rule_id, count in stats.per_rule.items():
            self.per_rule[rule_id] = self.per_rule.get(rule_id, 0) + count
        self.guard_type_errors += stats.guard_type_errors
        derived = self._new_inferred(before)
        notified = self._notify(
            derived, observation_iri=graph.observation_iri.value, timestamp=reading.timestamp
        )
        return IngestReceipt(
            observation_iri=graph.observation_iri.value,
            triples_added=added,
            derived=derived,
            notifications_queued=notified,
        )

    def _new_inferred(self, before: set[Triple]) -> list[Triple]:
        out = []
        for triple, prov in self.store.snapshot().items():
            if triple not in before and isinstance(prov, Inferred):
                out.append(triple)
        return out

    def _notify(self, derived: list[Triple], observation_iri: str, timestamp: int) -> int:
        queued = 0
        for fact in derived:
            prov = self.store.provenance(fact)
            rule_id = prov.rule_id if isinstance(prov, Inferred) else ""
            ctx = DerivedContext(rule_id=rule_id, observation_iri=observation_iri, timestamp=timestamp)
            for hook in self._derived_hooks:
                try:
                    queued += hook(fact, ctx)
                except Exception:
                    log.exception("derived-fact hook failed")
        return queued

    def bridge_publish(self, fact: Triple, target: EgressTarget) -> DeliveryRecord:
        """Publish one stored fact to an egress target.

        The fact must already be in the store; its provenance fills the
        envelope's rule_id, and an urn:obs: subject fills observation_iri.
        """
        prov = self.store.provenance(fact)
        if prov is None:
            raise ValueError("fact is not in the store")
        rule_id = prov.rule_id if isinstance(prov, Inferred) else ""
        subject = getattr(fact.subject, "value", "")
        obs = subject if subject.startswith("urn:obs:") else ""
        ctx = DerivedContext(rule_id=rule_id, observation_iri=obs, timestamp=now_ms())
        return self.egress.deliver(target, fact_envelope(fact, ctx))

    def stats(self) -> dict:
        return {
            "store_size": len(self.store),
            "per_rule": dict(sorted(self.per_rule.items())),
        }

    def shutdown(self) -> None:
        self._queue.put(None)
        self._worker.join(timeout=5)
