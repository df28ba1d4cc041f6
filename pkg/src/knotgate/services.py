"""Application-facing layer: HTTP API, subscriptions, and service composition.

Subscriptions deliver an envelope for every newly inferred fact that
unifies with their pattern, at most once per (subscription, fact).
Composition pipelines react to derived facts by running a lookup query
against loaded knowledge (with the trigger's bindings substituted) and
filling a JSON response template, turning e.g. a derived fever state into
a home-remedy suggestion payload.

Everything here is a thin serialization shell: each endpoint body is the
corresponding module operation's result and nothing else.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
import threading
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import coap as coap_proto
from .annotation import (
    Annotator,
    InvalidRegistration,
    SensorRegistration,
    SensorRegistry,
    UnknownUnit,
    UnregisteredDevice,
    UnsupportedConversion,
)
from .config import AppConfig, ConfigError
from .gateway import (
    BadTopic,
    DecodeError,
    DerivedContext,
    Egress,
    EgressTarget,
    Gateway,
    InboundMessage,
    MqttTopic,
    Webhook,
    decode_reading,
    fact_envelope,
    now_ms,
    sniff_format,
    topic_to_route,
)
from .lexer import GrammarError
from .model import Triple, TripleParseError, compact_term, serialize_term
from .mqtt import MqttClient
from .query import Query, UnsafeQuery, evaluate_query, parse_query
from .rules import RuleSafetyError, parse_pattern, parse_rulepack
from .store import Store, TriplePattern, unify

log = logging.getLogger(__name__)


class TemplateError(ValueError):
    """A response template references an unresolvable placeholder."""


class InvalidSubscription(ValueError):
    """Subscription pattern needs at least one concrete position."""


@dataclass(frozen=True)
class Subscription:
    id: str
    pattern: TriplePattern
    endpoint: EgressTarget

    def __post_init__(self) -> None:
        if self.pattern.concrete_count() == 0:
            raise InvalidSubscription("pattern must have at least one concrete position")


@dataclass(frozen=True)
class CompositionPipeline:
    id: str
    trigger: TriplePattern
    lookup: Query
    response_template: object
    endpoint: EgressTarget


_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z0-9_]+)\}")


def _template_placeholders(node: object) -> set[str]:
    if isinstance(node, str):
        return set(_PLACEHOLDER_RE.findall(node))
    if isinstance(node, dict):
        return set().union(*(_template_placeholders(v) for v in node.values()), set())
    if isinstance(node, list):
        return set().union(*(_template_placeholders(v) for v in node), set())
    return set()


def _fill_template(node: object, scalars: dict[str, str], arrays: dict[str, list[str]]) -> object:
    if isinstance(node, str):
        whole = _PLACEHOLDER_RE.fullmatch(node)
        if whole:
            name = whole.group(1)
            if name in arrays:
                return arrays[name]
            return scalars[name]
        return _PLACEHOLDER_RE.sub(lambda m: scalars[m.group(1)], node)
    if isinstance(node, dict):
        return {k: _fill_template(v, scalars, arrays) for k, v in node.items()}
    if isinstance(node, list):
        return [_fill_template(v, scalars, arrays) for v in node]
    return node


class SubscriptionManager:
    """Pattern-triggered envelope deliveries, at most once per (sub, fact)."""

    def __init__(self, egress: Egress):
        self.egress = egress
        self._lock = threading.Lock()
        self._subs: dict[str, Subscription] = {}
        self._delivered: set[tuple[str, Triple]] = set()
        self._ids = itertools.count(1)

    def register(self, pattern: TriplePattern, endpoint: EgressTarget) -> str:
        with self._lock:
            sub_id = f"sub-{next(self._ids)}"
            self._subs[sub_id] = Subscription(sub_id, pattern, endpoint)
            return sub_id

    def on_derived(self, fact: Triple, ctx: DerivedContext) -> int:
        with self._lock:
            due = [
                sub
                for sub in self._subs.values()
                if (sub.id, fact) not in self._delivered
                and unify(sub.pattern, fact) is not None
            ]
            for sub in due:
                self._delivered.add((sub.id, fact))
        for sub in due:
            self.egress.deliver(sub.endpoint, fact_envelope(fact, ctx))
        return len(due)


class CompositionManager:
    """Derived-fact triggers that look up knowledge and emit payloads."""

    def __init__(self, store: Store, egress: Egress):
        self.store = store
        self.egress = egress
        self._lock = threading.Lock()
        self._pipelines: dict[str, CompositionPipeline] = {}
        self._ids = itertools.count(1)

    def register(
        self,
        trigger: TriplePattern,
        lookup_text: str,
        response_template: object,
        endpoint: EgressTarget,
        pipeline_id: str | None = None,
    ) -> str:
        """Validate and install a pipeline.

        The lookup query may reference trigger variables; template
        placeholders must name a trigger variable (filled as one value) or
        a lookup select variable (filled as a JSON array).  All of this is
        checked here so nothing can fail at delivery time.
        """
        trigger_vars = trigger.variables()
        lookup = parse_query(lookup_text, presumed_bound=trigger_vars)
        allowed = trigger_vars | set(lookup.select)
        for name in sorted(_template_placeholders(response_template)):
            if name not in allowed:
                raise TemplateError(f"placeholder {{{name}}} is not a trigger or lookup variable")
        array_vars = set(lookup.select) - trigger_vars
        bad = _embedded_array_placeholders(response_template, array_vars)
        if bad:
            raise TemplateError(
                f"list placeholder {{{bad[0]}}} must be the entire string value"
            )
        with self._lock:
            pid = pipeline_id or f"comp-{next(self._ids)}"
            if pid in self._pipelines:
                raise ValueError(f"duplicate composition id {pid!r}")
            self._pipelines[pid] = CompositionPipeline(
                pid, trigger, lookup, response_template, endpoint
            )
            return pid

    def on_derived(self, fact: Triple, ctx: DerivedContext) -> int:
        with self._lock:
            pipelines = list(self._pipelines.values())
        fired = 0
        for pipe in pipelines:
            bindings = unify(pipe.trigger, fact)
            if bindings is None:
                continue
            table = evaluate_query(pipe.lookup, self.store, bindings=bindings)
            scalars = {name: compact_term(term) for name, term in bindings.items()}
            arrays: dict[str, list[str]] = {}
            for col, name in enumerate(table.columns):
                if name in bindings:
                    continue
                seen: list[str] = []
                for row in table.rows:
                    rendered = compact_term(row[col])
                    if rendered not in seen:
                        seen.append(rendered)
                arrays[name] = seen
            payload = _fill_template(pipe.response_template, scalars, arrays)
            self.egress.deliver(pipe.endpoint, json.dumps(payload).encode("utf-8"))
            fired += 1
        return fired


def _embedded_array_placeholders(node: object, array_vars: set[str]) -> list[str]:
    out: list[str] = []
    if isinstance(node, str):
        if not _PLACEHOLDER_RE.fullmatch(node):
            out.extend(n for n in _PLACEHOLDER_RE.findall(node) if n in array_vars)
    elif isinstance(node, dict):
        for v in node.values():
            out.extend(_embedded_array_placeholders(v, array_vars))
    elif isinstance(node, list):
        for v in node:
            out.extend(_embedded_array_placeholders(v, array_vars))
    return out


def parse_endpoint(obj: object) -> EgressTarget:
    """Wire format: {"kind": "webhook", "url": ...} or {"kind": "mqtt", "topic": ...}."""
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ValueError("endpoint must be an object with a 'kind'")
    if obj["kind"] == "webhook":
        return Webhook(str(obj.get("url", "")))
    if obj["kind"] == "mqtt":
        return MqttTopic(str(obj.get("topic", "")))
    raise ValueError(f"unknown endpoint kind {obj['kind']!r}")


# -- HTTP API ----------------------------------------------------------------

_ERROR_STATUS: list[tuple[type, int]] = [
    (UnregisteredDevice, 404),
    (UnknownUnit, 422),
    (UnsupportedConversion, 422),
    (DecodeError, 400),
    (BadTopic, 400),
    (GrammarError, 400),
    (TripleParseError, 400),
    (RuleSafetyError, 400),
    (UnsafeQuery, 400),
    (InvalidRegistration, 400),
    (TemplateError, 400),
    (InvalidSubscription, 400),
    (ValueError, 400),
]


def error_body(exc: Exception) -> tuple[int, dict]:
    status = 500
    for etype, code in _ERROR_STATUS:
        if isinstance(exc, etype):
            status = code
            break
    detail = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
    body = {"error": type(exc).__name__, "detail": detail}
    if isinstance(exc, GrammarError):
        body["position"] = {"line": exc.line, "column": exc.col}
    if isinstance(exc, TripleParseError):
        body["position"] = {"line": exc.line}
    return status, body


class Api:
    """Request handling behind the HTTP server; also callable in-process."""

    def __init__(self, runtime: "Runtime"):
        self.runtime = runtime

    def ingest(self, body: bytes) -> tuple[int, dict]:
        reading = decode_reading(body, "json", received_at=now_ms())
        receipt = self.runtime.gateway.ingest(reading)
        return 202, receipt.to_json()

    def query(self, query_text: str) -> tuple[int, dict]:
        query = parse_query(query_text)
        table = evaluate_query(query, self.runtime.store)
        return 200, {
            "columns": list(table.columns),
            "rows": [[serialize_term(t) for t in row] for row in table.rows],
        }

    def register_sensors(self, body: bytes, content_type: str) -> tuple[int, dict]:
        text = body.decode("utf-8")
        if "json" in content_type or text.lstrip().startswith(("{", "[")):
            obj = json.loads(text)
            entries = obj if isinstance(obj, list) else [obj]
            count = 0
            for entry in entries:
                if not isinstance(entry, dict):
                    raise InvalidRegistration("each registration must be an object")
                try:
                    reg = SensorRegistration.from_strings(
                        str(entry["device_id"]),
                        str(entry["observed_property"]),
                        str(entry["feature_of_interest"]),
                        str(entry["canonical_unit"]),
                    )
                except KeyError as missing:
                    raise InvalidRegistration(f"missing field {missing.args[0]!r}") from None
                self.runtime.registry.register(reg)
                count += 1
            return 200, {"registered": count}
        count = self.runtime.registry.load_csv(text)
        return 200, {"registered": count}

    def put_rulepack(self, body: bytes) -> tuple[int, dict]:
        pack = parse_rulepack(body.decode("utf-8"))
        stats = self.runtime.gateway.set_rulepack(pack, rechain=True)
        return 200, {
            "pack_id": pack.pack_id,
            "rules": len(pack.rules),
            "derived": stats.derived,
            "rounds": stats.rounds,
        }

    def put_pack(self, body: bytes, pack_id: str) -> tuple[int, dict]:
        if not pack_id:
            raise ValueError("missing 'id' query parameter")
        loaded = self.runtime.gateway.load_knowledge_pack(body.decode("utf-8"), pack_id)
        return 200, {"pack_id": pack_id, "loaded": loaded}

    def stats(self) -> tuple[int, dict]:
        return 200, self.runtime.gateway.stats()

    def subscribe(self, body: bytes) -> tuple[int, dict]:
        obj = json.loads(body.decode("utf-8"))
        pattern = parse_pattern(str(obj["pattern"]))
        endpoint = parse_endpoint(obj.get("endpoint"))
        sub_id = self.runtime.subscriptions.register(pattern, endpoint)
        return 201, {"id": sub_id}

    def compose(self, body: bytes) -> tuple[int, dict]:
        obj = json.loads(body.decode("utf-8"))
        trigger = parse_pattern(str(obj["trigger"]))
        endpoint = parse_endpoint(obj.get("endpoint"))
        comp_id = self.runtime.compositions.register(
            trigger,
            str(obj["lookup"]),
            obj.get("response_template"),
            endpoint,
            pipeline_id=obj.get("id"),
        )
        return 201, {"id": comp_id}


class _ApiHandler(BaseHTTPRequestHandler):
    server_version = "knotgate/0.1"

    @property
    def api(self) -> Api:
        return self.server.api  # type: ignore[attr-defined]

    def log_message(self, fmt: str, *args: object) -> None:
        log.debug("http: " + fmt, *args)

    def _reply(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0"))
        return self.rfile.read(length)

    def _dispatch(self, method: str) -> None:
        parsed = urllib.parse.urlparse(self.path)
        params = urllib.parse.parse_qs(parsed.query)
        route = (method, parsed.path)
        try:
            if route == ("POST", "/api/v1/observations"):
                status, body = self.api.ingest(self._read_body())
            elif route == ("GET", "/api/v1/query"):
                q = params.get("q", [""])[0]
                if not q:
                    raise ValueError("missing 'q' query parameter")
                status, body = self.api.query(q)
            elif route == ("POST", "/api/v1/sensors"):
                status, body = self.api.register_sensors(
                    self._read_body(), self.headers.get("Content-Type", "")
                )
            elif route == ("POST", "/api/v1/rulepacks"):
                status, body = self.api.put_rulepack(self._read_body())
            elif route == ("POST", "/api/v1/packs"):
                status, body = self.api.put_pack(self._read_body(), params.get("id", [""])[0])
            elif route == ("GET", "/api/v1/stats"):
                status, body = self.api.stats()
            elif route == ("POST", "/api/v1/subscriptions"):
                status, body = self.api.subscribe(self._read_body())
            elif route == ("POST", "/api/v1/compositions"):
                status, body = self.api.compose(self._read_body())
            else:
                status, body = 404, {"error": "NotFound", "detail": parsed.path}
        except json.JSONDecodeError as exc:
            status, body = 400, {"error": "DecodeError", "detail": f"bad JSON: {exc.msg}"}
        except KeyError as exc:
            if isinstance(exc, UnregisteredDevice):
                status, body = error_body(exc)
            else:
                status, body = 400, {"error": "DecodeError", "detail": f"missing field {exc.args[0]!r}"}
        except Exception as exc:  # noqa: BLE001 - every error becomes a JSON body
            status, body = error_body(exc)
            if status == 500:
                log.exception("unhandled API error")
        self._reply(status, body)

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")


class Runtime:
    """All wired-up components of one gateway instance."""

    def __init__(self, config: AppConfig | None = None):
        self.config = config or AppConfig()
        self.store = Store()
        self.registry = SensorRegistry()
        self.annotator = Annotator(self.registry)
        self.egress = Egress()
        self.gateway = Gateway(self.store, self.annotator, self.egress)
        self.subscriptions = SubscriptionManager(self.egress)
        self.compositions = CompositionManager(self.store, self.egress)
        self.gateway.add_derived_hook(self.subscriptions.on_derived)
        self.gateway.add_derived_hook(self.compositions.on_derived)
        self.api = Api(self)
        self.http_server: ThreadingHTTPServer | None = None
        self.coap_server: coap_proto.CoapServer | None = None
        self.mqtt_client: MqttClient | None = None
        self._http_thread: threading.Thread | None = None

    # -- boot ------------------------------------------------------------

    @classmethod
    def from_config(cls, config: AppConfig, base_dir: Path | None = None) -> "Runtime":
        """Build a runtime and load every configured file before traffic."""
        runtime = cls(config)
        base = base_dir or Path.cwd()
        for name in config.load.sensors:
            runtime.registry.load_csv(_read_file(base, name))
        for name in config.load.rulepacks:
            pack = parse_rulepack(_read_file(base, name))
            runtime.gateway.set_rulepack(pack)
        for name in config.load.packs:
            pack_id = Path(name).stem
            runtime.gateway.load_knowledge_pack(_read_file(base, name), pack_id)
        return runtime

    @property
    def http_port(self) -> int | None:
        if self.http_server is None:
            return None
        return self.http_server.server_address[1]

    def start_http(self) -> int:
        cfg = self.config.http
        server = ThreadingHTTPServer((cfg.host, cfg.port), _ApiHandler)
        server.api = self.api  # type: ignore[attr-defined]
        server.daemon_threads = True
        self.http_server = server
        self._http_thread = threading.Thread(
            target=lambda: server.serve_forever(poll_interval=0.05),
            name="http-api",
            daemon=True,
        )
        self._http_thread.start()
        return server.server_address[1]

    def start_coap(self) -> int:
        cfg = self.config.coap
        server = coap_proto.CoapServer(self._handle_coap, host=cfg.host, port=cfg.port)
        server.start()
        self.coap_server = server
        return server.port

    def start_mqtt(self) -> None:
        cfg = self.config.mqtt
        host, port = _parse_broker_url(cfg.broker_url)
        client = MqttClient(host, port, client_id="knotgate-gateway", on_message=self._handle_mqtt)
        client.connect()
        client.subscribe("iot/#")
        self.mqtt_client = client
        self.egress.mqtt_publish = client.publish
        self.gateway.add_derived_hook(self._bridge_derived_to_mqtt)

    def start(self) -> None:
        if self.config.mqtt.enabled:
            self.start_mqtt()
        if self.config.coap.enabled:
            self.start_coap()
        if self.config.http.enabled:
            self.start_http()

    def stop(self) -> None:
        if self.http_server is not None:
            self.http_server.shutdown()
            self.http_server.server_close()
            self.http_server = None
        if self.coap_server is not None:
            self.coap_server.stop()
            self.coap_server = None
        if self.mqtt_client is not None:
            self.mqtt_client.disconnect()
            self.mqtt_client = None
        self.gateway.shutdown()

    # -- adapters ----------------------------------------------------------

    def _handle_mqtt(self, topic: str, payload: bytes) -> None:
        try:
            message = InboundMessage("mqtt", topic, payload, now_ms())
            hint = topic_to_route(message.route)
            reading = decode_reading(
                payload, sniff_format(payload), received_at=message.received_at, route_hint=hint
            )
        except (BadTopic, DecodeError, ValueError) as exc:
            log.warning("dropping mqtt message on %s: %s", topic, exc)
            return
        self.gateway.submit(reading)

    def _handle_coap(self, method: int, path: list[str], payload: bytes) -> tuple[int, bytes]:
        if path != ["ingest"]:
            return coap_proto.NOT_FOUND, json.dumps({"error": "NotFound"}).encode()
        if method != coap_proto.POST:
            return coap_proto.METHOD_NOT_ALLOWED, b""
        try:
            message = InboundMessage("coap", "/ingest", payload, now_ms())
            reading = decode_reading(payload, "json", received_at=message.received_at)
            receipt = self.gateway.ingest(reading)
        except UnregisteredDevice as exc:
            return coap_proto.NOT_FOUND, _coap_error(exc)
        except (UnknownUnit, UnsupportedConversion) as exc:
            return coap_proto.UNPROCESSABLE, _coap_error(exc)
        except (DecodeError, ValueError) as exc:
            return coap_proto.BAD_REQUEST, _coap_error(exc)
        return coap_proto.CREATED, json.dumps(receipt.to_json()).encode("utf-8")

    def _bridge_derived_to_mqtt(self, fact: Triple, ctx: DerivedContext) -> int:
        domains = self.gateway.domains_for_rule(ctx.rule_id) or ("default",)
        self.egress.deliver(MqttTopic(f"derived/{domains[0]}"), fact_envelope(fact, ctx))
        return 0  # protocol bridging, not a subscription notification


def _coap_error(exc: Exception) -> bytes:
    _, body = error_body(exc)
    return json.dumps(body).encode("utf-8")


def _read_file(base: Path, name: str) -> str:
    path = Path(name)
    if not path.is_absolute():
        path = base / path
    try:
        return path.read_text(encoding="utf-8")
    except OSError:
        raise ConfigError(f"cannot read configured file: {path}") from None


def _parse_broker_url(url: str) -> tuple[str, int]:
    if not url:
        raise ConfigError("mqtt enabled but broker_url is empty")
    text = url
    if "://" in text:
        scheme, _, text = text.partition("://")
        if scheme != "mqtt":
            raise ConfigError(f"unsupported broker scheme {scheme!r}")
    host, _, port = text.partition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"bad broker_url {url!r}, expected mqtt://host:port")
    return host, int(port)
