import random
import threading

import pytest

from knotgate.annotation import (
    Annotator,
    RawReading,
    SensorRegistry,
    UnknownUnit,
    UnregisteredDevice,
)
from knotgate.gateway import (
    BadTopic,
    DecodeError,
    Egress,
    Gateway,
    InboundMessage,
    InvalidTarget,
    MqttTopic,
    Webhook,
    decode_reading,
    sniff_format,
    topic_to_route,
)
from knotgate.model import Iri, Triple, make_iri, parse_triples
from knotgate.rules import parse_rulepack
from knotgate.store import Inferred, Store

from generators import Vocab

JSON_READING = b'{"device_id":"thermo1","sensor_kind":"temperature","value":39.0,"unit":"cel","timestamp":1700000000000}'
CSV_READING = b"thermo1,temperature,39.0,cel,1700000000000"


def make_gateway(packs=()) -> Gateway:
    registry = SensorRegistry()
    registry.load_csv(
        "thermo1,m3:BodyTemperature,m3:Patient,unit:DegreeCelsius\n"
        "ambient1,m3:AmbientTemperature,m3:Building,unit:DegreeCelsius\n"
    )
    gateway = Gateway(Store(), Annotator(registry))
    for pack in packs:
        gateway.set_rulepack(pack)
    return gateway


# -- decoding ----------------------------------------------------------------


def test_decode_json_reading():
    reading = decode_reading(JSON_READING, "json")
    assert reading == RawReading("thermo1", "temperature", 39.0, "cel", 1700000000000)


def test_decode_csv_equals_json():
    assert decode_reading(CSV_READING, "csv") == decode_reading(JSON_READING, "json")


def test_decode_missing_value():
    with pytest.raises(DecodeError, match="value"):
        decode_reading(b'{"device_id":"x","sensor_kind":"t","unit":"cel","timestamp":1}', "json")


def test_decode_missing_timestamp_defaults_to_received_at():
    reading = decode_reading(
        b'{"device_id":"thermo1","sensor_kind":"t","value":1.0,"unit":"cel"}',
        "json",
        received_at=123,
    )
    assert reading.timestamp == 123
    csv_reading = decode_reading(b"thermo1,t,1.0,cel", "csv", received_at=123)
    assert csv_reading.timestamp == 123


def test_decode_missing_timestamp_without_received_at():
    with pytest.raises(DecodeError, match="timestamp"):
        decode_reading(b"thermo1,t,1.0,cel", "csv")


def test_decode_bad_number():
    with pytest.raises(DecodeError):
        decode_reading(b"thermo1,t,abc,cel,1", "csv")
    with pytest.raises(DecodeError):
        decode_reading(b'{"device_id":"x","sensor_kind":"t","value":"39","unit":"cel"}', "json")


def test_decode_bad_encoding():
    with pytest.raises(DecodeError, match="encoding"):
        decode_reading(b"\xff\xfe\x00bad", "json")


def test_decode_route_hint_fills_missing_fields():
    reading = decode_reading(
        b'{"value":1.0,"unit":"cel","timestamp":5}', "json", route_hint=("thermo1", "temperature")
    )
    assert reading.device_id == "thermo1"
    assert reading.sensor_kind == "temperature"


def test_decode_payload_wins_over_hint():
    reading = decode_reading(JSON_READING, "json", route_hint=("other", "humidity"))
    assert reading.device_id == "thermo1"


def test_sniff_format():
    assert sniff_format(JSON_READING) == "json"
    assert sniff_format(CSV_READING) == "csv"


def test_topic_to_route():
    assert topic_to_route("iot/thermo1/temperature") == ("thermo1", "temperature")


@pytest.mark.parametrize("bad", ["iot//temperature", "weather/x/y/z", "iot/thermo1", "x/y/z"])
def test_topic_to_route_rejects(bad):
    with pytest.raises(BadTopic):
        topic_to_route(bad)


def test_inbound_message_invariants():
    with pytest.raises(ValueError):
        InboundMessage("carrier-pigeon", "iot/a/b", b"x", 0)
    with pytest.raises(ValueError):
        InboundMessage("mqtt", "iot/a/b", b"", 0)


# -- ingestion pipeline --------------------------------------------------------


def test_ingest_39_derives_fever(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    receipt = gateway.ingest(decode_reading(JSON_READING, "json"))
    assert receipt.observation_iri == "urn:obs:thermo1:1"
    assert receipt.triples_added == 6
    fever = Triple(Iri("urn:obs:thermo1:1"), make_iri("m3:indicates"), make_iri("m3:Fever"))
    assert receipt.derived == [fever]
    assert isinstance(gateway.store.provenance(fever), Inferred)
    gateway.shutdown()


def test_ingest_38_derives_nothing(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    receipt = gateway.ingest(RawReading("thermo1", "temperature", 38.0, "cel", 1))
    assert receipt.derived == []
    gateway.shutdown()


def test_ingest_unregistered_device_leaves_store_unchanged(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    with pytest.raises(UnregisteredDevice):
        gateway.ingest(RawReading("ghost", "temperature", 39.0, "cel", 1))
    assert len(gateway.store) == 0
    gateway.shutdown()


def test_ingest_unknown_unit_leaves_store_unchanged(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    with pytest.raises(UnknownUnit):
        gateway.ingest(RawReading("thermo1", "temperature", 39.0, "parsec", 1))
    assert len(gateway.store) == 0
    gateway.shutdown()


def test_per_device_sequences_follow_arrival_order(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    receipts = [
        gateway.ingest(RawReading("thermo1", "temperature", 36.0 + i, "cel", i)) for i in range(5)
    ]
    seqs = [int(r.observation_iri.rsplit(":", 1)[1]) for r in receipts]
    assert seqs == [1, 2, 3, 4, 5]
    gateway.shutdown()


def test_concurrent_submitters_all_complete(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    futures = []

    def submit_batch(base: int):
        for i in range(10):
            futures.append(gateway.submit(RawReading("thermo1", "temperature", 36.5, "cel", base + i)))

    threads = [threading.Thread(target=submit_batch, args=(100 * k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    receipts = [f.result(timeout=10) for f in futures]
    seqs = sorted(int(r.observation_iri.rsplit(":", 1)[1]) for r in receipts)
    assert seqs == list(range(1, 41))
    gateway.shutdown()


def test_incremental_equals_from_scratch_rechain(fever_pack_text):
    rng = random.Random(21)
    fire_text = (
        "PACK slor-fire DOMAIN fire\n"
        "RULE fire-risk : IF ?o rdf:type ssn:Observation . "
        "?o ssn:observedProperty m3:AmbientTemperature . "
        "?o ssn:observationResult ?v FILTER ?v > 60.0 THEN ?o m3:indicates m3:FireRisk .\n"
    )
    for _ in range(10):
        gateway = make_gateway([parse_rulepack(fever_pack_text), parse_rulepack(fire_text)])
        for i in range(rng.randint(1, 30)):
            device = rng.choice(["thermo1", "ambient1"])
            gateway.ingest(RawReading(device, "temperature", rng.uniform(30, 90), "cel", i))
        live = gateway.store.snapshot()
        gateway.store.retract(Inferred)
        from knotgate.rules import forward_chain

        forward_chain(gateway.store, gateway.active_packs())
        assert set(gateway.store) == set(live)
        gateway.shutdown()


def test_derived_hooks_receive_context(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    seen = []
    gateway.add_derived_hook(lambda fact, ctx: (seen.append((fact, ctx)), 2)[1])
    receipt = gateway.ingest(RawReading("thermo1", "temperature", 39.5, "cel", 777))
    assert receipt.notifications_queued == 2
    [(fact, ctx)] = seen
    assert ctx.rule_id == "fever"
    assert ctx.observation_iri == "urn:obs:thermo1:1"
    assert ctx.timestamp == 777
    gateway.shutdown()


def test_stats_accumulate(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    gateway.ingest(RawReading("thermo1", "temperature", 39.0, "cel", 1))
    gateway.ingest(RawReading("thermo1", "temperature", 40.0, "cel", 2))
    gateway.ingest(RawReading("thermo1", "temperature", 36.0, "cel", 3))
    stats = gateway.stats()
    assert stats["per_rule"]["fever"] == 2
    assert stats["store_size"] == 18 + 2
    gateway.shutdown()


# -- egress -------------------------------------------------------------------


def test_webhook_delivery_success(capture_server, fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    gateway.ingest(decode_reading(JSON_READING, "json"))
    fever = Triple(Iri("urn:obs:thermo1:1"), make_iri("m3:indicates"), make_iri("m3:Fever"))
    record = gateway.bridge_publish(fever, Webhook(capture_server.url))
    assert record.ok and record.attempts == 1
    [envelope] = capture_server.requests
    assert set(envelope) == {"triple", "rule_id", "observation_iri", "timestamp"}
    assert parse_triples(envelope["triple"] + "\n") == [fever]
    assert envelope["rule_id"] == "fever"
    assert envelope["observation_iri"] == "urn:obs:thermo1:1"
    gateway.shutdown()


def test_webhook_500_exhausts_retry_budget(capture_server):
    capture_server.fail_times = 5
    egress = Egress(spacing_s=0.01)
    record = egress.deliver(Webhook(capture_server.url), b"{}")
    assert not record.ok
    assert record.attempts == 3


def test_webhook_retry_then_success(capture_server):
    capture_server.fail_times = 2
    egress = Egress(spacing_s=0.01)
    record = egress.deliver(Webhook(capture_server.url), b'{"n":1}')
    assert record.ok
    assert record.attempts == 3
    assert capture_server.requests == [{"n": 1}]


def test_mqtt_target_without_client_fails_cleanly():
    egress = Egress()
    record = egress.deliver(MqttTopic("derived/health"), b"{}")
    assert not record.ok
    assert record.attempts == 0


def test_bridge_publish_requires_stored_fact(fever_pack_text):
    gateway = make_gateway([parse_rulepack(fever_pack_text)])
    ghost = Triple(Iri("urn:obs:x:1"), make_iri("m3:indicates"), make_iri("m3:Fever"))
    with pytest.raises(ValueError):
        gateway.bridge_publish(ghost, Webhook("http://127.0.0.1:1/hook"))
    gateway.shutdown()


def test_egress_target_validation():
    with pytest.raises(InvalidTarget):
        MqttTopic("")
    with pytest.raises(InvalidTarget):
        Webhook("ftp://example.com/x")
