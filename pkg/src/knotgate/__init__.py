"""Semantic IoT gateway and knowledge pipeline.

Raw sensor readings come in over MQTT, CoAP, or HTTP, are annotated into
observation triples, run through shareable forward-chaining rule packs,
and surface as queryable knowledge, subscriptions, and composed services.
"""

__version__ = "0.1.0"
