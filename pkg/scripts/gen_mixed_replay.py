#!/usr/bin/env python3
"""Regenerate fixtures/replay/mixed.csv: 100 seeded readings across
the body-temperature and ambient-temperature devices.

Roughly a third of the body temperatures sit above the fever threshold
and a third of the ambient temperatures above the fire threshold, so the
cross-domain replay exercises both rule packs.
"""

import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "fixtures" / "replay" / "mixed.csv"
SEED = 20240615
BASE_TS = 1700000000000


def main() -> None:
    rng = random.Random(SEED)
    lines = ["# device_id,sensor_kind,value,unit,timestamp"]
    ts = BASE_TS
    for _ in range(100):
        ts += rng.randint(200, 2000)
        if rng.random() < 0.5:
            value = round(rng.uniform(36.0, 41.0), 1)
            lines.append(f"thermo1,temperature,{value},cel,{ts}")
        else:
            value = round(rng.uniform(15.0, 90.0), 1)
            lines.append(f"ambient1,temperature,{value},cel,{ts}")
    OUT.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {OUT} ({len(lines) - 1} readings)")


if __name__ == "__main__":
    main()
