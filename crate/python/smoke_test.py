"""Builds the extension with cargo, imports it and exercises a few calls.

Run from anywhere: python3 python/smoke_test.py
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_module(dest):
    subprocess.run(["cargo", "build", "-p", "mecflow-py", "--quiet"], cwd=ROOT, check=True)
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    lib = os.path.join(target, "debug", "libmecflow_py.so")
    if not os.path.exists(lib):
        lib = os.path.join(target, "debug", "libmecflow_py.dylib")
    shutil.copy(lib, os.path.join(dest, "mecflow.so"))


def envelope(producer, lat, lon, ts, payload):
    return json.dumps(
        {
            "producer_id": producer,
            "datatype": "cam",
            "timestamp_ms": ts,
            "position": {"lat": lat, "lon": lon},
            "license": {"commercial_use": True, "redistribution": True},
            "payload": payload,
        }
    ).encode()


def main():
    work = tempfile.mkdtemp()
    build_module(work)
    sys.path.insert(0, work)
    import mecflow

    assert mecflow.tile_to_quadkey(3, 5, 3) == "213"
    assert mecflow.quadkey_to_tile("213") == (3, 5, 3)
    qk = mecflow.locate(43.3183, -1.9812, 14)
    assert len(qk) == 14 and mecflow.quadkey_contains(qk[:10], qk)
    assert mecflow.latlon_to_tile(0.0, 0.0, 1) == (1, 1, 1)
    assert len(mecflow.cover_roi(43.0, -2.0, 43.5, -1.5, 10)) > 1

    s = mecflow.Sampler(0.25)
    admitted = sum(s.admit() for _ in range(1000))
    assert admitted == 250 and s.seen == 1000

    lic = {"commercial_use": False, "redistribution": True, "geo_scope": qk[:8], "expiry_ms": None}
    assert mecflow.license_permits(lic, qk, 0, commercial_use=False)
    assert not mecflow.license_permits(lic, qk, 0, commercial_use=True)

    clean = mecflow.scrub(json.loads(envelope("p1", 43.3, -1.98, 1, {"speed": 3, "meta": {"vin": "X"}})))
    assert clean["payload"] == {"speed": 3, "meta": {}}

    try:
        mecflow.parse_envelope(b"{not json")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed envelope accepted")

    start = 1_700_000_000_000
    node = mecflow.Node(
        {
            "mec_id": "m1",
            "tile": qk[:10],
            "capacity": {"cpu_millicores_free": 4000, "memory_mb_free": 8192, "gpu_units_free": 0},
        },
        start_ms=start,
    )
    assert node.ingest(envelope("p1", 43.3183, -1.9812, start, {"x": 1}))["reason"] == "no-demand"
    node.attach_consumer("c1", "cam", "small", [qk], commercial_use=True)
    assert node.has_running_pipeline("cam")
    for i in range(20):
        assert node.ingest(envelope("p1", 43.3183, -1.9812, start + i, {"x": i}))["status"] == "accepted"
    node.advance(1000)
    node.tick()
    assert len(node.take_deliveries("c1")) == 2
    usage = node.report_usage()
    assert usage["mec_id"] == "m1" and usage["seq"] == 1

    scenario = {
        "seed": 7,
        "duration_ms": 20000,
        "tick_ms": 1000,
        "mecs": [{"mec_id": "m1", "lat": 43.3183, "lon": -1.9812}],
        "producers": [
            {
                "producer_id": "car-1",
                "datatype": "cam",
                "rate_hz": 10,
                "payload_bytes": 200,
                "license": {"commercial_use": True, "redistribution": True},
                "trace": [{"lat": 43.3183, "lon": -1.9812}],
            }
        ],
        "consumers": [
            {
                "consumer_id": "analytics",
                "datatype": "cam",
                "tier": "medium",
                "roi": {"south": 43.2, "west": -2.1, "north": 43.4, "east": -1.9},
                "start_ms": 5000,
                "stop_ms": 15000,
            }
        ],
    }
    a = mecflow.run_scenario(scenario)
    b = mecflow.run_scenario(json.dumps(scenario))
    assert a == b
    assert a["ingested"] == 200 and a["pipelines_deployed"] == 1
    assert a["consumers"]["analytics"]["received_count"] > 0
    assert mecflow.run_scenario(scenario, always_on=True)["discarded_no_demand"] == 0

    out = os.path.join(work, "out")
    mecflow.run_and_export(scenario, out)
    assert sorted(os.listdir(out)) == ["summary.json", "ticks.csv"]

    try:
        mecflow.run_scenario({"seed": 1})
    except ValueError:
        pass
    else:
        raise AssertionError("invalid scenario accepted")

    shutil.rmtree(work)
    print("python smoke test ok")


if __name__ == "__main__":
    main()
