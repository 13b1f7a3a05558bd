"""Builders for the shipped scenario presets.

The JSON files under ``energynet/presets`` are generated by :func:`write_presets`;
a test checks that they match these builders.
"""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path

from ..ep.wire import canonical_dumps

AC = {"v_min": 207.0, "v_max": 253.0}
DC = {"v_min": 150.0, "v_max": 1500.0}
DAY = 24


def router(rid: str, elan: str, n_links: int = 1, role: str = "aggregation", p_max: float = 20000.0,
           ports: tuple[str, ...] = ("load", "solar", "store", "grid")) -> dict:
    sides = {"load": "A", "ev": "A", "solar": "D", "store": "D", "grid": "B"}
    plist = [{"id": p, "side": sides[p], "p_max_w": p_max, **(AC if sides[p] in "AB" else DC)} for p in ports]
    plist += [{"id": f"c{k}", "side": "C", "p_max_w": p_max, **DC} for k in range(n_links)]
    return {"id": rid, "elan": elan, "role": role, "ports": plist}


def link(lid: str, a: str, pa: str, b: str, pb: str, capacity: float, loss: float = 0.0) -> dict:
    return {"id": lid, "router_a": a, "port_a": pa, "router_b": b, "port_b": pb, "capacity_w": capacity,
            "loss": loss, "voltage": 400.0}


def solar(did: str, rid: str, peak: float, profile: list[float]) -> dict:
    return {"id": did, "type": "solar", "router": rid, "port": "solar", "peak_w": peak, "profile": profile}


def battery(did: str, rid: str, kwh: float, soc_kwh: float, p_w: float, mode: str = "shave") -> dict:
    return {"id": did, "type": "battery", "router": rid, "port": "store", "capacity_kwh": kwh, "soc_kwh": soc_kwh,
            "p_charge_max_w": p_w, "p_discharge_max_w": p_w, "eta_charge": 0.95, "eta_discharge": 0.95, "mode": mode}


def load(did: str, rid: str, rows: list[list[list]]) -> dict:
    return {"id": did, "type": "load", "router": rid, "port": "load", "demand": rows}


def grid(did: str, rid: str, import_w: float, export_w: float = 0.0) -> dict:
    return {"id": did, "type": "grid", "router": rid, "port": "grid", "import_limit_w": import_w,
            "export_limit_w": export_w, "price_import": 0.25, "price_export": 0.05, "voltage": 230.0,
            "available": [True]}


# daylight fraction per hour, tick 0 = midnight
SUN = [0, 0, 0, 0, 0, 0, 0.05, 0.2, 0.4, 0.6, 0.8, 0.95, 1.0, 0.95, 0.8, 0.6, 0.4, 0.2, 0.05, 0, 0, 0, 0, 0]


def sws0() -> dict:
    """Two buildings joined by one cable; A has the large roof and the battery, B the grid feed."""
    day_b = []
    for h in range(DAY):
        rows = [[0, 800.0], [2, 1500.0 if 7 <= h <= 21 else 400.0]]
        if 17 <= h <= 21:
            rows.append([5, 2000.0])
        day_b.append(rows)
    day_a = [[[0, 500.0], [3, 1000.0 if 8 <= h <= 18 else 300.0]] for h in range(DAY)]
    return {
        "meta": {"name": "sws0", "seed": 1, "ticks": DAY, "tick_seconds": 3600},
        "topology": {
            "routers": [router("bldgA", "sws0", ports=("load", "solar", "store")),
                        router("bldgB", "sws0", ports=("load", "solar", "grid"))],
            "links": [link("cable", "bldgA", "c0", "bldgB", "c0", 6000.0, 0.01)],
            "elans": [{"id": "sws0"}],
        },
        "devices": [
            solar("pvA", "bldgA", 9000.0, SUN), battery("batA", "bldgA", 10.0, 5.0, 3000.0),
            load("loadA", "bldgA", day_a),
            solar("pvB", "bldgB", 2000.0, SUN), load("loadB", "bldgB", day_b), grid("gridB", "bldgB", 6000.0),
        ],
        "market": {"interval_ticks": 4},
        "protocol": {"grant_ticks": 12, "renew_lead": 10, "advert_interval": 1, "advert_ttl": 6},
    }


RING_N = 6


def _ring_core(name: str) -> dict:
    routers, links, devices = [], [], []
    for i in range(RING_N):
        rid = f"n{i}"
        nl = 3 if i in (0, 3) else 2
        ports = ("load", "grid") if i == 0 else ("load", "solar") if i == 3 else ("load",)
        routers.append(router(rid, "ring", n_links=nl, ports=ports))
        devices.append(load(f"load{i}", rid, [[[0, 600.0], [1, 400.0], [4, 500.0]]]))
    for i in range(RING_N):
        j = (i + 1) % RING_N
        links.append(link(f"ring{i}", f"n{i}", "c0", f"n{j}", "c1", 8000.0, 0.005))
    links.append(link("cross", "n0", "c2", "n3", "c2", 8000.0, 0.005))
    devices.append(grid("feed", "n0", 12000.0))
    devices.append(solar("pv3", "n3", 3000.0, [0.5]))
    return {
        "meta": {"name": name, "seed": 7, "ticks": 40, "tick_seconds": 60},
        "topology": {"routers": routers, "links": links, "elans": [{"id": "ring"}]},
        "devices": devices,
    }


def ring() -> dict:
    """Six routers in a ring with one cross-connection; the grid feed enters at n0."""
    sc = _ring_core("ring")
    sc["failures"] = [{"tick": 10, "kind": "LinkCut", "target": "ring2"}]
    return sc


def radial_baseline() -> dict:
    """The ring's loads on a radial feeder from the same substation, with one mid-feeder cut."""
    sc = _ring_core("radial_baseline")
    sc["baseline"] = {
        "root": "sub",
        "source": "feed",
        "edges": [
            {"id": "f0", "parent": "sub", "child": "n0", "capacity_w": 12000.0},
            {"id": "f1", "parent": "n0", "child": "n1", "capacity_w": 8000.0},
            {"id": "f2", "parent": "n1", "child": "n2", "capacity_w": 8000.0},
            {"id": "f3", "parent": "n2", "child": "n3", "capacity_w": 8000.0},
            {"id": "f4", "parent": "n0", "child": "n5", "capacity_w": 8000.0},
            {"id": "f5", "parent": "n5", "child": "n4", "capacity_w": 8000.0},
        ],
        "loads": {f"n{i}": [f"load{i}"] for i in range(RING_N)},
        "failures": [{"tick": 10, "kind": "LinkCut", "target": "f2"}],
    }
    return sc


DISTRICT_ELANS = 4
DISTRICT_HOMES = 10


def district_load(k: int) -> list[list[list]]:
    rows = []
    for h in range(DAY):
        base = 700.0 + 50.0 * (k % 3)
        evening = 18 <= h <= 19
        rows.append([[0, 300.0], [2, base], [4, 2600.0 if evening else 300.0]])
    return rows


def district(sharing: bool = True, storage: bool = True) -> dict:
    """Four neighbourhoods of ten homes; every home has rooftop solar and a grid feed, some a battery."""
    routers, links, devices, peerings, rules = [], [], [], [], []
    for e in range(DISTRICT_ELANS):
        elan = f"hood{e}"
        for k in range(DISTRICT_HOMES):
            rid = f"h{e}{k}"
            gw = k == 0
            routers.append(router(rid, elan, n_links=3 if gw else 2, role="gateway" if gw else "aggregation",
                                  ports=("load", "solar", "store", "grid")))
            devices.append(solar(f"pv{e}{k}", rid, 3000.0 + 500.0 * (k % 2), SUN))
            devices.append(load(f"load{e}{k}", rid, district_load(k)))
            devices.append(grid(f"grid{e}{k}", rid, 12000.0))
            if k % 2 == 0:
                devices.append(battery(f"bat{e}{k}", rid, 13.5, 4.0, 5000.0))
        for k in range(DISTRICT_HOMES):
            j = (k + 1) % DISTRICT_HOMES
            links.append(link(f"l{e}{k}", f"h{e}{k}", "c0", f"h{e}{j}", "c1", 15000.0, 0.005))
    for e in range(DISTRICT_ELANS):
        f = (e + 1) % DISTRICT_ELANS
        lid = f"peer{e}{f}"
        # gateway c2 ports: h{e}0 towards the next hood; h{f}0 receives on its own c2 only once, so use h{f}5
        links.append(link(lid, f"h{e}0", "c2", f"h{f}5", "c2", 10000.0, 0.01))
        peerings.append({"elan_a": f"hood{e}", "elan_b": f"hood{f}", "link": lid})
        rules.append({"router": f"h{e}0", "from": f"h{f}5", "msg_type": "Request"})
    for r in routers:
        if r["id"].endswith("5"):
            r["ports"].append({"id": "c2", "side": "C", "p_max_w": 20000.0, **DC})
    return {
        "meta": {"name": "district", "seed": 3, "ticks": DAY, "tick_seconds": 3600},
        "topology": {"routers": routers, "links": links, "peerings": peerings,
                     "elans": [{"id": f"hood{e}", "carbon": 0.1 * e} for e in range(DISTRICT_ELANS)]},
        "devices": devices,
        "inbound_rules": rules,
        "dispatch": {"sharing": sharing, "storage": storage},
        "protocol": {"grant_ticks": 12, "renew_lead": 10, "advert_interval": 1, "advert_ttl": 6},
        "market": {"interval_ticks": 4},
    }


OUTAGE_AT = 20


def outage() -> dict:
    """A small islandable ELAN: the battery is held in reserve until the grid feed fails."""
    routers = [router("hub", "isle", n_links=2, ports=("load", "store", "grid")),
               router("west", "isle", n_links=1, ports=("load",)),
               router("east", "isle", n_links=1, ports=("load",))]
    links = [link("hw", "hub", "c0", "west", "c0", 5000.0), link("he", "hub", "c1", "east", "c0", 5000.0)]
    devices = [
        grid("mains", "hub", 10000.0),
        battery("bank", "hub", 5.0, 4.0, 4000.0, mode="backup"),
        load("hubload", "hub", [[[0, 1000.0], [3, 1500.0]]]),
        load("westload", "west", [[[4, 800.0]]]),
        load("eastload", "east", [[[5, 900.0]]]),
    ]
    return {
        "meta": {"name": "outage", "seed": 5, "ticks": 360, "tick_seconds": 60},
        "topology": {"routers": routers, "links": links, "elans": [{"id": "isle"}]},
        "devices": devices,
        "dispatch": {"storage_reserve_class": 0},
        "failures": [{"tick": OUTAGE_AT, "kind": "GridOutage", "target": "mains"}],
        "baseline": {
            "root": "sub", "source": "mains",
            "edges": [{"id": "fh", "parent": "sub", "child": "hub", "capacity_w": 10000.0},
                      {"id": "fw", "parent": "hub", "child": "west", "capacity_w": 5000.0},
                      {"id": "fe", "parent": "hub", "child": "east", "capacity_w": 5000.0}],
            "loads": {"hub": ["hubload"], "west": ["westload"], "east": ["eastload"]},
        },
    }


PRESETS = {"sws0": sws0, "ring": ring, "district": district, "outage": outage, "radial_baseline": radial_baseline}


def preset_bytes(name: str) -> bytes:
    return canonical_dumps(PRESETS[name]())


def preset_path(name: str) -> Path:
    return Path(str(resources.files("energynet") / "presets" / f"{name}.json"))


def load_preset(name: str) -> dict:
    import json
    return json.loads(preset_path(name).read_text())


def write_presets(directory: Path | None = None) -> list[Path]:
    out = []
    for name in PRESETS:
        p = (directory / f"{name}.json") if directory is not None else preset_path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(preset_bytes(name))
        out.append(p)
    return out


def variant(sc: dict, **changes) -> dict:
    """Deep copy of a scenario document with top-level sections updated."""
    out = copy.deepcopy(sc)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out
