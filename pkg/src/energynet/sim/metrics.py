"""Run metrics computed from trace rows alone."""

from __future__ import annotations

from typing import Iterable

from ..core import N_CLASSES

CRITICAL = (0, 1)  # classes that count towards the resilience index


def resilience_index(served_j: list[float], demand_j: list[float], classes=CRITICAL) -> float:
    """Fraction of critical-class demand served; 1.0 when there was none."""
    d = sum(demand_j[c] for c in classes)
    if d <= 0:
        return 1.0
    return sum(served_j[c] for c in classes) / d


def compute_metrics(trace: Iterable[dict]) -> dict:
    served = [0.0] * N_CLASSES
    demand = [0.0] * N_CLASSES
    peak = 0.0
    grid_in = grid_out = gen = loss = load = 0.0
    ticks = 0
    denies = 0
    dark_ticks = 0
    msgs: dict[str, int] = {}
    balances: dict[str, int] = {}
    settled = 0
    for row in trace:
        ts = row["dt_s"]
        ticks += 1
        for r in row["routers"].values():
            for c in range(N_CLASSES):
                served[c] += r["served"][c] * ts
                demand[c] += r["demand"][c] * ts
            dark_ticks += bool(r["dark"])
        peak = max(peak, row["grid_import_w"])
        grid_in += row["grid_import_w"] * ts
        grid_out += row["grid_export_w"] * ts
        gen += row["generation_w"] * ts
        loss += row["loss_w"] * ts
        load += row["load_w"] * ts
        denies += len(row["denies"])
        for k, v in row["messages"].items():
            msgs[k] = msgs.get(k, 0) + v
        for e in row.get("settlements", ()):
            if "amount_micro" in e:
                settled += 1
                balances[e["buyer"]] = balances.get(e["buyer"], 0) - e["amount_micro"]
                balances[e["seller"]] = balances.get(e["seller"], 0) + e["amount_micro"]
    unserved = [d - s for s, d in zip(served, demand)]
    return {
        "ticks": ticks,
        "served_j": served,
        "demand_j": demand,
        "unserved_j": unserved,
        "served_fraction": [s / d if d > 0 else 1.0 for s, d in zip(served, demand)],
        "resilience_index": resilience_index(served, demand),
        "peak_grid_import_w": peak,
        "grid_import_j": grid_in,
        "grid_export_j": grid_out,
        "generation_j": gen,
        "load_j": load,
        "loss_j": loss,
        "denies": denies,
        "dark_router_ticks": dark_ticks,
        "messages": dict(sorted(msgs.items())),
        "ledger": {"settlements": settled, "net_micro": sum(balances.values()),
                   "turnover_micro": sum(v for v in balances.values() if v > 0),
                   "balances_micro": dict(sorted(balances.items()))},
    }
