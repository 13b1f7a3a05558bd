"""Energy Router Operating System: grant admission, backplane planning, firewall, failover."""

from .planning import (
    EXPORT_LEVEL, STORAGE_LEVEL, SURPLUS_LEVEL, ConservationError, DeviceStepError, Flow, FlowPlan,
    apply_flows, check_router_balance, plan_and_apply, plan_flows,
)
from .router import (
    AdmissionError, BadToken, BothFailed, EnergyRouter, Gate, Grant, GrantState, IllegalGrantState,
    PowerLimitExceeded, SupState, Supervisor, UnknownPort, VoltageMismatch, admit_grant, firewall_gate,
    refresh_grants, supervisor_tick,
)
