"""A broker for parameter-sweep jobs on heterogeneous compute resources."""

from .bench import BenchProfile, bench
from .broker import Broker, RunConfig, RunReport, recover_cli, run, status
from .model import (
    ApplicationContext,
    ComputeServer,
    Credential,
    DataHost,
    Event,
    Job,
    JobState,
    NetworkLink,
    QoS,
    Task,
    can_retry,
    expand_task,
    iter_expand,
    transition,
)
from .scheduler import PolicyKind, schedule_tick, select_data_hosts
from .store import open_store, recover

__all__ = [
    "ApplicationContext", "BenchProfile", "Broker", "ComputeServer", "Credential", "DataHost",
    "Event", "Job", "JobState", "NetworkLink", "PolicyKind", "QoS", "RunConfig", "RunReport",
    "Task", "bench", "can_retry", "expand_task", "iter_expand", "open_store", "recover",
    "recover_cli", "run", "schedule_tick", "select_data_hosts", "status", "transition",
]

__version__ = "0.1.0"
