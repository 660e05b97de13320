"""Instance profiles and the linear timing models built on them.

Every duration in a run comes from one of the functions here. The shipped
constants live in ``calibration.json`` next to this module.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence


class ConfigError(ValueError):
    """Invalid configuration detected before or during a run."""


class CheckpointMode(enum.Enum):
    SHARED_FS = "SharedFS"
    IN_MEMORY = "InMemory"
    DAEMON = "InMemoryWithDaemon"


@dataclass(frozen=True)
class DeviceProfile:
    device_rate: float
    device_mem_bw: float
    rdma: bool = False

    def __post_init__(self):
        if self.device_rate <= 0 or self.device_mem_bw <= 0:
            raise ConfigError("device rates and bandwidths must be positive")


@dataclass(frozen=True)
class InstanceProfile:
    name: str
    pe_count: int
    compute_rate: float
    host_mem_bw: float
    device: Optional[DeviceProfile] = None
    # Optional host memory capacity in bytes; None means unbounded.
    mem_capacity: Optional[float] = None

    def __post_init__(self):
        if self.pe_count < 1:
            raise ConfigError(f"profile {self.name!r}: pe_count must be >= 1")
        if self.compute_rate <= 0 or self.host_mem_bw <= 0:
            raise ConfigError(f"profile {self.name!r}: rates and bandwidths must be positive")

    @property
    def has_device(self) -> bool:
        return self.device is not None

    @property
    def pe_rate(self) -> float:
        """Work rate of one PE; a GPU instance runs one PE per device."""
        return self.device.device_rate if self.device else self.compute_rate

    @property
    def pes_per_instance(self) -> int:
        return 1 if self.device else self.pe_count


@dataclass(frozen=True)
class NetworkModel:
    latency: float
    bandwidth: float
    contention_mode: str = "none"
    # Node-local path used for messages between PEs of the same instance.
    intra_latency: float = 0.0
    intra_bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.latency < 0 or self.intra_latency < 0:
            raise ConfigError("latency must be >= 0")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be > 0")
        if self.intra_bandwidth is not None and self.intra_bandwidth <= 0:
            raise ConfigError("intra_bandwidth must be > 0")
        if self.contention_mode not in ("none", "per-link-fair-share"):
            raise ConfigError(f"unknown contention_mode {self.contention_mode!r}")

    def node_local(self, host_mem_bw: float) -> "NetworkModel":
        bw = self.intra_bandwidth if self.intra_bandwidth is not None else host_mem_bw
        return NetworkModel(self.intra_latency, bw, "none")


@dataclass(frozen=True)
class TimingModel:
    restart_base: float
    restart_per_instance: float
    fs_bandwidth: float
    t_grace: float = 120.0
    staging_factor: float = 3.0
    daemon_startup: float = 0.1

    def __post_init__(self):
        if min(self.restart_base, self.restart_per_instance, self.t_grace,
               self.daemon_startup) < 0:
            raise ConfigError("timing constants must be non-negative")
        if self.fs_bandwidth <= 0:
            raise ConfigError("fs_bandwidth must be > 0")
        if self.staging_factor < 1:
            raise ConfigError("staging_factor must be >= 1")


def compute_time(work: float, rate: float) -> float:
    if rate <= 0:
        raise ConfigError(f"rate must be positive, got {rate}")
    return work / rate


def message_time(size: float, net: NetworkModel, concurrent: int = 1) -> float:
    """Latency plus transfer time; fair-share divides the link among ``concurrent``."""
    if concurrent < 1:
        raise ValueError("concurrent must be >= 1")
    if net.contention_mode == "per-link-fair-share":
        return net.latency + size * concurrent / net.bandwidth
    return net.latency + size / net.bandwidth


def restart_time(n_instances: int, tm: TimingModel) -> float:
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    return tm.restart_base + tm.restart_per_instance * n_instances


def checkpoint_time(bytes_per_instance, n_instances: int, mode: CheckpointMode,
                    profile: InstanceProfile, tm: TimingModel,
                    device_bytes_per_instance=0.0) -> float:
    """Time to write (or read back) one checkpoint image.

    ``bytes_per_instance`` and ``device_bytes_per_instance`` may be scalars
    (uniform instances) or sequences with one entry per instance. For
    SharedFS and InMemory every byte counts as host data.
    """
    host = _as_list(bytes_per_instance, n_instances)
    dev = _as_list(device_bytes_per_instance, n_instances)
    if any(b < 0 for b in host) or any(b < 0 for b in dev):
        raise ValueError("byte counts must be non-negative")
    if mode is CheckpointMode.SHARED_FS:
        return (sum(host) + sum(dev)) / tm.fs_bandwidth
    if mode is CheckpointMode.IN_MEMORY:
        return max(h + d for h, d in zip(host, dev)) / profile.host_mem_bw
    if profile.device is None:
        raise ConfigError(f"daemon checkpointing needs a device; profile {profile.name!r} has none")
    return max(h / profile.host_mem_bw + d / profile.device.device_mem_bw
               for h, d in zip(host, dev))


def migration_time(state_bytes: float, net: NetworkModel, tm: TimingModel,
                   device_resident: bool = False, rdma: bool = False) -> float:
    """Latency plus transfer; host staging multiplies only the transfer leg."""
    transfer = state_bytes / net.bandwidth
    if device_resident and not rdma:
        transfer *= tm.staging_factor
    return net.latency + transfer


def _as_list(value, n: int) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * n
    values = [float(v) for v in value]
    if len(values) != n:
        raise ValueError(f"expected {n} per-instance values, got {len(values)}")
    return values


# --------------------------------------------------------------------------
# calibration file


@dataclass
class Calibration:
    profiles: dict[str, InstanceProfile]
    networks: dict[str, NetworkModel]
    timings: dict[str, TimingModel]
    runtime: dict[str, float] = field(default_factory=dict)

    def profile(self, name: str) -> InstanceProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise ConfigError(f"unknown instance profile {name!r}") from None

    def network(self, name: str) -> NetworkModel:
        try:
            return self.networks[name]
        except KeyError:
            raise ConfigError(f"unknown network model {name!r}") from None

    def timing(self, name: str) -> TimingModel:
        try:
            return self.timings[name]
        except KeyError:
            raise ConfigError(f"unknown timing model {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "profiles": {k: _strip_none(asdict(v)) for k, v in self.profiles.items()},
            "networks": {k: _strip_none(asdict(v)) for k, v in self.networks.items()},
            "timings": {k: asdict(v) for k, v in self.timings.items()},
            "runtime": dict(self.runtime),
        }


RUNTIME_DEFAULTS = {
    "task_overhead": 5e-6,
    "message_overhead": 1e-6,
    "header_bytes": 1024,
    "launch_delay": 30.0,
    "t_timeout": 120.0,
    "lb_period": 50,
    "warmup_iterations": 5,
}


def _strip_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def profile_from_dict(name: str, d: Mapping) -> InstanceProfile:
    dev = d.get("device")
    return InstanceProfile(
        name=name,
        pe_count=int(d["pe_count"]),
        compute_rate=float(d["compute_rate"]),
        host_mem_bw=float(d["host_mem_bw"]),
        device=DeviceProfile(**dev) if dev else None,
        mem_capacity=d.get("mem_capacity"),
    )


def calibration_from_dict(data: Mapping) -> Calibration:
    runtime = dict(RUNTIME_DEFAULTS)
    runtime.update(data.get("runtime", {}))
    return Calibration(
        profiles={k: profile_from_dict(k, v) for k, v in data.get("profiles", {}).items()},
        networks={k: NetworkModel(**v) for k, v in data.get("networks", {}).items()},
        timings={k: TimingModel(**v) for k, v in data.get("timings", {}).items()},
        runtime=runtime,
    )


def load_calibration(path=None) -> Calibration:
    """Load a calibration file; ``None`` loads the shipped defaults."""
    if path is None:
        text = resources.files("cloudrts").joinpath("calibration.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"calibration file is not valid JSON: {exc}") from exc
    try:
        return calibration_from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed calibration entry: {exc}") from exc


def merge_calibration(base: Calibration, overrides: Mapping) -> Calibration:
    data = base.to_dict()
    for section in ("profiles", "networks", "timings", "runtime"):
        for key, value in overrides.get(section, {}).items():
            if section == "runtime":
                data[section][key] = value
            else:
                merged = dict(data[section].get(key, {}))
                merged.update(value)
                data[section][key] = merged
    return calibration_from_dict(data)
