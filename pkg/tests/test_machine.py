import pytest
from hypothesis import given, settings, strategies as st

from cloudrts.machine import (CheckpointMode, ConfigError, DeviceProfile, InstanceProfile,
                              NetworkModel, TimingModel, checkpoint_time, compute_time,
                              load_calibration, merge_calibration, message_time,
                              migration_time, restart_time)

GB = 1e9
MB = 1e6
TM = TimingModel(restart_base=5.0, restart_per_instance=0.5, fs_bandwidth=2 * GB)
HOST = InstanceProfile("host", 4, 1.0, 20 * GB)
DEV = InstanceProfile("dev", 4, 1.0, 20 * GB, DeviceProfile(1.0, 300 * GB))


def test_compute_time_examples():
    assert compute_time(100, 50) == 2.0
    assert compute_time(100, 100) == 1.0
    assert compute_time(0, 7) == 0.0
    with pytest.raises(ConfigError):
        compute_time(1, 0)


def test_message_time_examples():
    net = NetworkModel(100e-6, 1 * GB)
    assert message_time(1 * MB, net) == pytest.approx(1.1e-3)
    assert message_time(0, net) == pytest.approx(100e-6)
    fair = NetworkModel(100e-6, 1 * GB, "per-link-fair-share")
    assert message_time(1 * MB, fair, 4) == pytest.approx(4.1e-3)
    with pytest.raises(ValueError):
        message_time(1, net, 0)


def test_restart_time_examples():
    assert restart_time(4, TM) == 7.0
    assert restart_time(8, TM) == 9.0
    with pytest.raises(ValueError):
        restart_time(0, TM)


def test_checkpoint_time_examples():
    assert checkpoint_time(1 * GB, 3, CheckpointMode.IN_MEMORY, HOST, TM) == pytest.approx(0.05)
    assert checkpoint_time(1 * GB, 8, CheckpointMode.SHARED_FS, HOST, TM) == pytest.approx(4.0)
    dev = checkpoint_time(0, 1, CheckpointMode.DAEMON, DEV, TM, device_bytes_per_instance=1 * GB)
    assert dev == pytest.approx(1 / 300)
    assert dev < checkpoint_time(1 * GB, 1, CheckpointMode.IN_MEMORY, DEV, TM) / 10


def test_daemon_mode_without_device_is_config_error():
    with pytest.raises(ConfigError):
        checkpoint_time(1, 1, CheckpointMode.DAEMON, HOST, TM)


def test_shared_fs_doubles_with_instances_in_memory_constant():
    b = 64 * MB
    fs4 = checkpoint_time(b, 4, CheckpointMode.SHARED_FS, HOST, TM)
    fs8 = checkpoint_time(b, 8, CheckpointMode.SHARED_FS, HOST, TM)
    assert fs8 == pytest.approx(2 * fs4)
    mem = {n: checkpoint_time(b, n, CheckpointMode.IN_MEMORY, HOST, TM) for n in (1, 4, 8, 16)}
    assert len(set(mem.values())) == 1


def test_per_instance_byte_lists():
    t = checkpoint_time([1 * GB, 2 * GB], 2, CheckpointMode.IN_MEMORY, HOST, TM)
    assert t == pytest.approx(0.1)
    with pytest.raises(ValueError):
        checkpoint_time([1, 2, 3], 2, CheckpointMode.IN_MEMORY, HOST, TM)
    with pytest.raises(ValueError):
        checkpoint_time(-1, 2, CheckpointMode.IN_MEMORY, HOST, TM)


def test_staging_factor_applies_only_without_rdma():
    net = NetworkModel(0.0, 1 * GB)
    plain = migration_time(1 * GB, net, TM)
    assert migration_time(1 * GB, net, TM, device_resident=True) == pytest.approx(3 * plain)
    assert migration_time(1 * GB, net, TM, device_resident=True, rdma=True) == plain


def test_profile_and_model_validation():
    with pytest.raises(ConfigError):
        InstanceProfile("x", 0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        InstanceProfile("x", 1, 0.0, 1.0)
    with pytest.raises(ConfigError):
        DeviceProfile(0.0, 1.0)
    with pytest.raises(ConfigError):
        NetworkModel(-1.0, 1.0)
    with pytest.raises(ConfigError):
        NetworkModel(0.0, 0.0)
    with pytest.raises(ConfigError):
        NetworkModel(0.0, 1.0, "mesh")
    with pytest.raises(ConfigError):
        TimingModel(1.0, 1.0, 1.0, staging_factor=0.5)
    with pytest.raises(ConfigError):
        TimingModel(-1.0, 1.0, 1.0)


def test_gpu_profile_runs_one_pe_per_device():
    cal = load_calibration()
    gpu = cal.profile("gpu-t4")
    assert gpu.has_device and gpu.pes_per_instance == 1
    assert gpu.pe_rate == gpu.device.device_rate
    assert cal.profile("cpu-c6gn").pes_per_instance == 2


def test_shipped_calibration_round_trips_and_merges():
    cal = load_calibration()
    for name in ("tcp", "latency-dominant", "zero"):
        cal.network(name)
    assert cal.timing("cpu").restart_base < cal.timing("gpu").restart_base
    merged = merge_calibration(cal, {"timings": {"cpu": {"restart_base": 1.0}},
                                     "runtime": {"launch_delay": 2.0}})
    assert merged.timing("cpu").restart_base == 1.0
    assert merged.timing("cpu").fs_bandwidth == cal.timing("cpu").fs_bandwidth
    assert merged.runtime["launch_delay"] == 2.0
    with pytest.raises(ConfigError):
        cal.profile("nope")


def test_malformed_calibration_file(tmp_path):
    p = tmp_path / "cal.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_calibration(p)
    p.write_text('{"profiles": {"x": {"pe_count": 1}}}')
    with pytest.raises(ConfigError):
        load_calibration(p)


sizes = st.floats(0, 1e9, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(sizes, sizes, st.integers(1, 64), st.integers(1, 64),
       st.sampled_from(["none", "per-link-fair-share"]))
def test_message_time_monotone(s1, s2, k1, k2, mode):
    net = NetworkModel(1e-4, 1e8, mode)
    lo_s, hi_s = sorted((s1, s2))
    lo_k, hi_k = sorted((k1, k2))
    assert message_time(lo_s, net, lo_k) <= message_time(hi_s, net, lo_k)
    assert message_time(lo_s, net, lo_k) <= message_time(lo_s, net, hi_k)


@settings(max_examples=300, deadline=None)
@given(st.floats(1.0, 1e9), st.integers(1, 63), st.floats(1e-3, 10.0))
def test_checkpoint_and_restart_laws(b, n, per):
    fs_n = checkpoint_time(b, n, CheckpointMode.SHARED_FS, HOST, TM)
    fs_n1 = checkpoint_time(b, n + 1, CheckpointMode.SHARED_FS, HOST, TM)
    assert fs_n < fs_n1
    assert (checkpoint_time(b, n, CheckpointMode.IN_MEMORY, HOST, TM)
            == checkpoint_time(b, n + 1, CheckpointMode.IN_MEMORY, HOST, TM))
    tm = TimingModel(5.0, per, 1.0)
    assert restart_time(n, tm) < restart_time(n + 1, tm)
