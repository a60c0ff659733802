import random
import socket
import threading
import time

import pytest

from labnet.clock import ManualClock, ScaledClock, SystemClock
from labnet.collector import (
    Collector,
    EngineSink,
    NodeRegistryEntry,
    load_registry,
)
from labnet.errors import StorageUnavailable, ValidationError
from labnet.node import NodeAgent, NodeConfig, SensorBinding, SensorModel
from labnet.storage import SeriesQuery, Store

SEC = 10**9


def make_agent(room="Lab01", device="Dev01", clock=None):
    config = NodeConfig(
        room_id=room, device_id=device, mode="pull",
        sensors=[SensorBinding("temperature", "T1",
                               SensorModel(kind="constant", base=21.6, unit="degC"))],
        seed=1,
    )
    agent = NodeAgent(config, clock=clock or SystemClock())
    agent.start()
    return agent


class _ListSink:
    def __init__(self):
        self.batches = []
        self.fail = False

    def write_points(self, points):
        if self.fail:
            raise StorageUnavailable("down")
        self.batches.append(list(points))


@pytest.fixture
def agents():
    started = [make_agent("Lab01", f"Dev{i:02d}") for i in range(3)]
    yield started
    for agent in started:
        agent.stop()


def registry_for(agents, interval=1.0):
    return [
        NodeRegistryEntry(a.config.room_id, a.config.device_id,
                          a.config.listen_host, a.config.listen_port,
                          interval_s=interval)
        for a in agents
    ]


class TestPollCycle:
    def test_three_healthy_nodes(self, agents):
        sink = _ListSink()
        collector = Collector(registry_for(agents), sink, response_timeout_s=2.0)
        points = collector.poll_cycle()
        collector.stop()
        assert len(points) == 3
        assert all(e.responses_received == 1 for e in collector.registry)
        report = collector.delivery_efficiency(0, 2**63 - 1)
        assert report.aggregate == 1.0

    def test_one_silent_node_times_out_others_polled(self, agents):
        agents[1].frozen = True
        sink = _ListSink()
        collector = Collector(registry_for(agents), sink, response_timeout_s=0.3)
        points = collector.poll_cycle()
        collector.stop()
        assert len(points) == 2
        assert collector.registry[1].timeouts == 1
        assert collector.registry[0].responses_received == 1
        assert collector.registry[2].responses_received == 1

    def test_garbage_response_is_parse_failure(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]

        def responder():
            data, addr = sock.recvfrom(2048)
            token = data.split()[1].decode()
            sock.sendto(f"ACK {token} ???not-a-payload".encode(), addr)

        thread = threading.Thread(target=responder, daemon=True)
        thread.start()
        entry = NodeRegistryEntry("Lab01", "Dev01", "127.0.0.1", port, 1.0)
        collector = Collector([entry], _ListSink(), response_timeout_s=2.0)
        points = collector.poll_cycle()
        collector.stop()
        sock.close()
        assert points == []
        assert entry.parse_failures == 1
        assert entry.responses_received == 0

    def test_accounting_consistency(self, agents):
        agents[2].drop_probability = 0.5
        sink = _ListSink()
        collector = Collector(registry_for(agents), sink, response_timeout_s=0.05)
        now = 0
        for cycle in range(30):
            collector.poll_cycle(now_ns=now)
            now += SEC
        collector.stop()
        for entry in collector.registry:
            assert entry.polls_sent - entry.responses_received == (
                entry.timeouts + entry.parse_failures
            )
            assert entry.polls_sent == 30

    def test_no_duplicate_forwarding_on_duplicate_sequence(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        stop = threading.Event()

        def responder():
            while not stop.is_set():
                try:
                    sock.settimeout(0.5)
                    data, addr = sock.recvfrom(2048)
                except OSError:
                    continue
                token = data.split()[1].decode()
                # always sequence 5: duplicate after the first cycle
                sock.sendto(f"ACK {token} Lab01;Dev01;5|temperature:T1=1.0".encode(), addr)

        thread = threading.Thread(target=responder, daemon=True)
        thread.start()
        entry = NodeRegistryEntry("Lab01", "Dev01", "127.0.0.1", port, 1.0)
        sink = _ListSink()
        collector = Collector([entry], sink, response_timeout_s=2.0)
        now = 0
        for _ in range(3):
            collector.poll_cycle(now_ns=now)
            now += SEC
        stop.set()
        collector.stop()
        sock.close()
        assert entry.responses_received == 3
        forwarded = sum(len(b) for b in sink.batches)
        assert forwarded == 1  # (node, sequence) forwarded at most once

    def test_gap_detection_on_node_reset(self, agents):
        sink = _ListSink()
        collector = Collector(registry_for(agents[:1]), sink, response_timeout_s=2.0)
        now = 0
        collector.poll_cycle(now_ns=now)  # seq 0
        collector.poll_cycle(now_ns=now + SEC)  # seq 1
        agents[0].reset(now_ns=0)  # sequence back to zero
        time.sleep(0.15)  # let the agent loop pick up the fresh socket
        collector.poll_cycle(now_ns=now + 2 * SEC)  # seq 0 again
        collector.stop()
        entry = collector.registry[0]
        assert entry.gaps_detected >= 1  # reset surfaced as a discontinuity
        assert sum(len(b) for b in sink.batches) == 3  # reset data still forwarded

    def test_points_stamped_with_arrival_time(self, agents):
        store_clock = ManualClock(123 * SEC)
        sink = _ListSink()
        collector = Collector(registry_for(agents[:1]), sink,
                              clock=store_clock, response_timeout_s=2.0)
        points = collector.poll_cycle()
        collector.stop()
        assert points[0].timestamp >= 123 * SEC


class TestForward:
    def test_batch_written_atomically(self, tmp_path, agents):
        store = Store(tmp_path / "s")
        collector = Collector(registry_for(agents), EngineSink(store),
                              response_timeout_s=2.0)
        points = collector.poll_cycle()
        collector.stop()
        frames = store.query(SeriesQuery(
            measurement="temperature", start_ns=0, end_ns=2**62))
        assert sum(len(f) for f in frames) == len(points) == 3
        store.close()

    def test_storage_down_requeues_then_recovers_in_order(self, agents):
        sink = _ListSink()
        sink.fail = True
        collector = Collector(registry_for(agents[:1]), sink, response_timeout_s=2.0)
        now = 0
        for _ in range(2):
            collector.poll_cycle(now_ns=now)
            now += SEC
        assert not collector.healthy
        assert len(collector.forward_queue) == 2
        sink.fail = False
        collector.poll_cycle(now_ns=now)
        collector.stop()
        assert collector.healthy
        assert len(collector.forward_queue) == 0
        delivered = [p for batch in sink.batches for p in batch]
        stamps = [p.timestamp for p in delivered]
        assert stamps == sorted(stamps)
        assert len(delivered) == 3

    def test_empty_batch_noop(self):
        collector = Collector([], _ListSink())
        assert collector.poll_cycle() == []
        collector.stop()


class TestDeliveryReport:
    def entry_with_events(self, events):
        entry = NodeRegistryEntry("L", "D", "h", 1, 1.0)
        entry.events.extend(events)
        return entry

    def test_perfect_window(self):
        entry = self.entry_with_events([(i * SEC, "ok") for i in range(100)])
        collector = Collector([entry], _ListSink())
        report = collector.delivery_efficiency(0, 100 * SEC)
        collector.stop()
        assert report.per_node["L/D"] == 1.0
        assert report.aggregate == 1.0

    def test_no_polls_absent_not_zero(self):
        entry = self.entry_with_events([])
        collector = Collector([entry], _ListSink())
        report = collector.delivery_efficiency(0, SEC)
        collector.stop()
        assert report.per_node["L/D"] is None
        assert report.aggregate is None

    def test_ninety_percent(self):
        events = [(i * SEC, "ok" if i % 10 else "timeout") for i in range(100)]
        entry = self.entry_with_events(events)
        collector = Collector([entry], _ListSink())
        report = collector.delivery_efficiency(0, 100 * SEC)
        collector.stop()
        assert report.per_node["L/D"] == 0.9

    def test_window_filtering(self):
        events = [(i * SEC, "ok") for i in range(50)] + [
            (i * SEC, "timeout") for i in range(50, 100)
        ]
        entry = self.entry_with_events(events)
        collector = Collector([entry], _ListSink())
        assert collector.delivery_efficiency(0, 50 * SEC).per_node["L/D"] == 1.0
        assert collector.delivery_efficiency(50 * SEC, 100 * SEC).per_node["L/D"] == 0.0
        collector.stop()

    def test_bad_window_rejected(self):
        collector = Collector([], _ListSink())
        with pytest.raises(ValidationError):
            collector.delivery_efficiency(10, 10)
        collector.stop()


class TestBernoulliLoss:
    def test_ten_percent_loss_efficiency(self):
        """Shortened version of the acceptance criterion: known loss rate."""
        agent = make_agent()
        agent.drop_probability = 0.1
        sink = _ListSink()
        collector = Collector(registry_for([agent]), sink, response_timeout_s=0.03)
        now = 0
        for _ in range(400):
            collector.poll_cycle(now_ns=now)
            now += SEC
        collector.stop()
        agent.stop()
        report = collector.delivery_efficiency(0, now)
        assert report.aggregate == pytest.approx(0.9, abs=0.05)


class TestLiveness:
    def test_dead_node_never_blocks_others(self, agents):
        agents[0].frozen = True
        clock = ScaledClock(timescale=100.0, epoch_ns=0)
        collector = Collector(registry_for(agents, interval=1.0), _ListSink(),
                              clock=clock, response_timeout_s=0.5)
        collector.start()
        time.sleep(0.5)  # 50 simulated seconds
        collector.stop()
        healthy_polls = [e.polls_sent for e in collector.registry[1:]]
        # every healthy node kept being polled at the cadence (+-10% plus
        # scheduling slack for the dead node's timeout windows)
        assert min(healthy_polls) >= 20
        assert collector.registry[0].timeouts == collector.registry[0].polls_sent


class TestRegistryFile:
    def test_load(self, tmp_path):
        path = tmp_path / "registry.conf"
        path.write_text(
            "# room device host:port interval_s\n"
            "Lab01 Dev01 127.0.0.1:5151 20\n"
            "Lab02 Dev02 10.0.0.7:5151 1.5\n"
        )
        entries = load_registry(str(path))
        assert len(entries) == 2
        assert entries[0].address == ("127.0.0.1", 5151)
        assert entries[1].interval_s == 1.5

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "registry.conf"
        path.write_text("Lab01 Dev01 127.0.0.1:5151\n")
        with pytest.raises(ValidationError):
            load_registry(str(path))
