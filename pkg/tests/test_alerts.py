import itertools
import random

import numpy as np
import pytest

from labnet.alerts import (
    AMPLIFIER_OFF,
    AMPLIFIER_ON,
    AlertEngine,
    AlertRule,
    CommandBus,
    InterlockState,
    LogFileSink,
    Notifier,
    RuleStore,
    evaluate_rate,
    evaluate_threshold,
    interlock_step,
    least_squares_slope,
)
from labnet.errors import ValidationError
from labnet.storage import SeriesFrame, SeriesKey, Store
from labnet.wire import DataPoint

SEC = 10**9
MIN = 60 * SEC


def frame(values, step_ns=20 * SEC, start=0):
    ts = [start + i * step_ns for i in range(len(values))]
    key = SeriesKey("temperature", (("RoomID", "Lab03"),), "T1")
    return SeriesFrame(key, "degC", ts, [float(v) for v in values])


def threshold_rule(comparator=">", limit=30.0, rule_id="r1"):
    return AlertRule(id=rule_id, measurement="temperature", field="T1",
                     comparator=comparator, limit=limit)


class TestThreshold:
    def test_fires_at_first_violating_sample(self):
        events, firing = evaluate_threshold(
            threshold_rule(), frame([28, 29, 31]), firing=False
        )
        assert firing
        assert len(events) == 1
        assert events[0].state == "firing"
        assert events[0].ts_ns == 2 * 20 * SEC
        assert events[0].value == 31

    def test_all_compliant_no_events(self):
        events, firing = evaluate_threshold(
            threshold_rule(), frame([28, 29, 30]), firing=False
        )
        assert events == [] and not firing

    def test_resolve_at_first_compliant_sample(self):
        events, firing = evaluate_threshold(
            threshold_rule(), frame([31, 29]), firing=True
        )
        assert [e.state for e in events] == ["resolved"]
        assert not firing

    @pytest.mark.parametrize("comparator", [">", "<", ">=", "<="])
    def test_random_walk_matches_replay_oracle(self, comparator):
        rng = random.Random(hash(comparator) & 0xFFFF)
        values = list(itertools.accumulate(
            rng.uniform(-2, 2) for _ in range(500)
        ))
        rule = threshold_rule(comparator, limit=0.0)
        events, _ = evaluate_threshold(rule, frame(values), firing=False)
        # brute-force replay of the alternation contract
        expected = []
        firing = False
        cmp = {"<": lambda v: v < 0, ">": lambda v: v > 0,
               ">=": lambda v: v >= 0, "<=": lambda v: v <= 0}[comparator]
        for i, v in enumerate(values):
            if cmp(v) and not firing:
                firing = True
                expected.append(("firing", i * 20 * SEC))
            elif not cmp(v) and firing:
                firing = False
                expected.append(("resolved", i * 20 * SEC))
        assert [(e.state, e.ts_ns) for e in events] == expected

    def test_alternation_invariant(self):
        rng = random.Random(99)
        values = [rng.uniform(20, 40) for _ in range(300)]
        events, _ = evaluate_threshold(threshold_rule(), frame(values), firing=False)
        for a, b in zip(events, events[1:]):
            assert (a.state, b.state) in {("firing", "resolved"), ("resolved", "firing")}
        if events:
            assert events[0].state == "firing"


class TestRate:
    def rate_rule(self, limit=1.0):
        return AlertRule(id="rr", measurement="temperature", field="T1",
                         kind="rate", max_rate_per_min=limit, lookback_s=600)

    def test_bakeout_ramp_fires(self):
        # 2 degC/min ramp sampled at 20 s
        values = [20 + 2.0 * (i / 3) for i in range(30)]
        events, firing = evaluate_rate(self.rate_rule(1.0), frame(values), False)
        assert firing and events[0].state == "firing"
        assert events[0].value == pytest.approx(2.0, rel=1e-9)

    def test_flat_series_silent(self):
        events, firing = evaluate_rate(self.rate_rule(), frame([21.0] * 30), False)
        assert events == [] and not firing

    def test_slope_matches_polyfit_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = rng.integers(2, 40)
            ts = np.sort(rng.choice(np.arange(1, 10**6), size=n, replace=False)) * 10**3
            vals = rng.normal(0, 5, n)
            got = least_squares_slope(ts.tolist(), vals.tolist())
            if n >= 2 and len(set(ts.tolist())) > 1:
                want = np.polyfit((ts - ts[0]) / 60e9, vals, 1)[0]
                assert got == pytest.approx(want, abs=1e-9)

    def test_negative_ramp_fires_on_magnitude(self):
        values = [40 - 2.0 * (i / 3) for i in range(30)]
        events, firing = evaluate_rate(self.rate_rule(1.0), frame(values), False)
        assert firing

    def test_lookback_invariant_validated(self):
        with pytest.raises(ValidationError):
            AlertRule(id="x", measurement="m", field="f", kind="rate",
                      max_rate_per_min=1.0, lookback_s=10, period_s=20).validate()


def interlock_rule(min_v=40.0, max_v=100.0, margin=3.0, latching=True):
    return AlertRule(id="il", measurement="laser_power", field="seed",
                     kind="interlock", min_value=min_v, max_value=max_v,
                     margin=margin, latching=latching, target="Lab02")


class TestInterlock:
    def test_armed_below_min_trips(self):
        state, cmd = interlock_step(InterlockState(), interlock_rule(), 35.0, 100)
        assert state.state == "tripped"
        assert state.cause == "below-min"
        assert cmd == AMPLIFIER_OFF

    def test_armed_in_range_no_command(self):
        state, cmd = interlock_step(InterlockState(), interlock_rule(), 70.0, 100)
        assert state.state == "armed" and cmd is None

    def test_latching_stays_tripped(self):
        tripped = InterlockState("tripped", 0, "below-min")
        state, cmd = interlock_step(tripped, interlock_rule(latching=True), 70.0, 100)
        assert state.state == "tripped" and cmd is None

    def test_non_latching_rearm_inside_guard_band(self):
        tripped = InterlockState("tripped", 0, "below-min")
        rule = interlock_rule(latching=False)
        state, cmd = interlock_step(tripped, rule, 70.0, 100)
        assert state.state == "armed" and cmd == AMPLIFIER_ON

    def test_hysteresis_no_rearm_within_margin(self):
        rule = interlock_rule(min_v=40, max_v=100, margin=3, latching=False)
        tripped = InterlockState("tripped", 0, "below-min")
        for v in (41.0, 42.9, 97.5, 99.0):
            state, cmd = interlock_step(tripped, rule, v, 1)
            assert state.state == "tripped" and cmd is None
        state, cmd = interlock_step(tripped, rule, 43.0, 1)
        assert state.state == "armed" and cmd == AMPLIFIER_ON

    def test_exhaustive_enumeration_matches_reference_machine(self):
        rule_grid = [
            interlock_rule(40, 100, 3, latching)
            for latching in (False, True)
        ]

        def reference(state, rule, value):
            # independent restatement of the transition table
            if state.state == "armed":
                if value < rule.min_value:
                    return "tripped", AMPLIFIER_OFF
                if value > rule.max_value:
                    return "tripped", AMPLIFIER_OFF
                return "armed", None
            if rule.latching:
                return "tripped", None
            lo = rule.min_value + rule.effective_margin
            hi = rule.max_value - rule.effective_margin
            if lo <= value <= hi:
                return "armed", AMPLIFIER_ON
            return "tripped", None

        values = [v / 2.0 for v in range(60, 230)]  # 30.0 .. 114.5 in 0.5 steps
        for rule in rule_grid:
            for start in ("armed", "tripped"):
                for value in values:
                    state = InterlockState(start, 0, "below-min" if start == "tripped" else None)
                    got_state, got_cmd = interlock_step(state, rule, value, 7)
                    want_state, want_cmd = reference(state, rule, value)
                    assert (got_state.state, got_cmd) == (want_state, want_cmd), (
                        f"latching={rule.latching} start={start} value={value}"
                    )

    def test_safety_never_misses_out_of_range(self):
        rng = random.Random(6)
        rule = interlock_rule(latching=False)
        state = InterlockState()
        for _ in range(2000):
            v = rng.uniform(20, 120)
            state, cmd = interlock_step(state, rule, v, 1)
            if not rule.min_value <= v <= rule.max_value:
                assert state.state == "tripped"


class _FlakySink:
    def __init__(self, failures):
        self.failures = failures
        self.sent = []
        self.attempts = 0

    def send(self, payload):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise OSError("boom")
        self.sent.append(payload)


class TestNotify:
    def test_log_sink_appends_rfc3339_line(self, tmp_path):
        path = tmp_path / "alerts.log"
        notifier = Notifier({"log": LogFileSink(str(path))})
        from labnet.alerts import AlertEvent

        event = AlertEvent("r1", 1_600_000_000_000_000_000, 31.0, "firing", "too hot")
        notifier.deliver(event, "log")
        line = path.read_text().strip()
        assert line.startswith("2020-09-13T12:26:40")
        assert "r1" in line and "firing" in line and "too hot" in line

    def test_retry_until_success(self):
        sink = _FlakySink(failures=2)
        slept = []
        notifier = Notifier({"flaky": sink}, sleep=slept.append)
        from labnet.alerts import AlertEvent

        record = notifier.deliver(AlertEvent("r", 5, 1.0, "firing", "m"), "flaky")
        assert record.ok and record.attempts == 3
        assert len(sink.sent) == 1
        assert slept == [1.0, 2.0]  # exponential backoff, base 1 s

    def test_duplicate_suppression_key(self):
        sink = _FlakySink(failures=0)
        notifier = Notifier({"s": sink})
        from labnet.alerts import AlertEvent

        event = AlertEvent("r", 5, 1.0, "firing", "m")
        assert notifier.deliver(event, "s") is not None
        assert notifier.deliver(event, "s") is None
        assert len(sink.sent) == 1

    def test_backoff_capped_at_60(self):
        sink = _FlakySink(failures=10)
        slept = []
        notifier = Notifier({"s": sink}, max_attempts=9, sleep=slept.append)
        from labnet.alerts import AlertEvent

        record = notifier.deliver(AlertEvent("r", 6, 1.0, "firing", "m"), "s")
        assert not record.ok
        assert slept == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 60.0, 60.0]


class TestEngine:
    @pytest.fixture
    def rig(self, tmp_path):
        store = Store(tmp_path / "s")
        rules = RuleStore(store)
        notifier = Notifier({"console": _FlakySink(0)})
        engine = AlertEngine(store, rules, notifier, CommandBus())
        yield store, rules, engine
        store.close()

    def _write(self, store, values, start=0, step=20 * SEC):
        store.write([
            DataPoint("temperature", {"RoomID": "Lab03"}, {"T1": float(v)},
                      start + i * step)
            for i, v in enumerate(values)
        ])

    def test_threshold_end_to_end(self, rig):
        store, rules, engine = rig
        rules.put(threshold_rule())
        self._write(store, [28, 29, 31, 33, 29])
        events = engine.run_once(now_ns=5 * 20 * SEC)
        assert [e.state for e in events] == ["firing", "resolved"]
        assert engine.rule_states()["r1"]["state"] == "resolved"

    def test_cursor_no_reprocessing(self, rig):
        store, rules, engine = rig
        rules.put(threshold_rule())
        self._write(store, [31], start=20 * SEC)
        assert len(engine.run_once(now_ns=2 * 20 * SEC)) == 1
        assert engine.run_once(now_ns=3 * 20 * SEC) == []  # same data, no new events

    def test_rule_update_takes_effect_next_pass(self, rig):
        store, rules, engine = rig
        rules.put(threshold_rule(limit=30.0))
        self._write(store, [28], start=1 * 20 * SEC)
        assert engine.run_once(now_ns=2 * 20 * SEC) == []
        rules.put(threshold_rule(limit=25.0))  # tighten: 28 now violates
        self._write(store, [28], start=3 * 20 * SEC)
        events = engine.run_once(now_ns=4 * 20 * SEC)
        assert [e.state for e in events] == ["firing"]

    def test_staleness_counter_on_empty_frames(self, rig):
        store, rules, engine = rig
        rules.put(threshold_rule())
        engine.run_once(now_ns=20 * SEC)
        engine.run_once(now_ns=40 * SEC)
        assert engine._runtime["r1"].staleness == 2

    def test_interlock_commands_published(self, rig):
        store, rules, engine = rig
        rules.put(interlock_rule(latching=False))
        store.write([DataPoint("laser_power", {}, {"seed": 30.0}, 20 * SEC)])
        events = engine.run_once(now_ns=2 * 20 * SEC)
        assert [e.state for e in events] == ["firing"]
        assert engine.commands.is_off("Lab02")
        store.write([DataPoint("laser_power", {}, {"seed": 70.0}, 3 * 20 * SEC)])
        events = engine.run_once(now_ns=4 * 20 * SEC)
        assert [e.state for e in events] == ["resolved"]
        assert not engine.commands.is_off("Lab02")

    def test_latching_interlock_manual_reset(self, rig):
        store, rules, engine = rig
        rules.put(interlock_rule(latching=True))
        store.write([DataPoint("laser_power", {}, {"seed": 30.0}, 20 * SEC)])
        engine.run_once(now_ns=2 * 20 * SEC)
        store.write([DataPoint("laser_power", {}, {"seed": 70.0}, 3 * 20 * SEC)])
        engine.run_once(now_ns=4 * 20 * SEC)
        assert engine.commands.is_off("Lab02")  # latched
        engine.reset_interlock("il", now_ns=5 * 20 * SEC)
        assert not engine.commands.is_off("Lab02")

    def test_determinism_same_rules_same_frames(self, tmp_path):
        def run(path):
            store = Store(path)
            rules = RuleStore(store)
            rules.put(threshold_rule())
            engine = AlertEngine(store, rules, Notifier({"console": _FlakySink(0)}))
            rng = random.Random(13)
            self._write(store, [rng.uniform(25, 35) for _ in range(100)])
            events = engine.run_once(now_ns=101 * 20 * SEC)
            store.close()
            return [(e.rule_id, e.ts_ns, e.state) for e in events]

        assert run(tmp_path / "a") == run(tmp_path / "b")


class TestRuleDocs:
    def test_round_trip(self):
        for rule in (threshold_rule(), interlock_rule(),
                     AlertRule(id="rr", measurement="m", field="f", kind="rate",
                               max_rate_per_min=2.0, lookback_s=600)):
            assert AlertRule.from_doc(rule.to_doc()) == rule

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError):
            AlertRule.from_doc({"id": "x", "measurement": "m", "field": "f",
                                "bogus": 1})

    def test_invariants(self):
        with pytest.raises(ValidationError):
            AlertRule(id="x", measurement="m", field="f",
                      comparator="!=").validate()
        with pytest.raises(ValidationError):
            AlertRule(id="x", measurement="m", field="f", kind="interlock",
                      min_value=5, max_value=5).validate()
        with pytest.raises(ValidationError):
            AlertRule(id="x", measurement="m", field="f", kind="interlock",
                      min_value=0, max_value=1, margin=-1).validate()
