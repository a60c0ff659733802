import numpy as np
import pytest

from labnet import analysis
from labnet.alerts import AlertEngine, AlertRule, CommandBus, Notifier, RuleStore
from labnet.clock import ManualClock
from labnet.errors import CyclicCoupling, UnknownCouplingSource, ValidationError
from labnet.node import SensorModel
from labnet.sim import (
    Coupling,
    Environment,
    ExperimentModel,
    ExperimentProvider,
    LaserChain,
    LaserChainDef,
    LaserLabDef,
    Scenario,
    ScenarioConfig,
    SignalDef,
    coupling_noise_for_r,
    load_scenario,
    packaged_scenarios,
    scenario_from_doc,
    synthesize,
)
from labnet.storage import SeriesQuery, Store

SEC = 10**9


def signal(name, kind="ar1", base=10.0, noise=0.5, phi=0.8, room="Lab01",
           device="Dev01", meas="temperature", field=None, unit="degC"):
    return SignalDef(
        name=name, room=room, device=device, measurement=meas,
        field=field or name, unit=unit,
        model=SensorModel(kind=kind, base=base, noise_std=noise, phi=phi, unit=unit),
    )


def config(signals, couplings=(), seed=1, duration=4000.0, cadence=20.0, **kw):
    return ScenarioConfig(
        name="test", duration_s=duration, cadence_s=cadence, seed=seed,
        signals=list(signals), couplings=list(couplings), **kw,
    )


def measured_r(a, b):
    return analysis.pearson(np.asarray(a), np.asarray(b))


class TestScenarioGeneration:
    def test_same_seed_identical_traces(self):
        cfg1 = config([signal("a"), signal("b", field="b")], seed=5)
        cfg2 = config([signal("a"), signal("b", field="b")], seed=5)
        s1, s2 = Scenario(cfg1), Scenario(cfg2)
        for name in ("a", "b"):
            assert s1.traces[name].tolist() == s2.traces[name].tolist()

    def test_different_seed_different_traces(self):
        s1 = Scenario(config([signal("a")], seed=1))
        s2 = Scenario(config([signal("a")], seed=2))
        assert s1.traces["a"].tolist() != s2.traces["a"].tolist()

    def test_zero_gain_coupling_independent(self):
        cfg = config(
            [signal("src"), signal("dst", kind="constant", noise=0.0)],
            [Coupling("src", "dst", gain=0.0, noise_std=0.3)],
            duration=40000.0,
        )
        scenario = Scenario(cfg)
        r = measured_r(scenario.traces["src"], scenario.traces["dst"])
        assert abs(r) < 0.1

    def test_planted_correlation_recovered(self):
        # |r| targets with the analytic noise rule, averaged over 20 seeds
        for target in (0.3, 0.6, 0.9):
            estimates = []
            for seed in range(20):
                gain = 2.0
                noise = coupling_noise_for_r(gain, 0.5, target)
                cfg = config(
                    [signal("src", noise=0.5), signal("dst", kind="constant", noise=0.0)],
                    [Coupling("src", "dst", gain=gain, noise_std=noise)],
                    seed=seed, duration=40000.0,
                )
                scenario = Scenario(cfg)
                estimates.append(
                    measured_r(scenario.traces["src"], scenario.traces["dst"])
                )
            assert np.mean(estimates) == pytest.approx(target, abs=0.05), target

    def test_lag_recovered_exactly_by_cross_correlation(self):
        for lag_samples in (1, 3, 7):
            cfg = config(
                [signal("src"), signal("dst", kind="constant", noise=0.0)],
                [Coupling("src", "dst", gain=1.0, lag_s=20.0 * lag_samples,
                          noise_std=0.05)],
                duration=40000.0,
            )
            scenario = Scenario(cfg)
            xc = analysis.cross_correlation(
                scenario.traces["src"], scenario.traces["dst"], max_lag=12
            )
            assert xc.best_lag == lag_samples

    def test_cyclic_coupling_rejected(self):
        with pytest.raises(CyclicCoupling):
            config(
                [signal("a"), signal("b", field="b")],
                [Coupling("a", "b", 1.0), Coupling("b", "a", 1.0)],
            ).validate()

    def test_unknown_coupling_source_rejected(self):
        with pytest.raises(UnknownCouplingSource):
            config([signal("a")], [Coupling("ghost", "a", 1.0)]).validate()

    def test_regime_overrides_windowed(self):
        from labnet.sim import Regime

        cfg = config(
            [signal("t", kind="constant", base=20.1, noise=1.2)],
            duration=57600.0,
            regimes=[
                Regime("ac_on", 28800.0, 57600.0,
                       {"t": {"base": 25.1, "noise_std": 0.3}})
            ],
        )
        scenario = Scenario(cfg)
        half = scenario.n // 2
        first, second = scenario.traces["t"][:half], scenario.traces["t"][half:]
        assert first.mean() == pytest.approx(20.1, abs=0.15)
        assert first.std(ddof=1) == pytest.approx(1.2, rel=0.1)
        assert second.mean() == pytest.approx(25.1, abs=0.05)
        assert second.std(ddof=1) == pytest.approx(0.3, rel=0.1)


class TestExperiment:
    def make_scenario(self, shot=0.0, pos_noise=0.0, sens=1000.0):
        cfg = config(
            [signal("temp", kind="constant", base=20.0, noise=0.0),
             signal("imaging", kind="constant", base=5.0, noise=0.0,
                    meas="laser_power", unit="mW")],
            experiment=ExperimentModel(
                room="Lab01", device="Exp01", cycle_s=20.0,
                base_atom_number=2.0e6, shot_noise_std=shot,
                atom_sensitivities={"temp": sens},
                cloud_h_sensitivities={"imaging": 4.0},
                cloud_v_sensitivities={"imaging": 2.0},
                cloud_h_base=120.0, cloud_v_base=80.0,
                position_noise_std=pos_noise,
            ),
        )
        return Scenario(cfg)

    def test_nominal_environment_zero_noise_gives_base_values(self):
        scenario = self.make_scenario()
        provider = ExperimentProvider(scenario)
        vals = provider.values(scenario.config.epoch_ns)
        assert vals["atom_number"] == 2.0e6
        assert vals["cloud_H"] == 120.0
        assert vals["cloud_V"] == 80.0

    def test_linear_sensitivity_shift(self):
        scenario = self.make_scenario()
        provider = ExperimentProvider(scenario)
        # push imaging power up by 1 mW by editing the trace directly
        scenario.traces["imaging"] = scenario.traces["imaging"] + 1.0
        vals = provider.values(scenario.config.epoch_ns)
        assert vals["cloud_H"] == pytest.approx(124.0)
        assert vals["cloud_V"] == pytest.approx(82.0)

    def test_shot_noise_deterministic_per_cycle(self):
        scenario = self.make_scenario(shot=1000.0)
        provider = ExperimentProvider(scenario)
        t = scenario.config.epoch_ns + 40 * SEC
        assert provider.values(t) == provider.values(t)

    def test_regime_base_switch(self):
        from labnet.sim import Regime

        cfg = config(
            [signal("t", kind="constant", base=20.1, noise=0.0)],
            duration=57600.0,
            regimes=[Regime("ac_on", 28800.0, 57600.0, {})],
            experiment=ExperimentModel(
                room="L", device="D", cycle_s=20.0,
                base_atom_number=2.22e6, shot_noise_std=0.0,
                atom_sensitivities={}, cloud_h_sensitivities={},
                cloud_v_sensitivities={},
                regime_atom_base={"ac_on": 4.81e6},
            ),
        )
        scenario = Scenario(cfg)
        provider = ExperimentProvider(scenario)
        early = provider.values(cfg.epoch_ns)["atom_number"]
        late = provider.values(cfg.epoch_ns + 30000 * SEC)["atom_number"]
        assert (early, late) == (2.22e6, 4.81e6)


class TestLaserChain:
    def chain_config(self, drift=0.0, faults=()):
        return config(
            [signal("source", kind="constant", base=100.0, noise=0.0,
                    room="LaserLab", device="Source01", meas="laser_power",
                    field="source", unit="mW")],
            duration=2000.0,
            faults=list(faults),
            laser_chain=LaserChainDef(
                source_signal="source",
                labs=(
                    LaserLabDef("Lab01", 1.0, 10.0, 5000.0, drift, 3600.0),
                    LaserLabDef("Lab02", 1.0, 10.0, 5000.0, drift, 2700.0),
                    LaserLabDef("Lab03", 1.0, 10.0, 5000.0, drift, 4500.0),
                ),
            ),
        )

    def test_unit_efficiency_all_taps_equal_source(self):
        scenario = Scenario(self.chain_config())
        chain = LaserChain(scenario)
        taps = chain.taps(scenario.config.epoch_ns)
        assert taps["seed_power_Lab01"] == 100.0
        assert taps["seed_power_Lab02"] == 100.0
        assert taps["seed_power_Lab03"] == 100.0
        assert taps["amp_power_Lab01"] == 1000.0

    def test_fiber_drift_fault_hits_one_lab_only(self):
        from labnet.sim import FaultSpec

        fault = FaultSpec(kind="fiber-coupling-drift", time_s=500.0,
                          lab="Lab02", factor=0.8)
        scenario = Scenario(self.chain_config(faults=[fault]))
        chain = LaserChain(scenario)
        before = chain.taps(scenario.config.epoch_ns + 400 * SEC)
        after = chain.taps(scenario.config.epoch_ns + 600 * SEC)
        assert after["seed_power_Lab02"] == pytest.approx(
            before["seed_power_Lab02"] * 0.8)
        assert after["amp_power_Lab02"] == pytest.approx(
            before["amp_power_Lab02"] * 0.8)
        for lab in ("Lab01", "Lab03"):
            assert after[f"seed_power_{lab}"] == before[f"seed_power_{lab}"]

    def test_amplifier_clamped_at_max(self):
        cfg = self.chain_config()
        cfg.laser_chain = LaserChainDef(
            source_signal="source",
            labs=(LaserLabDef("Lab01", 1.0, 100.0, 1500.0),),
        )
        scenario = Scenario(cfg)
        chain = LaserChain(scenario)
        assert chain.taps(cfg.epoch_ns)["amp_power_Lab01"] == 1500.0

    def test_command_bus_forces_output_zero(self):
        scenario = Scenario(self.chain_config())
        bus = CommandBus()
        chain = LaserChain(scenario, bus)
        bus.publish("Lab02", "amplifier_off", 0)
        taps = chain.taps(scenario.config.epoch_ns)
        assert taps["amp_power_Lab02"] == 0.0
        assert taps["amp_power_Lab01"] > 0


class TestInterlockClosedLoop:
    def test_sag_forces_amplifier_off_within_one_period(self, tmp_path):
        cfg = load_scenario("interlock_demo")
        store = Store(tmp_path / "s")
        rules = RuleStore(store)
        for doc in cfg.alert_rules:
            rules.put(AlertRule.from_doc(doc))
        bus = CommandBus()
        silent = type("S", (), {"send": staticmethod(lambda payload: None)})()
        engine = AlertEngine(store, rules, Notifier({"console": silent}), bus,
                             clock=ManualClock(cfg.epoch_ns))
        result = synthesize(cfg, store, alert_engine=engine, command_bus=bus)
        store.flush()
        frames = store.query(SeriesQuery(
            measurement="laser_power", tags={"RoomID": "Lab02"},
            fields=["amp_out"], start_ns=0, end_ns=2**62))
        amp = dict(zip(frames[0].timestamps, frames[0].values))
        period_ns = int(20 * 1e9)
        sag_start = cfg.epoch_ns + int(400 * 1e9)
        sag_end = cfg.epoch_ns + int(600 * 1e9)
        # within one evaluation period of the sag, output is forced to zero
        for ts, value in amp.items():
            if sag_start + period_ns <= ts < sag_end:
                assert value == 0.0, f"amp still on at t={ts}"
        # before the sag the amplifier was running
        assert amp[sag_start - period_ns] > 0
        # non-latching interlock re-arms after recovery (guard band)
        recovered = [v for ts, v in amp.items() if ts >= sag_end + 2 * period_ns]
        assert max(recovered) > 0
        assert any(c.action == "amplifier_on" for c in bus.history)
        store.close()
        assert result.points_written > 0


class TestSynthesize:
    def test_writes_all_series_and_registers_units(self, tmp_path):
        cfg = config(
            [signal("a", room="Lab01", device="Env01", field="T1"),
             signal("b", room="Lab01", device="Env01", field="T2")],
            duration=400.0,
        )
        store = Store(tmp_path / "s")
        result = synthesize(cfg, store)
        assert result.points_written == 20  # 20 samples, one point per device
        frames = store.query(SeriesQuery(
            measurement="temperature", start_ns=0, end_ns=2**62))
        assert len(frames) == 2
        assert all(len(f) == 20 for f in frames)
        assert frames[0].unit == "degC"
        store.close()

    def test_truth_matches_stored_values(self, tmp_path):
        cfg = config([signal("a", field="T1")], duration=400.0)
        store = Store(tmp_path / "s")
        result = synthesize(cfg, store)
        frames = store.query(SeriesQuery(
            measurement="temperature", start_ns=0, end_ns=2**62))
        assert frames[0].values == pytest.approx(result.truth["a"].tolist())
        store.close()

    def test_packaged_scenarios_load_and_validate(self):
        names = packaged_scenarios()
        assert {"fig3_correlations", "fig4_ac_stability",
                "default_lab", "interlock_demo"} <= set(names)
        for name in names:
            cfg = load_scenario(name)
            cfg.validate()

    def test_seed_and_duration_overrides(self):
        cfg = load_scenario("fig3_correlations", seed=99, duration_s=2000.0)
        assert cfg.seed == 99
        assert cfg.n_samples == 100


class TestEnvironmentLookup:
    def test_dispatch_order_and_missing(self):
        cfg = config([signal("a")])
        scenario = Scenario(cfg)
        env = Environment(scenario)
        assert env.value("a", cfg.epoch_ns) == scenario.traces["a"][0]
        with pytest.raises(KeyError):
            env.value("ghost", cfg.epoch_ns)

    def test_loop_mode_wraps(self):
        cfg = config([signal("a")], duration=400.0)
        scenario = Scenario(cfg)
        env = Environment(scenario, loop=True)
        beyond = cfg.epoch_ns + int(cfg.duration_s * 1e9) + 20 * SEC
        assert env.value("a", beyond) == scenario.traces["a"][1]


class TestScenarioDoc:
    def test_doc_round_trip_essentials(self):
        doc = {
            "name": "x", "duration_s": 100, "cadence_s": 20, "seed": 4,
            "signals": [{"name": "s1", "room": "L", "device": "D",
                         "measurement": "m", "field": "f", "unit": "degC",
                         "model": {"kind": "ar1", "base": 1.0,
                                   "noise_std": 0.1, "phi": 0.5}}],
            "couplings": [], "regimes": [], "faults": [],
        }
        cfg = scenario_from_doc(doc)
        assert cfg.signals[0].model.phi == 0.5
        assert cfg.n_samples == 5

    def test_invalid_regime_window(self):
        from labnet.sim import Regime

        with pytest.raises(ValidationError):
            config([signal("a")], duration=100.0,
                   regimes=[Regime("r", 0.0, 500.0, {})]).validate()
