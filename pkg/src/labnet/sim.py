"""Lab scenario generator.

A scenario scripts the whole desk-scale lab: environmental signals with
seeded generators, regime windows that override signal parameters (the
air-conditioning on/off case), planted linear couplings between signals,
a shared two-laser chain distributed over three laboratories, fault
injections, and a phenomenological experiment that converts environment
deviations into atom number and cloud position.

Couplings are linear with additive Gaussian noise, which makes planted
correlations analytically controllable:

    r = gain * sigma_source / sqrt(gain^2 sigma_source^2 + noise_std^2)

Everything is deterministic for a fixed (config, seed) pair.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .alerts import CommandBus
from .errors import CyclicCoupling, UnknownCouplingSource, ValidationError
from .node import SensorModel
from .storage import Store
from .wire import DataPoint

logger = logging.getLogger(__name__)

DEFAULT_EPOCH_NS = 1_600_000_000_000_000_000


def coupling_noise_for_r(gain: float, sigma_source: float, r: float) -> float:
    """Noise std that plants Pearson |r| for a linear coupling."""
    if not 0 < abs(r) <= 1:
        raise ValidationError("target r must be in (0, 1]")
    return abs(gain) * sigma_source * math.sqrt(1.0 / r**2 - 1.0)


@dataclass(frozen=True)
class SignalDef:
    name: str
    room: str
    device: str
    measurement: str
    field: str
    unit: str
    model: SensorModel


@dataclass(frozen=True)
class Coupling:
    source: str
    target: str
    gain: float
    lag_s: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class Regime:
    name: str
    start_s: float
    end_s: float
    overrides: dict  # signal name -> {base, noise_std}


@dataclass(frozen=True)
class FaultSpec:
    kind: str  # fiber-coupling-drift | datagram-loss | node-freeze | seed-power-sag
    time_s: float
    duration_s: float = float("inf")
    lab: str = ""
    node: str = ""
    factor: float = 1.0
    probability: float = 0.0


@dataclass(frozen=True)
class ExperimentModel:
    room: str
    device: str
    cycle_s: float
    base_atom_number: float
    shot_noise_std: float
    atom_sensitivities: dict  # signal name -> atoms per unit
    cloud_h_sensitivities: dict
    cloud_v_sensitivities: dict
    cloud_h_base: float = 0.0
    cloud_v_base: float = 0.0
    position_noise_std: float = 0.0
    regime_atom_base: dict = field(default_factory=dict)  # regime name -> base

    def validate(self):
        if self.cycle_s <= 0:
            raise ValidationError("experiment cycle period must be positive")
        for name, value in {
            **self.atom_sensitivities,
            **self.cloud_h_sensitivities,
            **self.cloud_v_sensitivities,
        }.items():
            if not math.isfinite(value):
                raise ValidationError(f"sensitivity to {name!r} must be finite")


@dataclass(frozen=True)
class LaserLabDef:
    name: str  # room id, also the interlock command target
    fiber_efficiency: float
    amplifier_gain: float
    max_output_mw: float
    drift_amplitude: float = 0.0  # relative polarization-drift modulation
    drift_period_s: float = 3600.0


@dataclass(frozen=True)
class LaserChainDef:
    source_signal: str  # name of the central source power signal
    labs: tuple[LaserLabDef, ...]
    device: str = "Laser01"
    measurement: str = "laser_power"


@dataclass
class ScenarioConfig:
    name: str
    duration_s: float
    cadence_s: float
    seed: int
    signals: list[SignalDef]
    couplings: list[Coupling] = field(default_factory=list)
    regimes: list[Regime] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    experiment: ExperimentModel | None = None
    laser_chain: LaserChainDef | None = None
    alert_rules: list[dict] = field(default_factory=list)
    planted_pairs: list[tuple[str, str, float]] = field(default_factory=list)
    control_pairs: list[tuple[str, str]] = field(default_factory=list)
    epoch_ns: int = DEFAULT_EPOCH_NS
    description: str = ""

    def validate(self):
        if self.duration_s <= 0 or self.cadence_s <= 0:
            raise ValidationError("duration and cadence must be positive")
        names = [s.name for s in self.signals]
        if len(names) != len(set(names)):
            raise ValidationError("duplicate signal names")
        known = set(names)
        if self.laser_chain:
            for lab in self.laser_chain.labs:
                known.add(f"seed_power_{lab.name}")
                known.add(f"amp_power_{lab.name}")
        for c in self.couplings:
            if c.source not in known:
                raise UnknownCouplingSource(c.source)
            if c.target not in {s.name for s in self.signals}:
                raise UnknownCouplingSource(c.target)
        for regime in self.regimes:
            if not 0 <= regime.start_s < regime.end_s <= self.duration_s:
                raise ValidationError(f"regime {regime.name!r} outside duration")
        self._topo_order()  # raises CyclicCoupling
        if self.experiment:
            self.experiment.validate()

    def _topo_order(self) -> list[str]:
        deps: dict[str, set[str]] = {s.name: set() for s in self.signals}
        for c in self.couplings:
            if c.target in deps and c.source in deps:
                deps[c.target].add(c.source)
        order: list[str] = []
        state: dict[str, int] = {}

        def visit(node: str, stack: tuple):
            if state.get(node) == 2:
                return
            if state.get(node) == 1:
                raise CyclicCoupling(" -> ".join(stack + (node,)))
            state[node] = 1
            for dep in deps[node]:
                visit(dep, stack + (node,))
            state[node] = 2
            order.append(node)

        for name in deps:
            visit(name, ())
        return order

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s / self.cadence_s))

    @property
    def cadence_ns(self) -> int:
        return int(self.cadence_s * 1e9)


# ----------------------------------------------------------------------
# scenario file loading


def _model_from_doc(doc: dict) -> SensorModel:
    return SensorModel(
        kind=doc.get("kind", "constant"),
        base=float(doc.get("base", 0.0)),
        unit=doc.get("unit", "dimensionless"),
        noise_std=float(doc.get("noise_std", 0.0)),
        drift_per_hour=float(doc.get("drift_per_hour", 0.0)),
        amplitude=float(doc.get("amplitude", 0.0)),
        period_s=float(doc.get("period_s", 86400.0)),
        phi=float(doc.get("phi", 0.9)),
        source=doc.get("source", ""),
        gain=float(doc.get("gain", 1.0)),
    )


def scenario_from_doc(doc: dict) -> ScenarioConfig:
    signals = []
    for s in doc.get("signals", []):
        model_doc = dict(s.get("model", {}))
        model_doc.setdefault("unit", s.get("unit", "dimensionless"))
        signals.append(SignalDef(
            name=s["name"],
            room=s["room"],
            device=s["device"],
            measurement=s["measurement"],
            field=s["field"],
            unit=s.get("unit", model_doc.get("unit", "dimensionless")),
            model=_model_from_doc(model_doc),
        ))
    couplings = [
        Coupling(
            source=c["source"], target=c["target"], gain=float(c["gain"]),
            lag_s=float(c.get("lag_s", 0.0)), noise_std=float(c.get("noise_std", 0.0)),
        )
        for c in doc.get("couplings", [])
    ]
    regimes = [
        Regime(r["name"], float(r["start_s"]), float(r["end_s"]), r.get("overrides", {}))
        for r in doc.get("regimes", [])
    ]
    faults = [
        FaultSpec(
            kind=f["kind"], time_s=float(f["time_s"]),
            duration_s=float(f.get("duration_s", float("inf"))),
            lab=f.get("lab", ""), node=f.get("node", ""),
            factor=float(f.get("factor", 1.0)),
            probability=float(f.get("probability", 0.0)),
        )
        for f in doc.get("faults", [])
    ]
    experiment = None
    if "experiment" in doc:
        e = doc["experiment"]
        experiment = ExperimentModel(
            room=e["room"], device=e["device"], cycle_s=float(e.get("cycle_s", 20.0)),
            base_atom_number=float(e["base_atom_number"]),
            shot_noise_std=float(e.get("shot_noise_std", 0.0)),
            atom_sensitivities={k: float(v) for k, v in e.get("atom_sensitivities", {}).items()},
            cloud_h_sensitivities={k: float(v) for k, v in e.get("cloud_h_sensitivities", {}).items()},
            cloud_v_sensitivities={k: float(v) for k, v in e.get("cloud_v_sensitivities", {}).items()},
            cloud_h_base=float(e.get("cloud_h_base", 0.0)),
            cloud_v_base=float(e.get("cloud_v_base", 0.0)),
            position_noise_std=float(e.get("position_noise_std", 0.0)),
            regime_atom_base={k: float(v) for k, v in e.get("regime_atom_base", {}).items()},
        )
    chain = None
    if "laser_chain" in doc:
        c = doc["laser_chain"]
        chain = LaserChainDef(
            source_signal=c["source_signal"],
            labs=tuple(
                LaserLabDef(
                    name=lab["name"],
                    fiber_efficiency=float(lab["fiber_efficiency"]),
                    amplifier_gain=float(lab["amplifier_gain"]),
                    max_output_mw=float(lab.get("max_output_mw", float("inf"))),
                    drift_amplitude=float(lab.get("drift_amplitude", 0.0)),
                    drift_period_s=float(lab.get("drift_period_s", 3600.0)),
                )
                for lab in c.get("labs", [])
            ),
            device=c.get("device", "Laser01"),
            measurement=c.get("measurement", "laser_power"),
        )
    config = ScenarioConfig(
        name=doc.get("name", "scenario"),
        duration_s=float(doc["duration_s"]),
        cadence_s=float(doc.get("cadence_s", 20.0)),
        seed=int(doc.get("seed", 0)),
        signals=signals,
        couplings=couplings,
        regimes=regimes,
        faults=faults,
        experiment=experiment,
        laser_chain=chain,
        alert_rules=list(doc.get("alert_rules", [])),
        planted_pairs=[tuple(p) for p in doc.get("planted_pairs", [])],
        control_pairs=[tuple(p) for p in doc.get("control_pairs", [])],
        epoch_ns=int(doc.get("epoch_ns", DEFAULT_EPOCH_NS)),
        description=doc.get("description", ""),
    )
    config.validate()
    return config


def load_scenario(name_or_path: str, seed: int | None = None,
                  duration_s: float | None = None) -> ScenarioConfig:
    """Load a packaged scenario by name or any scenario file by path."""
    import importlib.resources
    import os

    if os.path.exists(name_or_path):
        with open(name_or_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    else:
        resource = importlib.resources.files("labnet") / "scenarios" / f"{name_or_path}.json"
        if not resource.is_file():
            raise ValidationError(f"unknown scenario {name_or_path!r}")
        doc = json.loads(resource.read_text(encoding="utf-8"))
    if seed is not None:
        doc["seed"] = seed
    if duration_s is not None:
        doc["duration_s"] = duration_s
        # clip regime windows to the shortened run
        regimes = [
            dict(r) for r in doc.get("regimes", []) if r["start_s"] < duration_s
        ]
        for regime in regimes:
            regime["end_s"] = min(float(regime["end_s"]), duration_s)
        doc["regimes"] = regimes
    return scenario_from_doc(doc)


def packaged_scenarios() -> list[str]:
    import importlib.resources

    files = importlib.resources.files("labnet") / "scenarios"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


# ----------------------------------------------------------------------
# trace generation


def _rng_for(config_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(f"{config_seed}:{label}".encode()))


class Scenario:
    """Generated traces plus lookups for agents, chain, and experiment."""

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.n = config.n_samples
        self.times_ns = config.epoch_ns + np.arange(self.n, dtype=np.int64) * config.cadence_ns
        self.traces: dict[str, np.ndarray] = {}
        self.nominals: dict[str, np.ndarray] = {}
        self._signal_by_name = {s.name: s for s in config.signals}
        self._generate()

    # -- generation ------------------------------------------------------

    def _regime_arrays(self, signal: SignalDef) -> tuple[np.ndarray, np.ndarray]:
        base = np.full(self.n, signal.model.base)
        sigma = np.full(self.n, signal.model.noise_std)
        t_s = (self.times_ns - self.config.epoch_ns) / 1e9
        for regime in self.config.regimes:
            window = (t_s >= regime.start_s) & (t_s < regime.end_s)
            override = regime.overrides.get(signal.name)
            if not override:
                continue
            if "base" in override:
                base[window] = float(override["base"])
            if "noise_std" in override:
                sigma[window] = float(override["noise_std"])
        return base, sigma

    def _generate(self):
        config = self.config
        t_s = (self.times_ns - config.epoch_ns) / 1e9
        implicit: list[Coupling] = []
        for signal in config.signals:
            base, sigma = self._regime_arrays(signal)
            rng = _rng_for(config.seed, f"signal:{signal.name}")
            z = rng.standard_normal(self.n)
            m = signal.model
            if m.kind == "constant":
                nominal = base
                trace = base + sigma * z
            elif m.kind == "drift":
                nominal = base + m.drift_per_hour * (t_s / 3600.0)
                trace = nominal + sigma * z
            elif m.kind == "sine":
                nominal = base + m.amplitude * np.sin(2.0 * np.pi * t_s / m.period_s)
                trace = nominal + sigma * z
            elif m.kind == "random-walk":
                nominal = base
                trace = base + np.cumsum(sigma * z)
            elif m.kind == "ar1":
                nominal = base
                innov = np.sqrt(1.0 - m.phi**2)
                x = np.empty(self.n)
                x[0] = sigma[0] * z[0]
                for i in range(1, self.n):
                    x[i] = m.phi * x[i - 1] + innov * sigma[i] * z[i]
                trace = base + x
            else:  # coupled: own base plus an implicit coupling entry
                nominal = base
                trace = base + sigma * z
                implicit.append(Coupling(m.source, signal.name, m.gain))
            self.traces[signal.name] = trace
            self.nominals[signal.name] = nominal

        order = config._topo_order()
        couplings = list(config.couplings) + implicit
        for target in order:
            for c in [c for c in couplings if c.target == target]:
                if c.source not in self.traces:
                    raise UnknownCouplingSource(c.source)
                anomaly = self.traces[c.source] - self.nominals[c.source]
                lag_samples = int(round(c.lag_s / config.cadence_s))
                if lag_samples:
                    shifted = np.empty_like(anomaly)
                    shifted[:lag_samples] = anomaly[0]
                    shifted[lag_samples:] = anomaly[: self.n - lag_samples]
                    anomaly = shifted
                contribution = c.gain * anomaly
                if c.noise_std > 0:
                    rng = _rng_for(config.seed, f"coupling:{c.source}->{c.target}")
                    contribution = contribution + rng.normal(0.0, c.noise_std, self.n)
                self.traces[target] = self.traces[target] + contribution

    # -- lookups -----------------------------------------------------------

    def index_at(self, t_ns: int, loop: bool = False) -> int:
        i = int((t_ns - self.config.epoch_ns) // self.config.cadence_ns)
        if loop and self.n:
            return i % self.n
        return min(max(i, 0), self.n - 1)

    def value(self, name: str, t_ns: int, loop: bool = False) -> float:
        trace = self.traces.get(name)
        if trace is None:
            raise KeyError(name)
        return float(trace[self.index_at(t_ns, loop)])

    def nominal_at(self, name: str, t_ns: int, loop: bool = False) -> float:
        nominal = self.nominals.get(name)
        if nominal is None:
            raise KeyError(name)
        return float(nominal[self.index_at(t_ns, loop)])

    def regime_at(self, t_ns: int, loop: bool = False) -> Regime | None:
        t_s = (self.times_ns[self.index_at(t_ns, loop)] - self.config.epoch_ns) / 1e9
        for regime in self.config.regimes:
            if regime.start_s <= t_s < regime.end_s:
                return regime
        return None

    def signal_def(self, name: str) -> SignalDef:
        return self._signal_by_name[name]

    def fault_active(self, fault: FaultSpec, t_ns: int, loop: bool = False) -> bool:
        t_s = (self.times_ns[self.index_at(t_ns, loop)] - self.config.epoch_ns) / 1e9
        return fault.time_s <= t_s < fault.time_s + fault.duration_s

    def series_name(self, signal: str) -> str:
        """Analysis column name for a scenario signal or experiment output."""
        if signal in ("atom_number", "cloud_H", "cloud_V"):
            e = self.config.experiment
            return (f"experiment,DevID={e.device},RoomID={e.room}.{signal}")
        s = self._signal_by_name[signal]
        return f"{s.measurement},DevID={s.device},RoomID={s.room}.{s.field}"


class LaserChain:
    """Shared two-frequency source fanned out through fibers to local
    amplifiers; every tap is observable and the amplifier obeys the
    interlock command bus."""

    def __init__(self, scenario: Scenario, command_bus: CommandBus | None = None):
        chain = scenario.config.laser_chain
        if chain is None:
            raise ValidationError("scenario has no laser chain")
        self.scenario = scenario
        self.chain = chain
        self.bus = command_bus or CommandBus()

    def _fault_factor(self, kind: str, lab: str, t_ns: int, loop: bool) -> float:
        factor = 1.0
        for fault in self.scenario.config.faults:
            if fault.kind == kind and fault.lab == lab and \
                    self.scenario.fault_active(fault, t_ns, loop):
                factor *= fault.factor
        return factor

    def taps(self, t_ns: int, loop: bool = False) -> dict[str, float]:
        """All observable powers at t: source, per-lab seed and amp output."""
        source = self.scenario.value(self.chain.source_signal, t_ns, loop)
        t_s = (t_ns - self.scenario.config.epoch_ns) / 1e9
        out = {self.chain.source_signal: source}
        for lab in self.chain.labs:
            efficiency = lab.fiber_efficiency
            if lab.drift_amplitude:
                efficiency *= 1.0 + lab.drift_amplitude * math.sin(
                    2.0 * math.pi * t_s / lab.drift_period_s
                )
            efficiency *= self._fault_factor("fiber-coupling-drift", lab.name, t_ns, loop)
            seed = source * efficiency
            seed *= self._fault_factor("seed-power-sag", lab.name, t_ns, loop)
            if self.bus.is_off(lab.name):
                amp = 0.0
            else:
                amp = min(lab.amplifier_gain * seed, lab.max_output_mw)
            out[f"seed_power_{lab.name}"] = seed
            out[f"amp_power_{lab.name}"] = amp
        return out

    def value(self, name: str, t_ns: int, loop: bool = False) -> float:
        taps = self.taps(t_ns, loop)
        if name not in taps:
            raise KeyError(name)
        return taps[name]

    def tap_points(self, t_ns: int, loop: bool = False) -> list[DataPoint]:
        taps = self.taps(t_ns, loop)
        chain = self.chain
        return [
            DataPoint(
                chain.measurement,
                {"RoomID": lab.name, "DevID": chain.device},
                {"seed": taps[f"seed_power_{lab.name}"],
                 "amp_out": taps[f"amp_power_{lab.name}"]},
                int(t_ns),
            )
            for lab in chain.labs
        ]


class ExperimentProvider:
    """Phenomenological experiment outputs as lookupable signals.

    Shot noise is keyed by cycle index, so repeated queries at the same
    simulated time return the same value.
    """

    OUTPUTS = ("atom_number", "cloud_H", "cloud_V")

    def __init__(self, scenario: Scenario):
        if scenario.config.experiment is None:
            raise ValidationError("scenario has no experiment model")
        self.scenario = scenario
        self.model = scenario.config.experiment
        self._seed = zlib.crc32(f"{scenario.config.seed}:experiment".encode())

    def _shot(self, cycle_index: int) -> tuple[float, float, float]:
        rng = np.random.default_rng((self._seed, cycle_index))
        return (
            float(rng.normal(0.0, self.model.shot_noise_std)),
            float(rng.normal(0.0, self.model.position_noise_std)),
            float(rng.normal(0.0, self.model.position_noise_std)),
        )

    def cycle_index(self, t_ns: int) -> int:
        return int((t_ns - self.scenario.config.epoch_ns) // int(self.model.cycle_s * 1e9))

    def _deltas(self, sensitivities: dict, t_ns: int, loop: bool) -> float:
        total = 0.0
        for name, sens in sensitivities.items():
            total += sens * (
                self.scenario.value(name, t_ns, loop)
                - self.scenario.nominal_at(name, t_ns, loop)
            )
        return total

    def values(self, t_ns: int, loop: bool = False) -> dict[str, float]:
        model = self.model
        regime = self.scenario.regime_at(t_ns, loop)
        base = model.base_atom_number
        if regime is not None and regime.name in model.regime_atom_base:
            base = model.regime_atom_base[regime.name]
        shot_n, shot_h, shot_v = self._shot(self.cycle_index(t_ns))
        return {
            "atom_number": base + self._deltas(model.atom_sensitivities, t_ns, loop) + shot_n,
            "cloud_H": model.cloud_h_base
            + self._deltas(model.cloud_h_sensitivities, t_ns, loop) + shot_h,
            "cloud_V": model.cloud_v_base
            + self._deltas(model.cloud_v_sensitivities, t_ns, loop) + shot_v,
        }

    def value(self, name: str, t_ns: int, loop: bool = False) -> float:
        vals = self.values(t_ns, loop)
        if name not in vals:
            raise KeyError(name)
        return vals[name]

    def point(self, t_ns: int, loop: bool = False) -> DataPoint:
        return DataPoint(
            "experiment",
            {"RoomID": self.model.room, "DevID": self.model.device},
            self.values(t_ns, loop),
            int(t_ns),
        )


class Environment:
    """Signal lookup facade handed to node agents: static traces first,
    then chain taps, then experiment outputs."""

    def __init__(self, scenario: Scenario, chain: LaserChain | None = None,
                 experiment: ExperimentProvider | None = None, loop: bool = False):
        self.scenario = scenario
        self.chain = chain
        self.experiment = experiment
        self.loop = loop

    def value(self, name: str, t_ns: int) -> float:
        if name in self.scenario.traces:
            return self.scenario.value(name, t_ns, self.loop)
        if self.chain is not None:
            try:
                return self.chain.value(name, t_ns, self.loop)
            except KeyError:
                pass
        if self.experiment is not None:
            try:
                return self.experiment.value(name, t_ns, self.loop)
            except KeyError:
                pass
        raise KeyError(name)


# ----------------------------------------------------------------------
# direct synthesis (no network, same data the closed loop would produce)


@dataclass
class SynthesisResult:
    points_written: int
    times_ns: np.ndarray
    truth: dict[str, np.ndarray]  # signal/output name -> trace
    scenario: Scenario


def synthesize(
    config: ScenarioConfig,
    store: Store,
    alert_engine=None,
    command_bus: CommandBus | None = None,
    batch_points: int = 50_000,
) -> SynthesisResult:
    """Write every scenario point straight into the store.

    Produces exactly the series the closed-loop network run would, minus
    transport. When an alert engine is supplied it is stepped once per
    cadence sample, so interlock feedback shapes the laser taps.
    """
    scenario = Scenario(config)
    chain = None
    if config.laser_chain is not None:
        chain = LaserChain(scenario, command_bus)
    experiment = ExperimentProvider(scenario) if config.experiment else None

    for signal in config.signals:
        store.set_unit(signal.measurement, signal.field, signal.unit)
    if chain is not None:
        store.set_unit(config.laser_chain.measurement, "seed", "mW")
        store.set_unit(config.laser_chain.measurement, "amp_out", "mW")
    if experiment is not None:
        store.set_unit("experiment", "atom_number", "dimensionless")
        store.set_unit("experiment", "cloud_H", "dimensionless")
        store.set_unit("experiment", "cloud_V", "dimensionless")

    # group plain signals per device point
    by_point: dict[tuple[str, str, str], list[SignalDef]] = {}
    for signal in config.signals:
        by_point.setdefault((signal.room, signal.device, signal.measurement), []).append(signal)

    truth: dict[str, list[float] | np.ndarray] = {name: t for name, t in scenario.traces.items()}
    written = 0
    stepping = alert_engine is not None or chain is not None
    cycle_ns = int(config.experiment.cycle_s * 1e9) if experiment else 0

    if not stepping:
        # bulk path: one batch per chunk of samples
        batch: list[DataPoint] = []
        for i in range(scenario.n):
            t = int(scenario.times_ns[i])
            for (room, device, meas), defs in by_point.items():
                batch.append(DataPoint(
                    meas, {"RoomID": room, "DevID": device},
                    {s.field: float(scenario.traces[s.name][i]) for s in defs},
                    t,
                ))
            if experiment and (t - config.epoch_ns) % cycle_ns == 0:
                batch.append(experiment.point(t))
            if len(batch) >= batch_points:
                written += store.write(batch).accepted
                batch = []
        if batch:
            written += store.write(batch).accepted
    else:
        chain_truth: dict[str, list[float]] = {}
        for i in range(scenario.n):
            t = int(scenario.times_ns[i])
            batch = []
            for (room, device, meas), defs in by_point.items():
                batch.append(DataPoint(
                    meas, {"RoomID": room, "DevID": device},
                    {s.field: float(scenario.traces[s.name][i]) for s in defs},
                    t,
                ))
            if chain is not None:
                taps = chain.taps(t)
                for lab in config.laser_chain.labs:
                    batch.append(DataPoint(
                        config.laser_chain.measurement,
                        {"RoomID": lab.name, "DevID": config.laser_chain.device},
                        {"seed": taps[f"seed_power_{lab.name}"],
                         "amp_out": taps[f"amp_power_{lab.name}"]},
                        t,
                    ))
                for name, value in taps.items():
                    chain_truth.setdefault(name, []).append(value)
            if experiment and (t - config.epoch_ns) % cycle_ns == 0:
                batch.append(experiment.point(t))
            written += store.write(batch).accepted
            if alert_engine is not None:
                alert_engine.run_once(t + 1)
        for name, values in chain_truth.items():
            if name not in truth:
                truth[name] = np.asarray(values)

    if experiment:
        cycles = scenario.times_ns[
            (scenario.times_ns - config.epoch_ns) % cycle_ns == 0
        ]
        outs = {name: np.empty(len(cycles)) for name in ExperimentProvider.OUTPUTS}
        for j, t in enumerate(cycles):
            vals = experiment.values(int(t))
            for name in ExperimentProvider.OUTPUTS:
                outs[name][j] = vals[name]
        truth.update(outs)
    store.flush()
    return SynthesisResult(written, scenario.times_ns, truth, scenario)
