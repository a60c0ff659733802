"""Process composition.

`serve` hosts the store, the HTTP API, and the alert engine in one
process. `simulate` additionally spins up the whole closed loop on
loopback: one UDP node agent per scenario device, the polling collector,
the laser chain with its interlock feedback, and an experiment agent
pushing through the HTTP write path exactly as a separate-process
deployment would.
"""

from __future__ import annotations

import logging
import threading
import time

from .alerts import AlertEngine, AlertRule, CommandBus, Notifier, RuleStore
from .api import Api, ApiServer
from .clock import Clock, ScaledClock, SystemClock
from .collector import Collector, EngineSink, NodeRegistryEntry
from .node import NodeAgent, NodeConfig, SensorBinding, SensorModel
from .sim import (
    Environment,
    ExperimentProvider,
    LaserChain,
    Scenario,
    ScenarioConfig,
)
from .storage import Store

logger = logging.getLogger(__name__)


class ServeHandle:
    def __init__(self, store: Store, api: Api, server: ApiServer,
                 alert_engine: AlertEngine, collector: Collector | None = None):
        self.store = store
        self.api = api
        self.server = server
        self.alert_engine = alert_engine
        self.collector = collector
        self.clock: Clock = SystemClock()
        self._agents: list[NodeAgent] = []
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @property
    def url(self) -> str:
        return self.server.url

    def stop(self):
        self._stop.set()
        for thread in self._threads:
            stopper = getattr(thread, "stop", None)
            if stopper:
                stopper()
            else:
                thread.join(timeout=5)
        for agent in self._agents:
            agent.stop()
        if self.collector is not None:
            self.collector.stop()
        self.alert_engine.stop()
        self.server.stop()
        self.store.close()


def build_serve(
    data_dir: str,
    host: str = "127.0.0.1",
    port: int = 8080,
    token: str | None = None,
    ui_dir: str | None = None,
    alert_period_s: float = 20.0,
    clock: Clock | None = None,
    start_alerts: bool = True,
) -> ServeHandle:
    clock = clock or SystemClock()
    store = Store(data_dir)
    rules = RuleStore(store)
    engine = AlertEngine(store, rules, Notifier(), clock=clock)
    api = Api(store, rules, engine, token=token, ui_dir=ui_dir)
    server = ApiServer(api, host, port)
    server.start()
    if start_alerts:
        engine.start(alert_period_s)
    logger.info("serving %s at %s", data_dir, server.url)
    return ServeHandle(store, api, server, engine)


def _agents_from_scenario(
    scenario: Scenario, environment: Environment, clock: Clock
) -> list[NodeAgent]:
    """One pull agent per (room, device); sensors read the environment."""
    config = scenario.config
    grouped: dict[tuple[str, str], list] = {}
    for signal in config.signals:
        grouped.setdefault((signal.room, signal.device), []).append(
            SensorBinding(signal.measurement, signal.field, SensorModel(
                kind="coupled", source=signal.name, gain=1.0, unit=signal.unit,
            ))
        )
    if config.laser_chain is not None:
        for lab in config.laser_chain.labs:
            grouped.setdefault((lab.name, config.laser_chain.device), []).extend([
                SensorBinding(config.laser_chain.measurement, "seed", SensorModel(
                    kind="coupled", source=f"seed_power_{lab.name}", unit="mW")),
                SensorBinding(config.laser_chain.measurement, "amp_out", SensorModel(
                    kind="coupled", source=f"amp_power_{lab.name}", unit="mW")),
            ])
    agents = []
    for (room, device), sensors in sorted(grouped.items()):
        agent = NodeAgent(
            NodeConfig(
                room_id=room, device_id=device, mode="pull",
                sensors=sensors, seed=config.seed,
            ),
            clock=clock,
            environment=environment,
        )
        agents.append(agent)
    return agents


class FaultScheduler(threading.Thread):
    """Applies datagram-loss and node-freeze faults at their scenario times."""

    def __init__(self, scenario: Scenario, agents: list[NodeAgent], clock: Clock):
        super().__init__(daemon=True, name="fault-scheduler")
        self.scenario = scenario
        self.agents = {
            f"{a.config.room_id}/{a.config.device_id}": a for a in agents
        }
        self.clock = clock
        self._halt = threading.Event()

    def run(self):
        runtime_faults = [
            f for f in self.scenario.config.faults
            if f.kind in ("datagram-loss", "node-freeze")
        ]
        if not runtime_faults:
            return
        while not self._halt.is_set():
            now = self.clock.now_ns()
            for fault in runtime_faults:
                agent = self.agents.get(fault.node)
                if agent is None:
                    continue
                active = self.scenario.fault_active(fault, now)
                if fault.kind == "datagram-loss":
                    agent.drop_probability = fault.probability if active else 0.0
                else:
                    agent.frozen = active
            self._halt.wait(0.05)

    def stop(self):
        self._halt.set()
        self.join(timeout=2)


def run_simulation(
    config: ScenarioConfig,
    data_dir: str,
    timescale: float = 1.0,
    host: str = "127.0.0.1",
    port: int = 0,
    loop: bool = False,
    ui_dir: str | None = None,
    block: bool = True,
) -> ServeHandle:
    """Full closed loop for one scenario.

    With block=True this returns once the scenario duration has elapsed
    (never, for loop=True, until interrupted); with block=False the caller
    owns the handle and must stop() it.
    """
    clock = ScaledClock(timescale, epoch_ns=config.epoch_ns)
    store = Store(data_dir)
    scenario = Scenario(config)

    for signal in config.signals:
        store.set_unit(signal.measurement, signal.field, signal.unit)

    rules = RuleStore(store)
    for doc in config.alert_rules:
        rules.put(AlertRule.from_doc(doc))
    command_bus = CommandBus()
    alert_engine = AlertEngine(store, rules, Notifier(), command_bus, clock=clock)

    chain = LaserChain(scenario, command_bus) if config.laser_chain else None
    experiment = ExperimentProvider(scenario) if config.experiment else None
    if chain is not None:
        store.set_unit(config.laser_chain.measurement, "seed", "mW")
        store.set_unit(config.laser_chain.measurement, "amp_out", "mW")
    environment = Environment(scenario, chain, experiment, loop=loop)

    agents = _agents_from_scenario(scenario, environment, clock)
    for agent in agents:
        agent.start()

    registry = [
        NodeRegistryEntry(
            agent.config.room_id, agent.config.device_id,
            agent.config.listen_host, agent.config.listen_port,
            interval_s=config.cadence_s,
        )
        for agent in agents
    ]
    collector = Collector(registry, EngineSink(store), clock=clock)
    collector.start()

    api = Api(store, rules, alert_engine, collector, ui_dir=ui_dir)
    server = ApiServer(api, host, port)
    server.start()

    if experiment is not None:
        pusher = NodeAgent(
            NodeConfig(
                room_id=config.experiment.room,
                device_id=config.experiment.device,
                mode="push",
                push_url=server.url,
                push_interval_s=config.experiment.cycle_s,
                sensors=[
                    SensorBinding("experiment", name, SensorModel(
                        kind="coupled", source=name, unit="dimensionless"))
                    for name in ExperimentProvider.OUTPUTS
                ],
                seed=config.seed,
            ),
            clock=clock,
            environment=environment,
        )
        pusher.start()
        agents.append(pusher)

    alert_engine.start(period_s=min(
        [config.cadence_s] + [float(d.get("period_s", 20)) for d in config.alert_rules]
    ))

    faults = FaultScheduler(scenario, agents, clock)
    faults.start()

    handle = ServeHandle(store, api, server, alert_engine, collector)
    handle.clock = clock
    handle._agents = agents
    handle._threads = [faults]
    logger.info(
        "simulating %s at x%g (%d nodes, %d signals) on %s",
        config.name, timescale, len(agents), len(config.signals), server.url,
    )
    if not block:
        return handle
    end_ns = config.epoch_ns + int(config.duration_s * 1e9)
    try:
        while loop or clock.now_ns() < end_ns:
            time.sleep(0.1)
    except KeyboardInterrupt:
        logger.info("interrupted")
    finally:
        faults.stop()
        handle.stop()
    return handle
