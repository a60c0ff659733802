"""`labnet` command line: run any role, operate the stack from a terminal.

Exit codes: 0 success, 1 usage error, 2 runtime error. Flag defaults may
come from a flat key-value file named by $LABNET_CONFIG; explicit flags
always win over file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import analysis
from .errors import LabnetError
from .storage import SeriesFrame, SeriesQuery, Store, estimate_storage

logger = logging.getLogger(__name__)

CONFIG_ENV = "LABNET_CONFIG"
CONFIG_KEYS = {"data_dir", "url", "host", "port", "token", "format"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_cli_config() -> dict:
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    config = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            config[key] = value.strip()
    return config


def parse_duration(text: str) -> float:
    """Seconds from `90`, `90s`, `15m`, `2.5h`, or `7d`."""
    text = text.strip()
    suffixes = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}
    if text and text[-1] in suffixes:
        return float(text[:-1]) * suffixes[text[-1]]
    return float(text)


def parse_when(text: str) -> int:
    """Epoch ns from ns-integer, RFC3339, `now`, or `now-<duration>`."""
    from .api import ApiError, parse_time

    text = text.strip()
    if text.startswith("now"):
        base = time.time_ns()
        rest = text[3:].strip()
        if not rest:
            return base
        sign = 1 if rest[0] == "+" else -1
        return base + sign * int(parse_duration(rest[1:]) * 1e9)
    try:
        return parse_time(text)
    except ApiError as exc:
        raise UsageError(exc.message) from None


def parse_selector(text: str) -> SeriesQuery:
    """`measurement[.field][,tag=value...]`, e.g. `temperature.T1,RoomID=Lab03`."""
    head, *tag_parts = text.split(",")
    measurement, dot, fieldkey = head.partition(".")
    tags = {}
    for part in tag_parts:
        key, eq, value = part.partition("=")
        if not eq:
            raise UsageError(f"bad tag filter {part!r} in selector {text!r}")
        tags[key] = value
    if not measurement:
        raise UsageError(f"selector {text!r} needs a measurement")
    return SeriesQuery(
        measurement=measurement,
        tags=tags,
        fields=[fieldkey] if dot and fieldkey else None,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="labnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("node", help="run one measurement node agent")
    p.add_argument("--config", required=True, help="node config file")

    p = sub.add_parser("collector", help="poll registered nodes and forward points")
    p.add_argument("--registry", required=True, help="node registry file")
    p.add_argument("--target", help="write endpoint URL (default from LABNET_CONFIG url)")
    p.add_argument("--response-timeout", type=float, default=None,
                   help="per-node response timeout in seconds")

    p = sub.add_parser("serve", help="run storage engine + HTTP API + alert engine")
    p.add_argument("--data-dir", help="store directory")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--token", default=None, help="require this bearer token")
    p.add_argument("--ui-dir", default=None, help="serve dashboard assets from here")

    p = sub.add_parser("simulate", help="run a lab scenario as a full closed loop")
    p.add_argument("scenario", help="packaged scenario name or path to a scenario file")
    p.add_argument("--data-dir", help="store directory (default: temp dir, printed)")
    p.add_argument("--duration", help="override scenario duration, e.g. 2.5h")
    p.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p.add_argument("--timescale", type=float, default=1.0,
                   help="simulated seconds per wall second")
    p.add_argument("--offline", action="store_true",
                   help="synthesize points directly into the store, no network")
    p.add_argument("--loop", action="store_true", help="repeat the scenario forever")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--ui-dir", default=None)

    p = sub.add_parser("query", help="run one query against a store")
    _query_args(p)
    p.add_argument("--agg", choices=["mean", "min", "max", "last"])
    p.add_argument("--bucket", type=float, help="aggregation bucket in seconds")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("analyze", help="correlation / spectra / stability analysis")
    asub = p.add_subparsers(dest="analysis", metavar="KIND")
    pc = asub.add_parser("corr", help="Pearson correlation matrix")
    _query_args(pc, selector=False)
    pc.add_argument("--measurement", action="append", default=None,
                    help="repeatable; default: every measurement in range")
    pc.add_argument("--step", type=float, default=20.0, help="alignment grid seconds")
    pc.add_argument("--method", choices=list(analysis.ALIGN_METHODS), default="linear")
    px = asub.add_parser("xcorr", help="lagged cross-correlation of two series")
    _query_args(px, selector=False)
    px.add_argument("--a", required=True, help="series selector, meas.field[,tag=v]")
    px.add_argument("--b", required=True, help="series selector")
    px.add_argument("--step", type=float, default=20.0)
    px.add_argument("--max-lag", type=int, default=60)
    pp = asub.add_parser("psd", help="power spectral density of one series")
    _query_args(pp, selector=False)
    pp.add_argument("--a", required=True, help="series selector")
    pp.add_argument("--segment", type=int, default=None)
    pp.add_argument("--overlap", type=float, default=0.5)
    pp.add_argument("--window", choices=list(analysis.WINDOWS), default="hann")
    ps = asub.add_parser("summary", help="mean +/- std over a window")
    _query_args(ps, selector=False)
    ps.add_argument("--measurement", required=True)
    ps.add_argument("--field", required=True)
    ps.add_argument("--tag", action="append", default=[], help="tag filter key=value")

    p = sub.add_parser("export", help="export series frames to CSV files")
    _query_args(p, selector=False)
    p.add_argument("--measurement", action="append", default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("snapshot", help="write a consistent store snapshot")
    p.add_argument("--data-dir", help="store directory")
    p.add_argument("--dest", required=True, help="snapshot destination directory")

    p = sub.add_parser("estimate", help="storage cost model")
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--measurements", type=int, required=True)
    p.add_argument("--interval", type=float, default=20.0)
    p.add_argument("--duration", default="365d")
    p.add_argument("--bytes-per-point", type=float, default=None)

    return parser


def _query_args(p: argparse.ArgumentParser, selector: bool = True):
    p.add_argument("--data-dir", help="store directory")
    p.add_argument("--url", help="query a live API instead of a directory")
    p.add_argument("--start", default="now-8h")
    p.add_argument("--end", default="now")
    p.add_argument("--format", choices=["table", "csv", "json"], default=None)
    if selector:
        p.add_argument("--measurement", required=True)
        p.add_argument("--field")
        p.add_argument("--tag", action="append", default=[], help="tag filter key=value")


# ----------------------------------------------------------------------
# data access shared by query/analyze/export


def _open_frames(args, queries: list[SeriesQuery], config: dict) -> list[SeriesFrame]:
    url = getattr(args, "url", None) or config.get("url")
    data_dir = getattr(args, "data_dir", None) or config.get("data_dir")
    if url:
        return _http_frames(url, queries, config.get("token"))
    if not data_dir:
        raise UsageError("need --data-dir or --url (or set them in LABNET_CONFIG)")
    store = Store(data_dir, read_only=True)
    frames = []
    for q in queries:
        frames.extend(store.query(q))
    return frames


def _http_frames(url, queries, token=None) -> list[SeriesFrame]:
    import urllib.parse
    import urllib.request

    from .storage import SeriesKey

    frames = []
    for q in queries:
        params = {"measurement": q.measurement, "start": q.start_ns, "end": q.end_ns}
        for key, value in q.tags.items():
            params[f"tag.{key}"] = value
        if q.fields:
            params["field"] = ",".join(q.fields)
        if q.agg:
            params["agg"] = q.agg
            params["bucket_s"] = q.bucket_s
        if q.limit:
            params["limit"] = q.limit
        req = urllib.request.Request(
            f"{url.rstrip('/')}/query?{urllib.parse.urlencode(params)}")
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        with urllib.request.urlopen(req, timeout=30) as resp:
            doc = json.loads(resp.read().decode("utf-8"))
        for f in doc["frames"]:
            key = SeriesKey(f["measurement"], tuple(f["tags"].items()), f["field"])
            frames.append(SeriesFrame(key, f.get("unit", ""), f["times"], f["values"]))
    return frames


def _tags_from(args) -> dict:
    tags = {}
    for item in getattr(args, "tag", []) or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"bad --tag {item!r}, expected key=value")
        tags[key] = value
    return tags


def _emit_frames(frames: list[SeriesFrame], fmt: str):
    if fmt == "json":
        from .api import frames_to_json

        sys.stdout.write(frames_to_json(frames).decode("utf-8") + "\n")
    elif fmt == "csv":
        for frame in frames:
            sys.stdout.write(analysis.frame_to_csv(frame))
    else:
        if not frames:
            print("(no data)")
            return
        for frame in frames:
            unit = f" [{frame.unit}]" if frame.unit else ""
            print(f"# {frame.key.canonical()}{unit}")
            print(f"{'time_ns':>20}  value")
            for ts, val in zip(frame.timestamps, frame.values):
                print(f"{ts:>20}  {val!r}")


# ----------------------------------------------------------------------
# subcommand bodies


def _cmd_node(args, config):
    from .node import NodeAgent, load_node_config

    agent = NodeAgent(load_node_config(args.config))
    mode = agent.config.mode
    where = (
        f"udp {agent.config.listen_host}:{agent.config.listen_port}"
        if mode == "pull" else agent.config.push_url
    )
    print(f"node {agent.config.room_id}/{agent.config.device_id} ({mode}) on {where}")
    try:
        agent.run()
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_collector(args, config):
    from .collector import Collector, HttpSink, load_registry

    target = args.target or config.get("url")
    if not target:
        raise UsageError("need --target or a url in LABNET_CONFIG")
    registry = load_registry(args.registry)
    collector = Collector(registry, HttpSink(target),
                          response_timeout_s=args.response_timeout)
    print(f"collector: {len(registry)} nodes -> {target}")
    try:
        collector.run()
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_serve(args, config):
    from .runner import build_serve

    data_dir = args.data_dir or config.get("data_dir")
    if not data_dir:
        raise UsageError("need --data-dir (or data_dir in LABNET_CONFIG)")
    handle = build_serve(
        data_dir,
        host=args.host or config.get("host", "127.0.0.1"),
        port=args.port if args.port is not None else int(config.get("port", 8080)),
        token=args.token or config.get("token"),
        ui_dir=args.ui_dir,
    )
    print(f"serving {data_dir} at {handle.url}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        handle.stop()
    return 0


def _cmd_simulate(args, config):
    import tempfile

    from .sim import load_scenario, synthesize
    from .runner import run_simulation

    scenario = load_scenario(
        args.scenario,
        seed=args.seed,
        duration_s=parse_duration(args.duration) if args.duration else None,
    )
    data_dir = args.data_dir or config.get("data_dir") or tempfile.mkdtemp(
        prefix=f"labnet-{scenario.name}-")
    print(f"scenario {scenario.name}: {scenario.duration_s:.0f} s of lab time, "
          f"seed {scenario.seed}, store {data_dir}")
    if args.offline:
        from .alerts import AlertEngine, CommandBus, Notifier, RuleStore
        from .clock import ManualClock

        store = Store(data_dir)
        engine = None
        if scenario.alert_rules:
            from .alerts import AlertRule

            rules = RuleStore(store)
            for doc in scenario.alert_rules:
                rules.put(AlertRule.from_doc(doc))
            engine = AlertEngine(store, rules, Notifier(), CommandBus(),
                                 clock=ManualClock(scenario.epoch_ns))
        result = synthesize(scenario, store, alert_engine=engine)
        store.close()
        print(f"synthesized {result.points_written} points into {data_dir}")
        return 0
    handle = run_simulation(
        scenario, data_dir,
        timescale=args.timescale,
        host=args.host or config.get("host", "127.0.0.1"),
        port=args.port if args.port is not None else 0,
        loop=args.loop,
        ui_dir=args.ui_dir,
        block=False,
    )
    print(f"api: {handle.url}", flush=True)
    end_ns = scenario.epoch_ns + int(scenario.duration_s * 1e9)
    try:
        while args.loop or handle.clock.now_ns() < end_ns:
            time.sleep(0.1)
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    print(f"simulation complete; data in {data_dir}")
    return 0


def _cmd_query(args, config):
    q = SeriesQuery(
        measurement=args.measurement,
        tags=_tags_from(args),
        fields=[args.field] if args.field else None,
        start_ns=parse_when(args.start),
        end_ns=parse_when(args.end),
        agg=args.agg,
        bucket_s=args.bucket,
        limit=args.limit,
    )
    q.validate()
    frames = _open_frames(args, [q], config)
    _emit_frames(frames, args.format or config.get("format", "table"))
    return 0


def _range_query(args, measurement, config) -> SeriesQuery:
    return SeriesQuery(
        measurement=measurement,
        start_ns=parse_when(args.start),
        end_ns=parse_when(args.end),
    )


def _all_measurements(args, config) -> list[str]:
    data_dir = getattr(args, "data_dir", None) or config.get("data_dir")
    if data_dir:
        return Store(data_dir, read_only=True).measurements()
    raise UsageError("--measurement is required when querying over --url")


def _cmd_analyze(args, config):
    fmt = args.format or config.get("format", "table")
    if args.analysis == "corr":
        measurements = args.measurement or _all_measurements(args, config)
        queries = [_range_query(args, m, config) for m in measurements]
        frames = [f for f in _open_frames(args, queries, config) if len(f) >= 2]
        if len(frames) < 2:
            raise LabnetError("need at least two series with two points each")
        matrix = analysis.pearson_matrix(analysis.align(frames, args.step, args.method))
        if fmt == "csv":
            sys.stdout.write(analysis.correlation_to_csv(matrix))
        else:
            width = max(len(n) for n in matrix.names)
            print(f"pearson correlation, n={matrix.samples}")
            for i, name in enumerate(matrix.names):
                row = " ".join(f"{v:+.3f}" for v in matrix.r[i])
                print(f"{name:>{width}}  {row}")
        return 0
    if args.analysis == "xcorr":
        qa, qb = parse_selector(args.a), parse_selector(args.b)
        for q in (qa, qb):
            q.start_ns, q.end_ns = parse_when(args.start), parse_when(args.end)
        frames = _open_frames(args, [qa], config) + _open_frames(args, [qb], config)
        if len(frames) != 2:
            raise LabnetError(f"selectors matched {len(frames)} series, need exactly 2")
        m = analysis.align(frames, args.step)
        xc = analysis.cross_correlation(m.values[:, 0], m.values[:, 1], args.max_lag)
        if fmt == "csv":
            print("lag_samples,lag_seconds,r")
            for lag, r in zip(xc.lags, xc.values):
                print(f"{lag},{lag * args.step!r},{r!r}")
        else:
            print(f"best lag: {xc.best_lag} samples ({xc.best_lag * args.step:.0f} s), "
                  f"r={xc.at(xc.best_lag):.4f}")
        return 0
    if args.analysis == "psd":
        q = parse_selector(args.a)
        q.start_ns, q.end_ns = parse_when(args.start), parse_when(args.end)
        frames = _open_frames(args, [q], config)
        if len(frames) != 1:
            raise LabnetError(f"selector matched {len(frames)} series, need exactly 1")
        frame = frames[0]
        import numpy as np

        cadence = float(np.median(np.diff(frame.timestamps))) / 1e9
        spec = analysis.psd(
            np.asarray(frame.values), 1.0 / cadence,
            segment_length=args.segment, overlap=args.overlap, window=args.window,
        )
        if fmt == "csv":
            sys.stdout.write(analysis.spectrum_to_csv(spec))
        else:
            peak = int(np.argmax(spec.power[1:]) + 1)
            print(f"psd: {len(frame)} samples at {1.0 / cadence:.4g} Hz, "
                  f"segment {spec.segment_length}, {spec.n_segments} segments")
            print(f"peak bin: {spec.frequencies[peak]:.6g} Hz "
                  f"(power {spec.power[peak]:.6g})")
        return 0
    if args.analysis == "summary":
        q = SeriesQuery(
            measurement=args.measurement, tags=_tags_from(args),
            fields=[args.field], start_ns=parse_when(args.start),
            end_ns=parse_when(args.end),
        )
        frames = _open_frames(args, [q], config)
        if not frames:
            raise LabnetError("no matching series")
        s = analysis.summarize(frames[0], q.start_ns, q.end_ns)
        unit = f" {s.unit}" if s.unit else ""
        print(f"mean={s.mean:.6g} std={s.std:.6g}{unit} (n={s.count})")
        return 0
    raise UsageError("analyze needs one of: corr, xcorr, psd, summary")


def _cmd_export(args, config):
    measurements = args.measurement or _all_measurements(args, config)
    queries = [_range_query(args, m, config) for m in measurements]
    frames = _open_frames(args, queries, config)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for frame in frames:
        name = frame.key.canonical().replace(" ", "__").replace("/", "_")
        path = os.path.join(args.out, f"{name}.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(analysis.frame_to_csv(frame))
        written.append(path)
    print(f"exported {len(written)} series to {args.out}")
    return 0


def _cmd_snapshot(args, config):
    data_dir = args.data_dir or config.get("data_dir")
    if not data_dir:
        raise UsageError("need --data-dir (or data_dir in LABNET_CONFIG)")
    store = Store(data_dir)
    manifest = store.snapshot(args.dest)
    store.close()
    print(f"snapshot: {len(manifest.files)} files, {manifest.total_points} points "
          f"-> {manifest.path}")
    return 0


def _cmd_estimate(args, config):
    kwargs = {}
    if args.bytes_per_point is not None:
        kwargs["bytes_per_point"] = args.bytes_per_point
    total = estimate_storage(
        args.devices, args.measurements, args.interval,
        parse_duration(args.duration), **kwargs,
    )
    print(f"{total:.0f} bytes ({total / 1e9:.2f} GB)")
    return 0


_COMMANDS = {
    "node": _cmd_node,
    "collector": _cmd_collector,
    "serve": _cmd_serve,
    "simulate": _cmd_simulate,
    "query": _cmd_query,
    "analyze": _cmd_analyze,
    "export": _cmd_export,
    "snapshot": _cmd_snapshot,
    "estimate": _cmd_estimate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.DEBUG)
        else:
            logging.basicConfig(level=logging.WARNING)
        if not args.command:
            raise UsageError("a command is required")
        config = load_cli_config()
        return _COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"labnet: {exc}", file=sys.stderr)
        print("hint: labnet --help lists commands; labnet COMMAND --help lists flags",
              file=sys.stderr)
        return 1
    except (LabnetError, OSError, ValueError) as exc:
        print(f"labnet: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
