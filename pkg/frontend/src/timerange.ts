// Time-range selection: relative presets plus absolute ranges, with a URL
// hash encoding so a dashboard + range is shareable as a link.
//
// Ranges resolve to epoch nanoseconds. Millisecond inputs are converted
// through BigInt so the nanosecond strings sent to the API never lose
// precision to float rounding.

export type Preset = "1h" | "8h" | "24h" | "7d";

export const PRESETS: readonly Preset[] = ["1h", "8h", "24h", "7d"];

const PRESET_MS: Record<Preset, number> = {
  "1h": 3_600_000,
  "8h": 28_800_000,
  "24h": 86_400_000,
  "7d": 604_800_000,
};

export type TimeRange =
  | { kind: "relative"; preset: Preset }
  | { kind: "absolute"; start_ms: number; end_ms: number };

export interface ResolvedRange {
  start_ns: string; // decimal nanoseconds, exact
  end_ns: string;
  start_ms: number; // for axis math and display
  end_ms: number;
}

export function msToNs(ms: number): string {
  return (BigInt(Math.round(ms)) * 1_000_000n).toString();
}

export function nsToMs(ns: number | string): number {
  return typeof ns === "string" ? Number(BigInt(ns) / 1_000_000n) : ns / 1e6;
}

export function resolveRange(range: TimeRange, now_ms = Date.now()): ResolvedRange {
  if (range.kind === "relative") {
    const start = now_ms - PRESET_MS[range.preset];
    return {
      start_ms: start,
      end_ms: now_ms,
      start_ns: msToNs(start),
      end_ns: msToNs(now_ms),
    };
  }
  if (!(range.start_ms < range.end_ms)) {
    throw new Error("range start must precede end");
  }
  return {
    start_ms: range.start_ms,
    end_ms: range.end_ms,
    start_ns: msToNs(range.start_ms),
    end_ns: msToNs(range.end_ms),
  };
}

export interface HashState {
  dashboard?: string;
  range: TimeRange;
}

const DEFAULT_RANGE: TimeRange = { kind: "relative", preset: "8h" };

/** `#d=<id>&r=8h` or `#d=<id>&r=<start_ms>-<end_ms>` */
export function encodeHash(state: HashState): string {
  const parts: string[] = [];
  if (state.dashboard) parts.push(`d=${encodeURIComponent(state.dashboard)}`);
  if (state.range.kind === "relative") {
    parts.push(`r=${state.range.preset}`);
  } else {
    parts.push(`r=${state.range.start_ms}-${state.range.end_ms}`);
  }
  return `#${parts.join("&")}`;
}

export function decodeHash(hash: string): HashState {
  const state: HashState = { range: DEFAULT_RANGE };
  for (const part of hash.replace(/^#/, "").split("&")) {
    const [key, value] = part.split("=", 2);
    if (!value) continue;
    if (key === "d") state.dashboard = decodeURIComponent(value);
    if (key === "r") {
      if ((PRESETS as readonly string[]).includes(value)) {
        state.range = { kind: "relative", preset: value as Preset };
      } else {
        const m = /^(\d+)-(\d+)$/.exec(value);
        if (m) {
          const start = Number(m[1]);
          const end = Number(m[2]);
          if (start < end) state.range = { kind: "absolute", start_ms: start, end_ms: end };
        }
      }
    }
  }
  return state;
}
