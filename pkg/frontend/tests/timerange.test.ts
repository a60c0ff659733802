import { describe, expect, it } from "vitest";

import {
  decodeHash,
  encodeHash,
  msToNs,
  nsToMs,
  resolveRange,
} from "../src/timerange.js";

describe("presets", () => {
  it("last 8h resolves to end=now, start=now-8h", () => {
    const now = 1_600_000_000_000;
    const r = resolveRange({ kind: "relative", preset: "8h" }, now);
    expect(r.end_ms).toBe(now);
    expect(r.start_ms).toBe(now - 8 * 3_600_000);
    expect(r.end_ns).toBe("1600000000000000000");
    expect(r.start_ns).toBe("1599971200000000000");
  });

  it.each([
    ["1h", 3_600_000],
    ["24h", 86_400_000],
    ["7d", 604_800_000],
  ] as const)("preset %s spans %d ms", (preset, span) => {
    const r = resolveRange({ kind: "relative", preset }, 2_000_000_000_000);
    expect(r.end_ms - r.start_ms).toBe(span);
  });
});

describe("nanosecond conversion", () => {
  it("is exact beyond float53 precision", () => {
    // 1.6e18 ns is not representable exactly as a double; the string is
    expect(msToNs(1_600_000_000_123)).toBe("1600000000123000000");
  });

  it("round-trips milliseconds", () => {
    expect(nsToMs(msToNs(1_234_567_890_123))).toBe(1_234_567_890_123);
  });
});

describe("absolute ranges", () => {
  it("rejects inverted ranges", () => {
    expect(() =>
      resolveRange({ kind: "absolute", start_ms: 10, end_ms: 10 }),
    ).toThrow(/precede/);
  });
});

describe("hash encoding (shareable URLs)", () => {
  it("round-trips dashboard + relative range", () => {
    const state = {
      dashboard: "lab overview",
      range: { kind: "relative", preset: "24h" },
    } as const;
    expect(decodeHash(encodeHash(state))).toEqual(state);
  });

  it("round-trips absolute ranges", () => {
    const state = {
      dashboard: "d1",
      range: { kind: "absolute", start_ms: 1000, end_ms: 9999 },
    } as const;
    expect(decodeHash(encodeHash(state))).toEqual(state);
  });

  it("falls back to the default range on garbage", () => {
    expect(decodeHash("#r=banana").range).toEqual({
      kind: "relative",
      preset: "8h",
    });
    expect(decodeHash("").range).toEqual({ kind: "relative", preset: "8h" });
  });
});
