// Dashboard end-to-end against a live `labnet simulate` process:
// a panel renders for a queried range, a threshold rule created through
// the client appears via /alerts, and a scripted violation (a temperature
// sine crossing the limit) drives the badge none -> firing -> resolved.

import { type ChildProcess, spawn } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { BadgeTracker } from "../src/badge.js";
import { loadPanel } from "../src/panel.js";
import { resolveRange } from "../src/timerange.js";

const FRONTEND = dirname(dirname(fileURLToPath(import.meta.url)));

// temperature swings 24 +/- 3 degC with a 60 s period: a `> 25` rule
// fires for about a third of every cycle
const SCENARIO = {
  name: "e2e_badge",
  duration_s: 120,
  cadence_s: 2,
  seed: 5,
  signals: [{
    name: "lab_temp",
    room: "Lab01",
    device: "Env01",
    measurement: "temperature",
    field: "T1",
    unit: "degC",
    model: { kind: "sine", base: 24.0, amplitude: 3.0, period_s: 60.0, noise_std: 0.0 },
  }],
};

let child: ChildProcess;
let api: ApiClient;
let baseUrl = "";

function sleep(ms: number) {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

beforeAll(async () => {
  const dir = mkdtempSync(join(tmpdir(), "labnet-e2e-"));
  const scenarioPath = join(dir, "e2e_badge.json");
  writeFileSync(scenarioPath, JSON.stringify(SCENARIO));
  child = spawn(
    "python3",
    [
      "-m", "labnet.cli", "simulate", scenarioPath,
      "--loop", "--timescale", "20",
      "--data-dir", join(dir, "store"),
      "--ui-dir", join(FRONTEND, "dist"),
      "--port", "0",
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  const url = await new Promise<string>((resolve, reject) => {
    let buffer = "";
    const timer = setTimeout(
      () => reject(new Error(`no api line from simulate; got: ${buffer}`)),
      60_000,
    );
    child.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const m = /api: (http:\/\/[^\s]+)/.exec(buffer);
      if (m) {
        clearTimeout(timer);
        resolve(m[1]!);
      }
    });
    child.on("exit", (code) =>
      reject(new Error(`simulate exited early (${code})`)),
    );
  });
  baseUrl = url;
  api = new ApiClient(url);
  // wait for the collector to land a few cadences of points
  const deadline = Date.now() + 60_000;
  for (;;) {
    try {
      const health = await api.health();
      if (health.newest_ns !== null && health.storage.points_stored >= 5) break;
    } catch {
      // server still starting
    }
    if (Date.now() > deadline) throw new Error("no data within 60 s");
    await sleep(200);
  }
});

afterAll(async () => {
  child.kill("SIGTERM");
  await new Promise((resolve) => child.on("exit", resolve));
});

describe("dashboard end-to-end", () => {
  it("renders a panel for a queried range from the live API", async () => {
    const health = await api.health();
    const now_ms = Math.ceil(health.newest_ns! / 1e6) + 1;
    const range = resolveRange({ kind: "relative", preset: "1h" }, now_ms);
    const view = await loadPanel(
      api,
      {
        title: "Temperatures",
        queries: [{ measurement: "temperature", field: "T1" }],
        refresh_s: 5,
        unit: "degC",
        threshold: 25,
      },
      range,
      now_ms,
    );
    expect(view.error).toBeUndefined();
    expect(view.frameCount).toBe(1);
    expect(view.svg).toContain("<polyline");
    expect(view.svg).toContain('class="threshold"');
    expect(view.svg).toContain("degC");
    expect(view.stale).toBe(false);
  });

  it("persists a dashboard layout and reloads it identically", async () => {
    const layout = {
      id: "e2e",
      name: "E2E overview",
      panels: [{
        title: "Temps",
        queries: [{ measurement: "temperature", field: "T1" }],
        refresh_s: 5,
        unit: "degC",
        threshold: 25,
      }],
    };
    const id = await api.saveDashboard(layout);
    expect(await api.getDashboard(id)).toEqual(layout);
  });

  it("created threshold rule appears via /alerts and the scripted "
     + "violation drives the badge none -> firing -> resolved", async () => {
    const badge = new BadgeTracker();
    badge.update(await api.listAlerts()); // pristine: no rules, state none
    expect(badge.state).toBe("none");

    const id = await api.createAlert({
      measurement: "temperature",
      field: "T1",
      kind: "threshold",
      comparator: ">",
      limit: 25.0,
      period_s: 2,
      sink: "console",
    });
    const listed = await api.listAlerts();
    expect(listed.map((r) => r.id)).toContain(id);

    const deadline = Date.now() + 90_000;
    while (!badge.sawFullCycle() && Date.now() < deadline) {
      badge.update(await api.listAlerts());
      await sleep(50);
    }
    expect(badge.transitions).toContain("firing");
    expect(badge.sawFullCycle()).toBe(true);
  });

  it("serves the built dashboard under /ui", async () => {
    const resp = await fetch(`${baseUrl}/ui/`);
    expect(resp.status).toBe(200);
    const html = await resp.text();
    expect(html).toContain("labnet dashboard");
    const js = await fetch(`${baseUrl}/ui/app.js`);
    expect(js.status).toBe(200);
    expect(js.headers.get("content-type")).toContain("javascript");
  });
});
