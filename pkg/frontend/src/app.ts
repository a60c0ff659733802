// Browser shell: wires the hash-routed state (dashboard + time range) to
// panel fetch loops and the alert sidebar. All numbers on screen come
// from the HTTP API; this file only moves them into the DOM.

import { ApiClient } from "./api.js";
import { BadgeTracker } from "./badge.js";
import {
  type AlertRuleDoc,
  type DashboardLayout,
  validateThresholdRule,
} from "./model.js";
import { loadPanel } from "./panel.js";
import {
  PRESETS,
  type Preset,
  decodeHash,
  encodeHash,
  type HashState,
  resolveRange,
} from "./timerange.js";

const api = new ApiClient("");
const badge = new BadgeTracker();
let state: HashState = decodeHash(location.hash);
let layout: DashboardLayout | null = null;
let timers: number[] = [];
// relative ranges anchor at the newest stored point, so accelerated
// simulations (timestamps ahead of or behind the browser clock) still show
let dataNow_ms: number | null = null;

const DEFAULT_LAYOUT: DashboardLayout = {
  id: "default",
  name: "Lab overview",
  panels: [
    { title: "Temperatures", queries: [{ measurement: "temperature" }], refresh_s: 5, unit: "degC" },
    { title: "Pressures", queries: [{ measurement: "pressure" }], refresh_s: 5, unit: "mbar" },
    { title: "Laser powers", queries: [{ measurement: "laser_power" }], refresh_s: 5, unit: "mW" },
    { title: "Experiment", queries: [{ measurement: "experiment", field: "atom_number" }], refresh_s: 5 },
  ],
};

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  if (text) node.textContent = text;
  return node;
}

function syncHash() {
  const encoded = encodeHash(state);
  if (location.hash !== encoded) history.replaceState(null, "", encoded);
}

async function ensureLayout(): Promise<DashboardLayout> {
  const all = await api.listDashboards();
  const wanted = state.dashboard;
  if (wanted && all[wanted]) return all[wanted]!;
  const ids = Object.keys(all);
  if (ids.length > 0) return all[ids[0]!]!;
  await api.saveDashboard(DEFAULT_LAYOUT);
  return DEFAULT_LAYOUT;
}

async function refreshPanel(container: HTMLElement, index: number) {
  if (!layout) return;
  const panel = layout.panels[index]!;
  const now = dataNow_ms ?? Date.now();
  const view = await loadPanel(api, panel, resolveRange(state.range, now), now);
  const card = container.children[index] as HTMLElement;
  const body = card.querySelector(".panel-body")!;
  const flag = card.querySelector(".panel-flag")!;
  if (view.error) {
    body.innerHTML = "";
    body.appendChild(el("div", { class: "panel-error" }, `error: ${view.error}`));
    flag.textContent = "";
  } else {
    body.innerHTML = view.svg;
    flag.textContent = view.stale ? "stale" : "";
  }
}

function renderPanels() {
  const grid = document.getElementById("panels")!;
  grid.innerHTML = "";
  for (const timer of timers) clearInterval(timer);
  timers = [];
  if (!layout) return;
  layout.panels.forEach((panel, index) => {
    const card = el("section", { class: "panel" });
    const head = el("header", {});
    head.appendChild(el("h2", {}, panel.title));
    head.appendChild(el("span", { class: "panel-flag" }));
    card.appendChild(head);
    card.appendChild(el("div", { class: "panel-body" }, "loading..."));
    grid.appendChild(card);
    void refreshPanel(grid, index);
    timers.push(
      window.setInterval(() => void refreshPanel(grid, index), panel.refresh_s * 1000),
    );
  });
}

function renderRangeControls() {
  const bar = document.getElementById("range")!;
  bar.innerHTML = "";
  for (const preset of PRESETS) {
    const active =
      state.range.kind === "relative" && state.range.preset === preset;
    const button = el(
      "button",
      { class: active ? "active" : "" },
      `last ${preset}`,
    );
    button.onclick = () => {
      state.range = { kind: "relative", preset: preset as Preset };
      syncHash();
      renderRangeControls();
      renderPanels();
    };
    bar.appendChild(button);
  }
  const custom = el("button", {}, "custom...");
  custom.onclick = () => {
    const start = prompt("start (epoch ms)", String(Date.now() - 3_600_000));
    const end = prompt("end (epoch ms)", String(Date.now()));
    if (!start || !end) return;
    const start_ms = Number(start);
    const end_ms = Number(end);
    if (!(start_ms < end_ms)) {
      alert("start must precede end");
      return;
    }
    state.range = { kind: "absolute", start_ms, end_ms };
    syncHash();
    renderRangeControls();
    renderPanels();
  };
  bar.appendChild(custom);
}

function ruleSummary(rule: AlertRuleDoc): string {
  if (rule.kind === "threshold") {
    return `${rule.measurement}.${rule.field} ${rule.comparator} ${rule.limit}`;
  }
  if (rule.kind === "rate") {
    return `${rule.measurement}.${rule.field} rate > ${rule.max_rate_per_min}/min`;
  }
  return `${rule.measurement}.${rule.field} in [${rule.min}, ${rule.max}]`;
}

async function refreshAlerts() {
  const list = document.getElementById("rule-list")!;
  const badgeEl = document.getElementById("badge")!;
  try {
    const health = await api.health();
    // +1 ms: ns->ms truncation must not push the newest point past the
    // exclusive range end
    dataNow_ms =
      health.newest_ns === null ? null : Math.ceil(health.newest_ns / 1e6) + 1;
    const rules = await api.listAlerts();
    badge.update(rules);
    badgeEl.textContent = badge.state;
    badgeEl.className = `badge badge-${badge.state}`;
    list.innerHTML = "";
    for (const rule of rules) {
      const row = el("li", {});
      const rstate = rule.runtime?.state ?? "none";
      row.appendChild(el("span", { class: `dot dot-${rstate}` }));
      row.appendChild(el("span", {}, `${rule.id}: ${ruleSummary(rule)}`));
      const del = el("button", { class: "link" }, "delete");
      del.onclick = async () => {
        await api.deleteAlert(rule.id!);
        void refreshAlerts();
      };
      row.appendChild(del);
      if (rule.runtime?.last_message) {
        row.appendChild(el("div", { class: "rule-note" }, rule.runtime.last_message));
      }
      list.appendChild(row);
    }
  } catch (err) {
    badgeEl.textContent = "api error";
  }
}

function wireAlertForm() {
  const form = document.getElementById("rule-form") as HTMLFormElement;
  const problems = document.getElementById("rule-problems")!;
  form.onsubmit = async (event) => {
    event.preventDefault();
    const data = new FormData(form);
    const doc: AlertRuleDoc = {
      measurement: String(data.get("measurement") ?? ""),
      field: String(data.get("field") ?? ""),
      kind: "threshold",
      comparator: String(data.get("comparator")) as AlertRuleDoc["comparator"],
      limit: Number(data.get("limit")),
      period_s: Number(data.get("period_s") || 20),
      sink: "console",
    };
    const tagText = String(data.get("tags") ?? "").trim();
    if (tagText) {
      doc.tags = {};
      for (const part of tagText.split(",")) {
        const [key, value] = part.split("=", 2);
        if (key && value) doc.tags[key.trim()] = value.trim();
      }
    }
    const found = validateThresholdRule(doc);
    if (found.length > 0) {
      problems.textContent = found.join("; ");
      return; // invalid input never reaches the API
    }
    problems.textContent = "";
    try {
      await api.createAlert(doc);
      form.reset();
      void refreshAlerts();
    } catch (err) {
      problems.textContent = err instanceof Error ? err.message : String(err);
    }
  };
}

async function main() {
  renderRangeControls();
  wireAlertForm();
  layout = await ensureLayout();
  state.dashboard = layout.id;
  syncHash();
  document.getElementById("dashboard-name")!.textContent = layout.name;
  renderPanels();
  void refreshAlerts();
  window.setInterval(() => void refreshAlerts(), 1000);
  window.addEventListener("hashchange", () => {
    state = decodeHash(location.hash);
    renderRangeControls();
    renderPanels();
  });
}

void main();
