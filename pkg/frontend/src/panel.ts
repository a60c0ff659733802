// Panel view-model: fetch every query of a panel, render the chart, and
// flag staleness (no data within three refresh periods of the range end).
// A failed fetch produces an inline error state and never affects other
// panels.

import type { ApiClient } from "./api.js";
import { renderChart } from "./chart.js";
import type { Frame, PanelSpec } from "./model.js";
import { nsToMs, type ResolvedRange } from "./timerange.js";

export interface PanelView {
  title: string;
  svg: string;
  error?: string;
  stale: boolean;
  frameCount: number;
}

export function isStale(
  frames: Frame[],
  panel: PanelSpec,
  now_ms: number,
): boolean {
  const newest = frames
    .filter((f) => f.times.length > 0)
    .map((f) => nsToMs(f.times[f.times.length - 1]!))
    .reduce((a, b) => Math.max(a, b), -Infinity);
  if (newest === -Infinity) return true;
  return now_ms - newest > 3 * panel.refresh_s * 1000;
}

export async function loadPanel(
  api: ApiClient,
  panel: PanelSpec,
  range: ResolvedRange,
  now_ms = Date.now(),
): Promise<PanelView> {
  try {
    const results = await Promise.all(panel.queries.map((q) => api.query(q, range)));
    const frames = results.flat();
    return {
      title: panel.title,
      svg: renderChart(frames, {
        unit: panel.unit,
        threshold: panel.threshold,
        start_ms: range.start_ms,
        end_ms: range.end_ms,
      }),
      stale: isStale(frames, panel, now_ms),
      frameCount: frames.length,
    };
  } catch (err) {
    return {
      title: panel.title,
      svg: "",
      error: err instanceof Error ? err.message : String(err),
      stale: true,
      frameCount: 0,
    };
  }
}
