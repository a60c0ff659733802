// Hand-rolled SVG time-series chart: time axis, unit-labeled value axis,
// one polyline per series with a legend, an optional threshold line with
// the violating region shaded. Pure string in/out so it renders
// identically in tests and in the browser.

import { type Frame, seriesLabel } from "./model.js";
import { nsToMs } from "./timerange.js";

export interface ChartOptions {
  width?: number;
  height?: number;
  unit?: string;
  threshold?: number;
  start_ms?: number;
  end_ms?: number;
}

const PALETTE = ["#2f6fde", "#d9542b", "#2e9e4f", "#9538c9", "#c7a214", "#16a3a8"];
const MARGIN = { top: 10, right: 12, bottom: 24, left: 56 };

function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmtValue(v: number): string {
  if (v === 0) return "0";
  const abs = Math.abs(v);
  if (abs >= 1e6 || abs < 1e-3) return v.toExponential(1);
  return Number(v.toPrecision(4)).toString();
}

function fmtTime(ms: number, span_ms: number): string {
  const d = new Date(ms);
  const hhmm = `${String(d.getUTCHours()).padStart(2, "0")}:${String(
    d.getUTCMinutes(),
  ).padStart(2, "0")}`;
  if (span_ms >= 2 * 86_400_000) {
    return `${d.getUTCMonth() + 1}/${d.getUTCDate()} ${hhmm}`;
  }
  if (span_ms <= 120_000) {
    return `${hhmm}:${String(d.getUTCSeconds()).padStart(2, "0")}`;
  }
  return hhmm;
}

export function renderChart(frames: Frame[], opts: ChartOptions = {}): string {
  const width = opts.width ?? 640;
  const height = opts.height ?? 260;
  const plotW = width - MARGIN.left - MARGIN.right;
  const plotH = height - MARGIN.top - MARGIN.bottom;
  const populated = frames.filter((f) => f.times.length > 0);
  const open = `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${width} ${height}" class="chart">`;

  if (populated.length === 0) {
    return (
      `${open}<text x="${width / 2}" y="${height / 2}" text-anchor="middle" ` +
      `class="no-data">no data</text></svg>`
    );
  }

  const times_ms = populated.flatMap((f) => f.times.map(nsToMs));
  let t0 = opts.start_ms ?? Math.min(...times_ms);
  let t1 = opts.end_ms ?? Math.max(...times_ms);
  if (t1 <= t0) t1 = t0 + 1;
  const values = populated.flatMap((f) => f.values);
  let v0 = Math.min(...values);
  let v1 = Math.max(...values);
  if (opts.threshold !== undefined) {
    v0 = Math.min(v0, opts.threshold);
    v1 = Math.max(v1, opts.threshold);
  }
  if (v1 === v0) {
    v0 -= 1;
    v1 += 1;
  }
  const pad = (v1 - v0) * 0.08;
  v0 -= pad;
  v1 += pad;

  const x = (ms: number) => MARGIN.left + ((ms - t0) / (t1 - t0)) * plotW;
  const y = (v: number) => MARGIN.top + (1 - (v - v0) / (v1 - v0)) * plotH;

  const parts: string[] = [open];

  // threshold overlay first: shaded violation region under the lines
  if (opts.threshold !== undefined) {
    const ty = y(opts.threshold);
    parts.push(
      `<rect x="${MARGIN.left}" y="${MARGIN.top}" width="${plotW}" ` +
        `height="${Math.max(0, ty - MARGIN.top).toFixed(1)}" class="violation" ` +
        `fill="#d9542b" opacity="0.12"/>`,
    );
    parts.push(
      `<line x1="${MARGIN.left}" y1="${ty.toFixed(1)}" x2="${MARGIN.left + plotW}" ` +
        `y2="${ty.toFixed(1)}" class="threshold" stroke="#d9542b" ` +
        `stroke-dasharray="6 3"/>`,
    );
  }

  // axes
  parts.push(
    `<line x1="${MARGIN.left}" y1="${MARGIN.top + plotH}" x2="${MARGIN.left + plotW}" ` +
      `y2="${MARGIN.top + plotH}" class="axis"/>`,
    `<line x1="${MARGIN.left}" y1="${MARGIN.top}" x2="${MARGIN.left}" ` +
      `y2="${MARGIN.top + plotH}" class="axis"/>`,
  );
  for (let i = 0; i <= 4; i++) {
    const v = v0 + ((v1 - v0) * i) / 4;
    const yy = y(v);
    parts.push(
      `<text x="${MARGIN.left - 6}" y="${(yy + 4).toFixed(1)}" text-anchor="end" ` +
        `class="tick">${esc(fmtValue(v))}</text>`,
    );
  }
  for (let i = 0; i <= 4; i++) {
    const ms = t0 + ((t1 - t0) * i) / 4;
    parts.push(
      `<text x="${x(ms).toFixed(1)}" y="${height - 8}" text-anchor="middle" ` +
        `class="tick">${esc(fmtTime(ms, t1 - t0))}</text>`,
    );
  }
  const unit = opts.unit ?? populated[0]?.unit ?? "";
  if (unit) {
    parts.push(
      `<text x="12" y="${MARGIN.top + 10}" class="unit">${esc(unit)}</text>`,
    );
  }

  // series polylines + legend
  populated.forEach((frame, i) => {
    const color = PALETTE[i % PALETTE.length];
    const pts = frame.times
      .map((ts, j) => `${x(nsToMs(ts)).toFixed(1)},${y(frame.values[j]!).toFixed(1)}`)
      .join(" ");
    parts.push(
      `<polyline points="${pts}" fill="none" stroke="${color}" ` +
        `stroke-width="1.5" class="series" data-series="${esc(seriesLabel(frame))}"/>`,
    );
    parts.push(
      `<text x="${MARGIN.left + 8}" y="${MARGIN.top + 14 + i * 14}" class="legend" ` +
        `fill="${color}">${esc(seriesLabel(frame))}</text>`,
    );
  });

  parts.push("</svg>");
  return parts.join("");
}
