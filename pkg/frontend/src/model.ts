// Shared types mirroring the monitoring API documents (docs/api.md).

export interface QueryDescriptor {
  measurement: string;
  field?: string;
  tags?: Record<string, string>;
  agg?: "mean" | "min" | "max" | "last";
  bucket_s?: number;
}

export interface PanelSpec {
  title: string;
  queries: QueryDescriptor[];
  refresh_s: number;
  unit?: string;
  threshold?: number;
}

export interface DashboardLayout {
  id?: string;
  name: string;
  panels: PanelSpec[];
}

export interface Frame {
  measurement: string;
  tags: Record<string, string>;
  field: string;
  unit: string;
  times: number[]; // epoch ns (display precision only)
  values: number[];
}

export type RuleState = "none" | "firing" | "resolved";

export interface RuleRuntime {
  state: RuleState;
  staleness?: number;
  last_event_ns?: number | null;
  last_message?: string | null;
}

export interface AlertRuleDoc {
  id?: string;
  measurement: string;
  field: string;
  tags?: Record<string, string>;
  kind: "threshold" | "rate" | "interlock";
  comparator?: ">" | "<" | ">=" | "<=";
  limit?: number;
  unit?: string;
  max_rate_per_min?: number;
  lookback_s?: number;
  min?: number;
  max?: number;
  margin?: number | null;
  latching?: boolean;
  period_s?: number;
  sink?: string;
  target?: string;
  runtime?: RuleRuntime;
}

export interface HealthDoc {
  uptime_s: number;
  write_requests: number;
  query_requests: number;
  points_accepted: number;
  storage: { points_stored: number; series: number; disk_bytes: number };
  newest_ns: number | null; // anchors relative ranges at the data's "now"
  delivery: Record<string, number | null>;
  active_alerts: number;
  alert_states: Record<string, RuleRuntime>;
}

export function seriesLabel(frame: Frame): string {
  const tags = Object.entries(frame.tags)
    .map(([k, v]) => `${k}=${v}`)
    .join(",");
  return tags
    ? `${frame.measurement},${tags}.${frame.field}`
    : `${frame.measurement}.${frame.field}`;
}

/** Client-side mirror of the server's threshold-rule invariants. */
export function validateThresholdRule(doc: AlertRuleDoc): string[] {
  const problems: string[] = [];
  if (!doc.measurement) problems.push("measurement is required");
  if (!doc.field) problems.push("field is required");
  if (!doc.comparator || ![">", "<", ">=", "<="].includes(doc.comparator)) {
    problems.push("comparator must be one of > < >= <=");
  }
  if (doc.limit === undefined || !Number.isFinite(doc.limit)) {
    problems.push("limit must be a finite number");
  }
  if (doc.period_s !== undefined && !(doc.period_s > 0)) {
    problems.push("evaluation period must be positive");
  }
  return problems;
}
