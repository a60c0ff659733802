// Thin typed client for the monitoring API. The dashboard never computes
// values itself: everything displayed comes from /query, /alerts,
// /dashboards, or /health.

import type {
  AlertRuleDoc,
  DashboardLayout,
  Frame,
  HealthDoc,
  QueryDescriptor,
} from "./model.js";
import type { ResolvedRange } from "./timerange.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {
    this.base = base.replace(/\/$/, "");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
      init.headers = { "Content-Type": "application/json" };
    }
    const resp = await this.fetchFn(this.base + path, init);
    if (resp.status === 204) return undefined as T;
    const text = await resp.text();
    if (!resp.ok) {
      let code = "http_error";
      let message = text || resp.statusText;
      try {
        const doc = JSON.parse(text);
        code = doc.code ?? code;
        message = doc.message ?? message;
      } catch {
        // non-JSON error body: keep the raw text
      }
      throw new ApiError(resp.status, code, message);
    }
    return text ? (JSON.parse(text) as T) : (undefined as T);
  }

  queryUrl(q: QueryDescriptor, range: ResolvedRange): string {
    const params = new URLSearchParams({
      measurement: q.measurement,
      start: range.start_ns,
      end: range.end_ns,
    });
    if (q.field) params.set("field", q.field);
    for (const [key, value] of Object.entries(q.tags ?? {})) {
      params.set(`tag.${key}`, value);
    }
    if (q.agg) {
      params.set("agg", q.agg);
      params.set("bucket_s", String(q.bucket_s ?? 60));
    }
    return `/query?${params.toString()}`;
  }

  async query(q: QueryDescriptor, range: ResolvedRange): Promise<Frame[]> {
    const doc = await this.request<{ frames: Frame[] }>("GET", this.queryUrl(q, range));
    return doc.frames;
  }

  health(): Promise<HealthDoc> {
    return this.request("GET", "/health");
  }

  listAlerts(): Promise<AlertRuleDoc[]> {
    return this.request("GET", "/alerts");
  }

  getAlert(id: string): Promise<AlertRuleDoc> {
    return this.request("GET", `/alerts/${encodeURIComponent(id)}`);
  }

  async createAlert(doc: AlertRuleDoc): Promise<string> {
    const created = await this.request<{ id: string }>("POST", "/alerts", doc);
    return created.id;
  }

  updateAlert(id: string, doc: AlertRuleDoc): Promise<void> {
    return this.request("PUT", `/alerts/${encodeURIComponent(id)}`, doc);
  }

  deleteAlert(id: string): Promise<void> {
    return this.request("DELETE", `/alerts/${encodeURIComponent(id)}`);
  }

  listDashboards(): Promise<Record<string, DashboardLayout>> {
    return this.request("GET", "/dashboards");
  }

  getDashboard(id: string): Promise<DashboardLayout> {
    return this.request("GET", `/dashboards/${encodeURIComponent(id)}`);
  }

  async saveDashboard(layout: DashboardLayout): Promise<string> {
    if (layout.id) {
      await this.request("PUT", `/dashboards/${encodeURIComponent(layout.id)}`, layout);
      return layout.id;
    }
    const created = await this.request<{ id: string }>("POST", "/dashboards", layout);
    return created.id;
  }
}
