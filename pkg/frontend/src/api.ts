// Thin typed client over the review-service HTTP API. Every mutation
// carries the acting annotator in X-Actor and the expected item version for
// optimistic concurrency; a 409 surfaces as a conflict error the caller
// must resolve by reloading.

import type { Decision, ItemDetail, QueueResponse } from "./types";

export class ApiConflict extends Error {
  currentVersion?: number;
  constructor(message: string, currentVersion?: number) {
    super(message);
    this.currentVersion = currentVersion;
  }
}

export class ApiFailure extends Error {
  status: number;
  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

export class ReviewApi {
  constructor(
    readonly baseUrl: string,
    public actor: string = "anonymous",
  ) {}

  blobUrl(hash: string): string {
    return `${this.baseUrl}/blobs/${hash}`;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await fetch(`${this.baseUrl}${path}`, {
      method,
      headers: {
        "Content-Type": "application/json",
        "X-Actor": this.actor,
      },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const doc = await resp.json().catch(() => ({}));
    if (resp.status === 409) {
      throw new ApiConflict(doc.error ?? "conflict", doc.current_version);
    }
    if (!resp.ok) {
      throw new ApiFailure(resp.status, doc.error ?? `HTTP ${resp.status}`);
    }
    return doc as T;
  }

  queue(state?: string): Promise<QueueResponse> {
    const qs = state ? `?state=${encodeURIComponent(state)}` : "";
    return this.request("GET", `/queue${qs}`);
  }

  item(id: string): Promise<ItemDetail> {
    return this.request("GET", `/items/${encodeURIComponent(id)}`);
  }

  run(id: string, backend?: string): Promise<ItemDetail> {
    return this.request("POST", `/items/${encodeURIComponent(id)}/run`, backend ? { backend } : {});
  }

  refine(id: string, seeds = 2): Promise<ItemDetail> {
    return this.request("POST", `/items/${encodeURIComponent(id)}/refine`, { seeds });
  }

  decide(id: string, decision: Decision, expectVersion: number): Promise<ItemDetail> {
    return this.request("POST", `/items/${encodeURIComponent(id)}/decision`, {
      ...decision,
      expect_version: expectVersion,
    });
  }

  correctOrder(id: string, occluders: string[], expectVersion: number): Promise<ItemDetail> {
    return this.request("POST", `/items/${encodeURIComponent(id)}/order`, {
      occluders,
      expect_version: expectVersion,
    });
  }

  annotate(id: string): Promise<ItemDetail> {
    return this.request("POST", `/items/${encodeURIComponent(id)}/annotate`, {});
  }

  stats(): Promise<Record<string, unknown>> {
    return this.request("GET", "/stats");
  }
}
