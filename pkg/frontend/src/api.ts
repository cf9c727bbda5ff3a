/**
 * Typed client for the suggestion service's JSON API.
 *
 * The fetch implementation is injected so tests can run against an in-memory
 * mock; the browser entry point passes window.fetch. Only the narrow response
 * surface the client actually uses is typed, which keeps the mock honest and
 * small.
 */

export interface Suggestion {
  code: string;
  term: string;
  probability: number;
  above_threshold: boolean;
}

export interface RecordRow {
  record_id: string;
  codes: string[];
  finalized: boolean;
}

export interface SearchResult {
  code: string;
  term: string;
}

export type DecisionAction = "accept" | "reject" | "augment" | "finalize";

export interface DecisionBody {
  record_id: string;
  action: DecisionAction;
  code: string | null;
  event_id: number;
  actor: string;
}

/** "stored" on first write, "duplicate" when the same event is replayed. */
export type DecisionStatus = "stored" | "duplicate";

export interface HealthInfo {
  status: string;
  model_loaded: boolean;
  terminology_loaded: boolean;
  n_events: number;
}

export interface HttpResponse {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<HttpResponse>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/** A decision hit an already-finalized record (or reused an id differently). */
export class ConflictError extends ApiError {
  constructor(message: string) {
    super(409, message);
    this.name = "ConflictError";
  }
}

async function errorDetail(response: HttpResponse): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `request failed with status ${response.status}`;
}

export class ServiceClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike,
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async get(path: string): Promise<unknown> {
    const response = await this.fetchFn(this.url(path));
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response.json();
  }

  async health(): Promise<HealthInfo> {
    return (await this.get("/health")) as HealthInfo;
  }

  async suggest(
    text: string,
    topK?: number,
    threshold?: number,
  ): Promise<Suggestion[]> {
    const body: Record<string, unknown> = { text };
    if (topK !== undefined) body.top_k = topK;
    if (threshold !== undefined) body.threshold = threshold;
    const response = await this.fetchFn(this.url("/suggest"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    const payload = (await response.json()) as { suggestions: Suggestion[] };
    return payload.suggestions;
  }

  async pendingRecords(): Promise<RecordRow[]> {
    const payload = (await this.get("/records?status=pending")) as {
      records: RecordRow[];
    };
    return payload.records;
  }

  /**
   * Post one decision event. Resolves for both "stored" and "duplicate"
   * (a duplicate means an earlier attempt already landed, which is exactly
   * what a retry wants to hear). Rejects with ConflictError on 409.
   */
  async postDecision(body: DecisionBody): Promise<DecisionStatus> {
    const response = await this.fetchFn(this.url("/decisions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (response.status === 409) {
      throw new ConflictError(await errorDetail(response));
    }
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    const payload = (await response.json()) as { status: DecisionStatus };
    return payload.status;
  }

  async search(query: string, limit = 10): Promise<SearchResult[]> {
    const q = encodeURIComponent(query);
    const payload = (await this.get(`/search?q=${q}&limit=${limit}`)) as {
      results: SearchResult[];
    };
    return payload.results;
  }
}
