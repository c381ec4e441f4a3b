// Typed client for the session service HTTP API.

export interface BeliefEntry {
  point: number[];
  mean: number;
  var: number;
  rank: number;
}

export interface PendingView {
  session_id: string;
  step: number;
  budget: number;
  pair_indices: [number, number];
  x1: number[];
  x2: number[];
}

export interface SessionState {
  session_id: string;
  dimension: number;
  budget: number;
  step: number;
  status: "active" | "exhausted" | "closed";
  history_x1: number[][];
  history_x2: number[][];
  history_labels: number[];
  belief: BeliefEntry[];
  pending_view?: PendingView;
}

export interface SessionSummary {
  session_id: string;
  status: string;
  step: number;
  budget: number;
}

export interface ServiceError {
  code: string;
  message: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  let resp: Response;
  try {
    resp = await fetch(url, init);
  } catch (err) {
    throw new ApiError(0, "unreachable", `service unreachable: ${err}`);
  }
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    const e: ServiceError = body?.error ?? {
      code: "unknown",
      message: `HTTP ${resp.status}`,
    };
    throw new ApiError(resp.status, e.code, e.message);
  }
  return body as T;
}

export class SessionApi {
  constructor(public baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  createSession(budget: number, querySize: number, seed?: number) {
    return request<SessionState>(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ budget, query_size: querySize, seed }),
    });
  }

  proposePair(sessionId: string) {
    return request<PendingView>(
      `${this.baseUrl}/sessions/${sessionId}/propose`,
      { method: "POST" },
    );
  }

  submitPreference(sessionId: string, label: 0 | 1) {
    return request<SessionState>(
      `${this.baseUrl}/sessions/${sessionId}/preference`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ label }),
      },
    );
  }

  sessionState(sessionId: string) {
    return request<SessionState>(`${this.baseUrl}/sessions/${sessionId}`);
  }

  listSessions() {
    return request<SessionSummary[]>(`${this.baseUrl}/sessions`);
  }
}
