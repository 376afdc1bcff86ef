// Typed client for the dose prediction service. Field names mirror the
// service payloads exactly; nothing is renamed or reshaped on the way in.

export interface CaseInfo {
  case_id: string;
  image_shape: number[];
  dose_shape: number[];
  prescription_dose: number;
  has_ground_truth: boolean;
  structures: string[];
}

export interface CurveSeries {
  structure: string;
  slot: number;
  edges_gy: number[];
  predicted: number[];
  truth: number[] | null;
}

export interface SessionState {
  session_id: string;
  case_id: string;
  prompt_text: string;
  prescription_dose: number;
  mse: number | null;
  warnings: string[];
  curves: CurveSeries[];
}

export interface CdvhPayload {
  session_id: string;
  case_id: string;
  prompt_text: string;
  prescription_dose: number;
  curves: CurveSeries[];
}

export interface HistoryEntry {
  instruction: string;
  mse: number | null;
  warnings: string[];
}

export interface HistoryPayload {
  session_id: string;
  case_id: string;
  entries: HistoryEntry[];
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

/** The service surface the console consumes; ServiceClient is the real one. */
export interface DoseService {
  listCases(): Promise<{ cases: CaseInfo[] }>;
  createSession(caseId: string): Promise<SessionState>;
  getCdvh(sessionId: string): Promise<CdvhPayload>;
  instruct(sessionId: string, text: string): Promise<SessionState>;
  getHistory(sessionId: string): Promise<HistoryPayload>;
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

function errorMessage(payload: unknown, status: number): string {
  if (payload !== null && typeof payload === "object" && "error" in payload) {
    const detail = (payload as { error: unknown }).error;
    if (typeof detail === "string") return detail;
  }
  return `request failed (${status})`;
}

export class ServiceClient implements DoseService {
  // fetch must be called unbound through a wrapper: a bare reference loses
  // its window binding in browsers.
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    const payload: unknown = await response.json().catch(() => null);
    if (!response.ok) {
      throw new ApiError(response.status, errorMessage(payload, response.status));
    }
    return payload as T;
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.request(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  listCases(): Promise<{ cases: CaseInfo[] }> {
    return this.request("/cases");
  }

  createSession(caseId: string): Promise<SessionState> {
    return this.post("/sessions", { case_id: caseId });
  }

  getCdvh(sessionId: string): Promise<CdvhPayload> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}/cdvh`);
  }

  instruct(sessionId: string, text: string): Promise<SessionState> {
    return this.post(`/sessions/${encodeURIComponent(sessionId)}/instruct`, { text });
  }

  getHistory(sessionId: string): Promise<HistoryPayload> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}/history`);
  }
}
