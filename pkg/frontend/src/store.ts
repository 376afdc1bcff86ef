// Console state machine. It owns every pane's data and talks to the service
// through a DoseService; the DOM layer only renders snapshots and forwards
// events. The service keeps every session fact, so reloading a page and
// replaying GET endpoints rebuilds the same charts.

import type { CaseInfo, CurveSeries, DoseService, SessionState } from "./api.js";
import { buildCharts, type ChartSlot } from "./curves.js";

export interface HistoryRow {
  instruction: string;
  mse: number | null;
  status: "ok" | "failed";
  detail: string;
  at: string;
}

function describeError(exc: unknown): string {
  return exc instanceof Error ? exc.message : String(exc);
}

export class ConsoleStore {
  private caseList: CaseInfo[] = [];
  private bannerText: string | null = null;
  private session: SessionState | null = null;
  private previousCurves: CurveSeries[] | null = null;
  private rows: HistoryRow[] = [];
  private inFlight = false;
  private listeners: Array<() => void> = [];

  constructor(
    private readonly client: DoseService,
    private readonly now: () => string = () => new Date().toISOString(),
  ) {}

  subscribe(listener: () => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((fn) => fn !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  get cases(): CaseInfo[] {
    return this.caseList;
  }

  get banner(): string | null {
    return this.bannerText;
  }

  get busy(): boolean {
    return this.inFlight;
  }

  get sessionId(): string | null {
    return this.session?.session_id ?? null;
  }

  get caseId(): string | null {
    return this.session?.case_id ?? null;
  }

  get promptText(): string {
    return this.session?.prompt_text ?? "";
  }

  get prescriptionDose(): number | null {
    return this.session?.prescription_dose ?? null;
  }

  get mse(): number | null {
    return this.session?.mse ?? null;
  }

  get warnings(): string[] {
    return this.session?.warnings ?? [];
  }

  get history(): HistoryRow[] {
    return this.rows;
  }

  /** Raw curves exactly as the service last sent them. */
  get currentSeries(): CurveSeries[] | null {
    return this.session?.curves ?? null;
  }

  charts(): ChartSlot[] {
    if (this.session === null) return [];
    return buildCharts(this.session.curves, this.previousCurves);
  }

  async loadCases(): Promise<void> {
    try {
      this.caseList = (await this.client.listCases()).cases;
      this.bannerText = null;
    } catch (exc) {
      this.bannerText = `case list unavailable: ${describeError(exc)}`;
    }
    this.emit();
  }

  async openCase(caseId: string): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    this.emit();
    try {
      const session = await this.client.createSession(caseId);
      this.session = session;
      this.previousCurves = null;
      this.rows = [this.row(session.prompt_text, session)];
      this.bannerText = null;
    } catch (exc) {
      this.bannerText = `could not open case ${caseId}: ${describeError(exc)}`;
    }
    this.inFlight = false;
    this.emit();
  }

  /**
   * Send one instruction. Requests are serialized: while one is in flight
   * further submissions are dropped, so a double-click posts once. On failure
   * the history records the attempt and the curves stay untouched.
   */
  async submitInstruction(text: string): Promise<void> {
    if (this.session === null || this.inFlight) return;
    this.inFlight = true;
    this.emit();
    try {
      const updated = await this.client.instruct(this.session.session_id, text);
      this.previousCurves = this.session.curves;
      this.session = updated;
      this.rows = [...this.rows, this.row(text, updated)];
    } catch (exc) {
      this.rows = [
        ...this.rows,
        { instruction: text, mse: null, status: "failed", detail: describeError(exc), at: this.now() },
      ];
    }
    this.inFlight = false;
    this.emit();
  }

  /** Rebuild every pane for an existing session id from GET endpoints only. */
  async restore(sessionId: string): Promise<void> {
    try {
      const cdvh = await this.client.getCdvh(sessionId);
      const history = await this.client.getHistory(sessionId);
      const latest = history.entries[history.entries.length - 1];
      this.session = {
        session_id: cdvh.session_id,
        case_id: cdvh.case_id,
        prompt_text: cdvh.prompt_text,
        prescription_dose: cdvh.prescription_dose,
        mse: latest?.mse ?? null,
        warnings: latest?.warnings ?? [],
        curves: cdvh.curves,
      };
      this.previousCurves = null;
      this.rows = history.entries.map((entry) => ({
        instruction: entry.instruction,
        mse: entry.mse,
        status: "ok" as const,
        detail: "",
        at: this.now(),
      }));
      this.bannerText = null;
    } catch (exc) {
      this.bannerText = `could not restore session ${sessionId}: ${describeError(exc)}`;
    }
    this.emit();
  }

  private row(instruction: string, session: SessionState): HistoryRow {
    return {
      instruction,
      mse: session.mse,
      status: "ok",
      detail: session.warnings.join("; "),
      at: this.now(),
    };
  }
}
