/**
 * Review-session state machine, UI-framework free.
 *
 * Holds the pending queue, the record under review, its suggestions in
 * service order, and the staged decisions. Submission on finalize is
 * serialized and retry-safe: every staged event gets its id on the first
 * submission attempt and keeps it forever, so a retry after a mid-sequence
 * network failure re-sends the same ids and the service deduplicates them.
 */

import {
  ConflictError,
  type DecisionAction,
  type RecordRow,
  type SearchResult,
  type ServiceClient,
  type Suggestion,
} from "./api.js";

export type StagedAction = Exclude<DecisionAction, "finalize">;

export interface StagedDecision {
  action: StagedAction;
  code: string;
  /** Assigned on the first submission attempt, stable across retries. */
  eventId: number | null;
}

export interface SessionStats {
  recordsFinalized: number;
  suggestionsSeen: number;
  suggestionsAccepted: number;
}

export type FinalizeOutcome = "finalized" | "conflict";

const EMPTY_SECTIONS = { diagnosis: "", assessment: "" };

export class ReviewSession {
  pending: RecordRow[] = [];
  /** Set when the service was unreachable; existing data is never dropped. */
  banner: string | null = null;
  currentRecordId: string | null = null;
  sections: { diagnosis: string; assessment: string } = { ...EMPTY_SECTIONS };
  suggestions: Suggestion[] = [];
  staged: StagedDecision[] = [];
  stats: SessionStats = {
    recordsFinalized: 0,
    suggestionsSeen: 0,
    suggestionsAccepted: 0,
  };

  private searchedCodes = new Set<string>();
  private finalizeEventId: number | null = null;
  private counter = 0;
  private readonly idBase: number;

  constructor(
    private readonly client: ServiceClient,
    private readonly actor: string,
    sessionEpochMillis: number = Date.now(),
  ) {
    // ids are (session epoch millis, per-session counter) packed into one
    // number, so every session starts above all earlier sessions' ids and
    // stays strictly increasing within itself
    this.idBase = sessionEpochMillis * 1000;
  }

  nextEventId(): number {
    this.counter += 1;
    return this.idBase + this.counter;
  }

  /** Refresh the pending queue; on failure keep current data, raise banner. */
  async loadQueue(): Promise<void> {
    try {
      this.pending = await this.client.pendingRecords();
      this.banner = null;
    } catch {
      this.banner = "service unreachable: queue may be stale, retry";
    }
  }

  openRecord(recordId: string): void {
    if (!this.pending.some((r) => r.record_id === recordId)) {
      throw new Error(`record ${recordId} is not in the pending queue`);
    }
    this.currentRecordId = recordId;
    this.sections = { ...EMPTY_SECTIONS };
    this.suggestions = [];
    this.staged = [];
    this.searchedCodes.clear();
    this.finalizeEventId = null;
  }

  setSection(name: "diagnosis" | "assessment", text: string): void {
    this.sections[name] = text;
  }

  /** Model input: diagnosis then assessment, single-space joined. */
  builtInput(): string {
    return [this.sections.diagnosis, this.sections.assessment]
      .map((t) => t.trim())
      .filter((t) => t.length > 0)
      .join(" ");
  }

  /** Fetch suggestions for the current record; service order is kept as-is. */
  async fetchSuggestions(topK?: number, threshold?: number): Promise<void> {
    if (this.currentRecordId === null) {
      throw new Error("no record is open");
    }
    this.suggestions = await this.client.suggest(
      this.builtInput(),
      topK,
      threshold,
    );
  }

  private displayedCodes(): Set<string> {
    return new Set(this.suggestions.map((s) => s.code));
  }

  private stagedIndex(code: string): number {
    return this.staged.findIndex((d) => d.code === code);
  }

  /**
   * Toggle an accept/reject on a displayed suggestion. Clicking the action
   * already staged for the code unstages it; a different action replaces it
   * (the replacement goes to the end, preserving decision chronology).
   */
  toggleDecision(code: string, action: "accept" | "reject"): void {
    if (!this.displayedCodes().has(code)) {
      throw new Error(`code ${code} is not among the displayed suggestions`);
    }
    const at = this.stagedIndex(code);
    if (at >= 0) {
      const existing = this.staged[at]!;
      this.staged.splice(at, 1);
      if (existing.action === action) return; // plain toggle-off
    }
    this.staged.push({ action, code, eventId: null });
  }

  /** Stage an augment for a code found through terminology search. */
  stageAugment(result: SearchResult): void {
    this.searchedCodes.add(result.code);
    if (this.stagedIndex(result.code) >= 0) {
      return; // already staged one way or another; leave it alone
    }
    this.staged.push({ action: "augment", code: result.code, eventId: null });
  }

  unstage(code: string): void {
    const at = this.stagedIndex(code);
    if (at >= 0) this.staged.splice(at, 1);
  }

  /** Finalizing with an empty stage requires the explicit confirmation. */
  canFinalize(emptyConfirmed = false): boolean {
    return this.currentRecordId !== null &&
      (this.staged.length > 0 || emptyConfirmed);
  }

  /**
   * Post every staged event in staged order, then the finalize event.
   *
   * On a network failure the staged list (ids included) survives untouched
   * and the call rejects, so the next finalize() resumes with the same ids.
   * On a conflict the record is already finalized server-side: it is dropped
   * from the queue and "conflict" is returned.
   */
  async finalize(emptyConfirmed = false): Promise<FinalizeOutcome> {
    const recordId = this.currentRecordId;
    if (recordId === null) {
      throw new Error("no record is open");
    }
    if (!this.canFinalize(emptyConfirmed)) {
      throw new Error("stage a decision or confirm finalizing with none");
    }
    try {
      for (const decision of this.staged) {
        if (decision.eventId === null) {
          decision.eventId = this.nextEventId();
        }
        await this.client.postDecision({
          record_id: recordId,
          action: decision.action,
          code: decision.code,
          event_id: decision.eventId,
          actor: this.actor,
        });
      }
      if (this.finalizeEventId === null) {
        this.finalizeEventId = this.nextEventId();
      }
      await this.client.postDecision({
        record_id: recordId,
        action: "finalize",
        code: null,
        event_id: this.finalizeEventId,
        actor: this.actor,
      });
    } catch (error) {
      if (error instanceof ConflictError) {
        // someone (or an earlier retry) already finalized it: treat as done
        this.closeCurrent(recordId, false);
        return "conflict";
      }
      this.banner = "submit failed: staged decisions kept, retry finalize";
      throw error;
    }
    this.closeCurrent(recordId, true);
    return "finalized";
  }

  acceptanceRate(): number | null {
    if (this.stats.suggestionsSeen === 0) return null;
    return this.stats.suggestionsAccepted / this.stats.suggestionsSeen;
  }

  private closeCurrent(recordId: string, countStats: boolean): void {
    if (countStats) {
      this.stats.recordsFinalized += 1;
      this.stats.suggestionsSeen += this.suggestions.length;
      this.stats.suggestionsAccepted += this.staged.filter(
        (d) => d.action === "accept",
      ).length;
    }
    this.pending = this.pending.filter((r) => r.record_id !== recordId);
    this.currentRecordId = null;
    this.sections = { ...EMPTY_SECTIONS };
    this.suggestions = [];
    this.staged = [];
    this.searchedCodes.clear();
    this.finalizeEventId = null;
    this.banner = null;
  }
}
