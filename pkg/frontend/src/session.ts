/** Sequential rating flow: load next -> display -> collect -> submit -> advance.
 *
 * The flow is the single source of truth the view renders from.  Server
 * rejections re-enable the form with an inline message and never advance;
 * network failures raise a retry banner and never drop the collected
 * rating; a submit that is already in flight ignores further submit calls,
 * so one advance never produces two stored ratings.
 */

import {
  AnnotationApi,
  AnnotationItem,
  ServerRejection,
} from "./api.js";

export type FlowPhase = "idle" | "loading" | "rating" | "submitting" | "done";

export interface Draft {
  feasibilityCorrect: boolean | null;
  naturalness: number | null;
}

export interface Progress {
  rated: number;
  total: number;
}

export class AnnotationFlow {
  phase: FlowPhase = "idle";
  item: AnnotationItem | null = null;
  draft: Draft = { feasibilityCorrect: null, naturalness: null };
  progress: Progress = { rated: 0, total: 0 };
  /** Server-side rejection of the last submit, shown inside the form. */
  inlineError: string | null = null;
  /** Network failure message, shown as a retry banner. */
  connectionError: string | null = null;

  private pendingRetry: (() => Promise<void>) | null = null;
  private listeners: Array<() => void> = [];

  constructor(
    private readonly api: AnnotationApi,
    readonly annotator: string,
  ) {
    if (!annotator.trim()) {
      throw new Error("annotator token must be non-empty");
    }
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** True when a retry banner should be visible. */
  get needsRetry(): boolean {
    return this.pendingRetry !== null;
  }

  async start(): Promise<void> {
    if (this.phase !== "idle") return;
    await this.loadNext();
  }

  private async loadNext(): Promise<void> {
    this.phase = "loading";
    this.emit();
    let next;
    try {
      next = await this.api.nextItem(this.annotator);
    } catch (error) {
      this.failConnection(error, () => this.loadNext());
      return;
    }
    this.pendingRetry = null;
    this.connectionError = null;
    this.progress = { rated: next.rated, total: next.total };
    if (next.done || !next.item) {
      this.phase = "done";
      this.item = null;
    } else {
      this.phase = "rating";
      this.item = next.item;
      this.draft = { feasibilityCorrect: null, naturalness: null };
      this.inlineError = null;
    }
    this.emit();
  }

  setFeasibility(value: boolean): void {
    if (this.phase !== "rating") return;
    this.draft.feasibilityCorrect = value;
    this.emit();
  }

  setNaturalness(value: number): void {
    if (this.phase !== "rating") return;
    if (!Number.isInteger(value) || value < 1 || value > 5) return;
    this.draft.naturalness = value;
    this.emit();
  }

  /** Submit stays blocked until both fields are set. */
  canSubmit(): boolean {
    return (
      this.phase === "rating" &&
      this.draft.feasibilityCorrect !== null &&
      this.draft.naturalness !== null
    );
  }

  async submit(): Promise<void> {
    if (!this.canSubmit() || this.item === null) return;
    // a fresh attempt supersedes any banner from an earlier failed one
    this.pendingRetry = null;
    this.connectionError = null;
    const item = this.item;
    const rating = {
      annotator_id: this.annotator,
      image_id: item.image_id,
      feasibility_correct: this.draft.feasibilityCorrect as boolean,
      naturalness: this.draft.naturalness as number,
    };
    this.phase = "submitting"; // set before awaiting: further submits no-op
    this.inlineError = null;
    this.emit();
    let stored;
    try {
      stored = await this.api.submitRating(rating);
    } catch (error) {
      if (error instanceof ServerRejection) {
        this.phase = "rating"; // re-enable the form, keep the draft, no advance
        this.inlineError = error.message;
        this.emit();
        return;
      }
      this.phase = "rating";
      this.failConnection(error, () => this.submit());
      return;
    }
    this.progress = { rated: stored.rated, total: stored.total };
    await this.loadNext();
  }

  /** Re-run the operation a network failure interrupted. */
  async retry(): Promise<void> {
    const pending = this.pendingRetry;
    if (!pending) return;
    this.pendingRetry = null;
    this.connectionError = null;
    await pending();
  }

  private failConnection(error: unknown, again: () => Promise<void>): void {
    this.connectionError =
      error instanceof Error ? error.message : "network request failed";
    this.pendingRetry = again;
    this.emit();
  }
}
