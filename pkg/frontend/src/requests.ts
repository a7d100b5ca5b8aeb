/** Debounced, sequence-numbered candidate requests.
 *
 * Drag streams collapse into one request per settle (300 ms default), and a
 * response only lands if no newer request has been fired since: each fired
 * request takes a sequence number and stale completions are dropped, so the
 * draft always reflects the latest marker position even when the service
 * answers out of order.
 */

import type { CandidateQuery, PredictionResponse } from "./types.js";

export class CandidateRequester {
  private seq = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;
  sent = 0; // fired requests, observable for tests and the status line

  constructor(
    private readonly send: (q: CandidateQuery) => Promise<PredictionResponse>,
    private readonly onResult: (r: PredictionResponse, seq: number) => void,
    private readonly onError: (e: unknown) => void = () => undefined,
    readonly debounceMs: number = 300,
  ) {}

  /** Schedule a request; earlier pending schedules are superseded. */
  request(query: CandidateQuery): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.fire(query);
    }, this.debounceMs);
  }

  /** Bypass the debounce (explicit form submits). */
  fireNow(query: CandidateQuery): Promise<void> {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    return this.fire(query);
  }

  private async fire(query: CandidateQuery): Promise<void> {
    const seq = ++this.seq;
    this.sent += 1;
    try {
      const result = await this.send(query);
      if (seq === this.seq) this.onResult(result, seq);
    } catch (err) {
      if (seq === this.seq) this.onError(err);
    }
  }
}
