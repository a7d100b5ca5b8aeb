/** Session state for the what-if loop. */

import type { Bbox, CandidateQuery, PredictionResponse } from "./types.js";

export interface PinnedCandidate {
  label: string;
  query: CandidateQuery;
  response: PredictionResponse;
}

export class CandidateDraft {
  lat: number;
  lon: number;
  launch: string;
  horizon = 24;
  last: PredictionResponse | null = null;
  lastQuery: CandidateQuery | null = null;
  private readonly pins: PinnedCandidate[] = [];
  private listeners: (() => void)[] = [];

  constructor(readonly bbox: Bbox, start: { lat: number; lon: number },
              launch: string) {
    const p = this.clamp(start.lat, start.lon);
    this.lat = p.lat;
    this.lon = p.lon;
    this.launch = launch;
  }

  /** Marker positions never leave the city bounds; drags are clamped. */
  clamp(lat: number, lon: number): { lat: number; lon: number } {
    return {
      lat: Math.min(this.bbox.lat_max, Math.max(this.bbox.lat_min, lat)),
      lon: Math.min(this.bbox.lon_max, Math.max(this.bbox.lon_min, lon)),
    };
  }

  moveMarker(lat: number, lon: number): CandidateQuery {
    const p = this.clamp(lat, lon);
    this.lat = p.lat;
    this.lon = p.lon;
    this.notify();
    return this.query();
  }

  query(): CandidateQuery {
    return { lat: this.lat, lon: this.lon, launch: this.launch,
             horizon: this.horizon };
  }

  setResult(query: CandidateQuery, response: PredictionResponse): void {
    this.lastQuery = query;
    this.last = response;
    this.notify();
  }

  /** Pins are append-only within a session; comparisons never vanish. */
  pin(): PinnedCandidate | null {
    if (!this.last || !this.lastQuery) return null;
    const entry: PinnedCandidate = {
      label: `#${this.pins.length + 1} (${this.lastQuery.lat.toFixed(4)}, `
        + `${this.lastQuery.lon.toFixed(4)})`,
      query: this.lastQuery,
      response: this.last,
    };
    this.pins.push(entry);
    this.notify();
    return entry;
  }

  get pinned(): readonly PinnedCandidate[] {
    return this.pins;
  }

  subscribe(fn: () => void): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }
}
