/** Thin typed client over the service endpoints.
 *
 * The fetch function is injectable so tests can run against a mock server
 * fixture; the client never transforms numbers, every value shown in the UI
 * comes verbatim from a response payload.
 */

import type {
  CandidateQuery, PredictionResponse, StationPrediction, StationRow,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`service error ${status}: ${detail}`);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      detail = typeof body.detail === "string"
        ? body.detail : JSON.stringify(body.detail ?? body);
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json() as Promise<T>;
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  async health(): Promise<{ status: string; city: string }> {
    return asJson(await this.fetchFn(`${this.base}/health`));
  }

  /** All stations, walking the paginated listing to the end. */
  async stations(): Promise<StationRow[]> {
    const out: StationRow[] = [];
    let offset = 0;
    for (;;) {
      const page = await asJson<{ total: number; items: StationRow[] }>(
        await this.fetchFn(`${this.base}/stations?offset=${offset}&limit=500`));
      out.push(...page.items);
      offset += page.items.length;
      if (offset >= page.total || page.items.length === 0) break;
    }
    return out;
  }

  async clusters(): Promise<{ k: number; clusters: { cluster_id: number }[] }> {
    return asJson(await this.fetchFn(`${this.base}/clusters`));
  }

  async stationPrediction(
    id: string, from: string, to: string,
  ): Promise<StationPrediction> {
    const q = `from=${encodeURIComponent(from)}&to=${encodeURIComponent(to)}`;
    return asJson(await this.fetchFn(
      `${this.base}/stations/${encodeURIComponent(id)}/prediction?${q}`));
  }

  async candidate(query: CandidateQuery): Promise<PredictionResponse> {
    return asJson(await this.fetchFn(`${this.base}/candidates`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(query),
    }));
  }
}
