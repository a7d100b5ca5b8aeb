/** Mock server fixture: a fetch-like function over canned payloads. */

import type { FetchLike } from "../src/api.js";
import type { PredictionResponse, StationRow } from "../src/types.js";

export function makePrediction(horizon = 24, level = 5): PredictionResponse {
  const pickups = Array.from({ length: horizon },
    (_, i) => Math.round(100 * (level + Math.sin(i / 3) * 2)) / 100);
  const dropoffs = pickups.map((v) => Math.round(100 * (v * 0.9)) / 100);
  return {
    pickups,
    dropoffs,
    intervals: Array.from({ length: horizon },
      (_, i) => `2019-05-14T${String(i % 24).padStart(2, "0")}:00:00`),
    neighbor_weights: [
      { station_id: "S001", distance_km: 0.4, similarity: 2.5, weight: 0.7 },
      { station_id: "S002", distance_km: 0.8, similarity: 1.25, weight: 0.3 },
    ],
    cluster_id: 1,
    fingerprint: "{\"d\": 16, \"kind\": \"atcor\"}",
    usage_scale: [12, 11],
    heatmap_summary: { channel_names: ["pickups"], channel_sums: [3.5] },
    raw: { pickups, dropoffs },
  };
}

export const FIXTURE_STATIONS: StationRow[] = [
  { station_id: "S001", lat: 40.75, lon: -73.99, status: "active_existing",
    cluster_id: 0 },
  { station_id: "S002", lat: 40.757, lon: -73.985, status: "active_existing",
    cluster_id: 1 },
  { station_id: "S003", lat: 40.744, lon: -73.996, status: "new",
    cluster_id: 1 },
];

export interface MockServer {
  fetchLike: FetchLike;
  candidatePosts: { url: string; body: unknown }[];
  respondWith: (r: PredictionResponse) => void;
  /** When set, candidate responses wait until released (ordering tests). */
  hold: boolean;
  release: () => void;
}

export function mockServer(): MockServer {
  let canned = makePrediction();
  const pending: (() => void)[] = [];
  const server: MockServer = {
    candidatePosts: [],
    hold: false,
    respondWith: (r) => { canned = r; },
    release: () => {
      while (pending.length) pending.shift()!();
    },
    fetchLike: async (url, init) => {
      const respond = (body: unknown, status = 200) =>
        new Response(JSON.stringify(body), {
          status, headers: { "content-type": "application/json" },
        });
      if (url.includes("/candidates")) {
        server.candidatePosts.push({
          url, body: JSON.parse(String(init?.body ?? "null")),
        });
        const mine = canned;
        if (server.hold) {
          await new Promise<void>((resolve) => pending.push(resolve));
        }
        return respond(mine);
      }
      if (url.includes("/stations?")) {
        return respond({ total: FIXTURE_STATIONS.length, offset: 0,
                         limit: 500, items: FIXTURE_STATIONS });
      }
      if (url.includes("/health")) {
        return respond({ status: "ok", city: "fixture" });
      }
      return respond({ detail: `no route: ${url}` }, 404);
    },
  };
  return server;
}
