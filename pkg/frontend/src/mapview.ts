/** SVG map: station dots, the draggable candidate marker and neighbor-weight
 * overlays under a plain equirectangular projection of the city bbox. */

import type { Bbox, NeighborRow, StationRow } from "./types.js";

export class Projection {
  constructor(readonly bbox: Bbox, readonly width: number,
              readonly height: number, readonly pad = 16) {}

  toXY(lat: number, lon: number): { x: number; y: number } {
    const fx = (lon - this.bbox.lon_min) / (this.bbox.lon_max - this.bbox.lon_min);
    const fy = (lat - this.bbox.lat_min) / (this.bbox.lat_max - this.bbox.lat_min);
    return {
      x: this.pad + fx * (this.width - 2 * this.pad),
      y: this.height - this.pad - fy * (this.height - 2 * this.pad),
    };
  }

  toLatLon(x: number, y: number): { lat: number; lon: number } {
    const fx = (x - this.pad) / (this.width - 2 * this.pad);
    const fy = (this.height - this.pad - y) / (this.height - 2 * this.pad);
    return {
      lat: this.bbox.lat_min + fy * (this.bbox.lat_max - this.bbox.lat_min),
      lon: this.bbox.lon_min + fx * (this.bbox.lon_max - this.bbox.lon_min),
    };
  }
}

const CLUSTER_COLORS = ["#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
                        "#17becf", "#8c564b", "#e377c2", "#7f7f7f"];

export function stationColor(row: StationRow): string {
  if (row.status === "new") return "#d62728";
  if (row.cluster_id === null || row.cluster_id === undefined) return "#bbb";
  return CLUSTER_COLORS[row.cluster_id % CLUSTER_COLORS.length];
}

export function renderStations(stations: StationRow[], proj: Projection,
                               clusterFilter: number | null): string {
  const parts: string[] = [];
  for (const s of stations) {
    if (clusterFilter !== null && s.cluster_id !== clusterFilter) continue;
    const { x, y } = proj.toXY(s.lat, s.lon);
    parts.push(`<circle cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" r="4" `
      + `fill="${stationColor(s)}" class="station" `
      + `data-station="${s.station_id}"><title>${s.station_id} `
      + `(${s.status})</title></circle>`);
  }
  return parts.join("");
}

/** Lines from the candidate to each neighbor, width scaled by weight. */
export function renderNeighborOverlay(
  candidate: { lat: number; lon: number }, weights: NeighborRow[],
  stations: Map<string, StationRow>, proj: Projection,
): string {
  const from = proj.toXY(candidate.lat, candidate.lon);
  const parts: string[] = [];
  for (const w of weights) {
    const st = stations.get(w.station_id);
    if (!st) continue;
    const to = proj.toXY(st.lat, st.lon);
    const width = 0.8 + 6.0 * w.weight;
    parts.push(`<line x1="${from.x.toFixed(1)}" y1="${from.y.toFixed(1)}" `
      + `x2="${to.x.toFixed(1)}" y2="${to.y.toFixed(1)}" `
      + `stroke="#555" stroke-opacity="0.55" `
      + `stroke-width="${width.toFixed(2)}" class="neighbor-link" `
      + `data-station="${w.station_id}" data-weight="${w.weight}">`
      + `<title>${w.station_id}: w=${w.weight.toFixed(3)} `
      + `(${w.distance_km.toFixed(2)} km)</title></line>`);
  }
  return parts.join("");
}

export function renderMarker(candidate: { lat: number; lon: number },
                             proj: Projection): string {
  const { x, y } = proj.toXY(candidate.lat, candidate.lon);
  return `<g class="candidate-marker" transform="translate(${x.toFixed(1)} `
    + `${y.toFixed(1)})"><circle r="8" fill="#d62728" fill-opacity="0.35" `
    + `stroke="#d62728" stroke-width="2"/>`
    + `<circle r="2.5" fill="#d62728"/></g>`;
}
