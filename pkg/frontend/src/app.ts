/** DOM wiring for the what-if explorer.
 *
 * Left: the city map with stations (colored by cluster), the draggable
 * candidate marker and neighbor-weight links.  Right: launch controls, the
 * predicted series chart with pinned comparisons, and an existing-station
 * browser showing predictions against observed history.
 */

import { ApiClient, ApiError } from "./api.js";
import { renderChart, SeriesSpec } from "./chart.js";
import { Projection, renderMarker, renderNeighborOverlay,
         renderStations } from "./mapview.js";
import { CandidateRequester } from "./requests.js";
import { CandidateDraft } from "./state.js";
import type { Bbox, StationRow } from "./types.js";

const PIN_COLORS = ["#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b"];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function boot(): Promise<void> {
  const base = (window as unknown as { ATCOR_API?: string }).ATCOR_API ?? "";
  const api = new ApiClient(base);
  const status = el<HTMLElement>("status");

  let stations: StationRow[] = [];
  try {
    const health = await api.health();
    stations = await api.stations();
    status.textContent = `connected: ${health.city}, ${stations.length} stations`;
  } catch (err) {
    status.textContent = `service unreachable: ${String(err)}`;
    return;
  }

  const lats = stations.map((s) => s.lat);
  const lons = stations.map((s) => s.lon);
  const margin = 0.004;
  const bbox: Bbox = {
    lat_min: Math.min(...lats) - margin, lat_max: Math.max(...lats) + margin,
    lon_min: Math.min(...lons) - margin, lon_max: Math.max(...lons) + margin,
  };
  const svg = el<HTMLElement>("map");
  const proj = new Projection(bbox, svg.clientWidth || 620,
                              svg.clientHeight || 520);
  const byId = new Map(stations.map((s) => [s.station_id, s]));

  const launchInput = el<HTMLInputElement>("launch");
  const horizonInput = el<HTMLInputElement>("horizon");
  const draft = new CandidateDraft(
    bbox,
    { lat: (bbox.lat_min + bbox.lat_max) / 2,
      lon: (bbox.lon_min + bbox.lon_max) / 2 },
    launchInput.value);

  const requester = new CandidateRequester(
    (q) => api.candidate(q),
    (resp) => {
      draft.setResult(draft.query(), resp);
      status.textContent =
        `cluster ${resp.cluster_id}, fingerprint ${resp.fingerprint.slice(0, 48)}…`;
    },
    (err) => {
      // 4xx carries the service's reason; timeouts/network errors get a
      // retry affordance
      status.textContent = err instanceof ApiError
        ? `service: ${err.detail}` : `request failed: ${String(err)} `;
      if (!(err instanceof ApiError)) {
        const retry = document.createElement("button");
        retry.textContent = "retry";
        retry.addEventListener("click",
          () => void requester.fireNow(draft.query()));
        status.appendChild(retry);
      }
    });

  let clusterFilter: number | null = null;

  function redrawMap(): void {
    const layers = [
      renderStations(stations, proj, clusterFilter),
      draft.last
        ? renderNeighborOverlay(draft, draft.last.neighbor_weights, byId, proj)
        : "",
      renderMarker(draft, proj),
    ];
    svg.innerHTML = layers.join("");
  }

  function redrawChart(): void {
    const series: SeriesSpec[] = [];
    if (draft.last) {
      series.push({ label: "pick-ups", values: draft.last.pickups,
                    color: "#1f77b4" });
      series.push({ label: "drop-offs", values: draft.last.dropoffs,
                    color: "#d62728", dashed: true });
    }
    draft.pinned.forEach((pin, i) => {
      series.push({ label: `${pin.label} pick-ups`,
                    values: pin.response.pickups,
                    color: PIN_COLORS[i % PIN_COLORS.length] });
    });
    el("chart").innerHTML = series.length
      ? renderChart(series, { yLabel: "trips / interval" })
      : "<p class=\"hint\">drop the marker to request a forecast</p>";
    const rows = draft.last?.neighbor_weights ?? [];
    el("weights").innerHTML = rows.map((w) =>
      `<tr><td>${w.station_id}</td><td>${w.distance_km.toFixed(2)}</td>`
      + `<td>${w.weight.toFixed(3)}</td></tr>`).join("");
  }

  draft.subscribe(() => { redrawMap(); redrawChart(); });

  // marker drag: clamped moves, one debounced request per settle
  let dragging = false;
  svg.addEventListener("pointerdown", (ev) => {
    dragging = true;
    svg.setPointerCapture(ev.pointerId);
  });
  svg.addEventListener("pointermove", (ev) => {
    if (!dragging) return;
    const rect = svg.getBoundingClientRect();
    const pos = proj.toLatLon(ev.clientX - rect.left, ev.clientY - rect.top);
    requester.request(draft.moveMarker(pos.lat, pos.lon));
  });
  svg.addEventListener("pointerup", (ev) => {
    dragging = false;
    const rect = svg.getBoundingClientRect();
    const pos = proj.toLatLon(ev.clientX - rect.left, ev.clientY - rect.top);
    requester.request(draft.moveMarker(pos.lat, pos.lon));
  });

  el<HTMLButtonElement>("pin").addEventListener("click", () => draft.pin());
  launchInput.addEventListener("change", () => {
    draft.launch = launchInput.value;
    void requester.fireNow(draft.query());
  });
  horizonInput.addEventListener("change", () => {
    draft.horizon = Math.max(1, Number(horizonInput.value) || 24);
    void requester.fireNow(draft.query());
  });

  // existing-station browser
  const select = el<HTMLSelectElement>("station-select");
  const filterSelect = el<HTMLSelectElement>("cluster-filter");
  const clusterIds = [...new Set(stations.map((s) => s.cluster_id)
    .filter((c): c is number => c !== null))].sort((a, b) => a - b);
  filterSelect.innerHTML = `<option value="">all clusters</option>`
    + clusterIds.map((c) => `<option value="${c}">cluster ${c}</option>`).join("");

  function fillStationSelect(): void {
    select.innerHTML = stations
      .filter((s) => clusterFilter === null || s.cluster_id === clusterFilter)
      .map((s) => `<option value="${s.station_id}">${s.station_id} `
        + `(${s.status})</option>`).join("");
  }
  fillStationSelect();

  filterSelect.addEventListener("change", () => {
    clusterFilter = filterSelect.value === "" ? null : Number(filterSelect.value);
    fillStationSelect();
    redrawMap();
  });

  el<HTMLButtonElement>("browse").addEventListener("click", async () => {
    const sid = select.value;
    if (!sid) return;
    try {
      const p = await api.stationPrediction(
        sid, el<HTMLInputElement>("hist-from").value,
        el<HTMLInputElement>("hist-to").value);
      el("history-chart").innerHTML = renderChart([
        { label: "observed pick-ups", values: p.observed_pickups,
          color: "#444" },
        { label: "predicted pick-ups", values: p.predicted_pickups,
          color: "#1f77b4", dashed: true },
      ], { yLabel: "pick-ups / interval" });
      el("history-fingerprint").textContent =
        `fingerprint: ${p.fingerprint}`;
    } catch (err) {
      el("history-chart").textContent = err instanceof ApiError
        ? `service: ${err.detail}` : String(err);
    }
  });

  redrawMap();
  redrawChart();
}

void boot();
