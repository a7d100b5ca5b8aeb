/** Wire types mirroring the prediction service's documented payloads. */

export interface Bbox {
  lat_min: number;
  lat_max: number;
  lon_min: number;
  lon_max: number;
}

export interface StationRow {
  station_id: string;
  lat: number;
  lon: number;
  status: string;
  cluster_id: number | null;
}

export interface NeighborRow {
  station_id: string;
  distance_km: number;
  similarity: number;
  weight: number;
}

export interface CandidateQuery {
  lat: number;
  lon: number;
  launch: string;
  horizon: number;
}

export interface PredictionResponse {
  pickups: number[];
  dropoffs: number[];
  intervals: string[];
  neighbor_weights: NeighborRow[];
  cluster_id: number;
  fingerprint: string;
  usage_scale: number[];
  heatmap_summary: { channel_names: string[]; channel_sums: number[] };
  raw: { pickups: number[]; dropoffs: number[] };
}

export interface StationPrediction {
  station_id: string;
  cluster_id: number;
  fingerprint: string;
  intervals: string[];
  predicted_pickups: number[];
  predicted_dropoffs: number[];
  observed_pickups: number[];
  observed_dropoffs: number[];
}
