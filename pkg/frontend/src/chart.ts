/** SVG chart rendering as pure string builders.
 *
 * No DOM dependency, so the series-rendering contract is testable headless:
 * every data point becomes one circle carrying its payload value verbatim in
 * a data-value attribute (the UI displays numbers, it never recomputes
 * them).
 */

export interface SeriesSpec {
  label: string;
  values: number[];
  color: string;
  dashed?: boolean;
}

export interface ChartOptions {
  width?: number;
  height?: number;
  padding?: number;
  yLabel?: string;
}

function esc(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function scalePoints(
  values: number[], width: number, height: number, padding: number,
  yMax: number,
): { x: number; y: number }[] {
  const innerW = width - 2 * padding;
  const innerH = height - 2 * padding;
  const step = values.length > 1 ? innerW / (values.length - 1) : 0;
  return values.map((v, i) => ({
    x: padding + i * step,
    y: padding + innerH * (1 - (yMax > 0 ? v / yMax : 0)),
  }));
}

export function seriesMax(series: SeriesSpec[]): number {
  let top = 0;
  for (const s of series) for (const v of s.values) top = Math.max(top, v);
  return top > 0 ? top : 1;
}

export function renderChart(series: SeriesSpec[],
                            opts: ChartOptions = {}): string {
  const width = opts.width ?? 640;
  const height = opts.height ?? 220;
  const padding = opts.padding ?? 28;
  const yMax = seriesMax(series);
  const parts: string[] = [];
  parts.push(`<svg xmlns="http://www.w3.org/2000/svg" width="${width}" `
    + `height="${height}" viewBox="0 0 ${width} ${height}" class="chart">`);
  parts.push(`<line x1="${padding}" y1="${height - padding}" `
    + `x2="${width - padding}" y2="${height - padding}" class="axis"/>`);
  parts.push(`<line x1="${padding}" y1="${padding}" x2="${padding}" `
    + `y2="${height - padding}" class="axis"/>`);
  parts.push(`<text x="4" y="${padding - 8}" class="axis-label">`
    + `${esc(opts.yLabel ?? "")} (max ${yMax.toFixed(2)})</text>`);

  series.forEach((s, si) => {
    const pts = scalePoints(s.values, width, height, padding, yMax);
    const path = pts.map((p, i) => `${i ? "L" : "M"}${p.x.toFixed(1)} `
      + `${p.y.toFixed(1)}`).join(" ");
    const dash = s.dashed ? ` stroke-dasharray="5 3"` : "";
    parts.push(`<path d="${path}" fill="none" stroke="${s.color}"`
      + `${dash} stroke-width="1.6"/>`);
    pts.forEach((p, i) => {
      parts.push(`<circle cx="${p.x.toFixed(1)}" cy="${p.y.toFixed(1)}" `
        + `r="2.4" fill="${s.color}" data-series="${esc(s.label)}" `
        + `data-index="${i}" data-value="${s.values[i]}"/>`);
    });
    parts.push(`<text x="${padding + 6}" y="${padding + 14 + 14 * si}" `
      + `fill="${s.color}" class="legend">${esc(s.label)}</text>`);
  });
  parts.push("</svg>");
  return parts.join("");
}
