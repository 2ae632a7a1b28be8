/** Dependency-free SVG line chart for the CI-width trajectory. */

export interface Point {
  x: number;
  y: number;
}

export interface ChartOptions {
  width?: number;
  height?: number;
  xLabel?: string;
  yLabel?: string;
}

const PAD = { left: 48, right: 16, top: 12, bottom: 30 };

export function scale(points: Point[], width: number, height: number): (p: Point) => Point {
  const xs = points.map((p) => p.x);
  const ys = points.map((p) => p.y);
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs);
  const yMin = 0;
  const yMax = Math.max(...ys) || 1;
  const innerW = width - PAD.left - PAD.right;
  const innerH = height - PAD.top - PAD.bottom;
  const xSpan = xMax - xMin || 1;
  return (p) => ({
    x: PAD.left + ((p.x - xMin) / xSpan) * innerW,
    y: PAD.top + innerH - ((p.y - yMin) / (yMax - yMin)) * innerH,
  });
}

export function lineChartSvg(points: Point[], options: ChartOptions = {}): string {
  const width = options.width ?? 460;
  const height = options.height ?? 220;
  if (points.length === 0) {
    return `<svg class="chart" viewBox="0 0 ${width} ${height}" role="img"><text x="${width / 2}" y="${height / 2}" text-anchor="middle" class="chart-empty">no interval data yet</text></svg>`;
  }
  const toPixel = scale(points, width, height);
  const pixels = points.map(toPixel);
  const path = pixels.map((p) => `${p.x.toFixed(1)},${p.y.toFixed(1)}`).join(" ");
  const dots = pixels
    .map((p, i) => `<circle cx="${p.x.toFixed(1)}" cy="${p.y.toFixed(1)}" r="3.5"><title>iteration ${points[i].x}: ${points[i].y.toFixed(4)}</title></circle>`)
    .join("");
  const xTicks = points
    .map((p, i) => `<text x="${pixels[i].x.toFixed(1)}" y="${height - 10}" text-anchor="middle" class="tick">${p.x}</text>`)
    .join("");
  const yMax = Math.max(...points.map((p) => p.y));
  return [
    `<svg class="chart" viewBox="0 0 ${width} ${height}" role="img" aria-label="${options.yLabel ?? "mean CI width"} by ${options.xLabel ?? "iteration"}">`,
    `<line class="axis" x1="${PAD.left}" y1="${PAD.top}" x2="${PAD.left}" y2="${height - PAD.bottom}"/>`,
    `<line class="axis" x1="${PAD.left}" y1="${height - PAD.bottom}" x2="${width - PAD.right}" y2="${height - PAD.bottom}"/>`,
    `<text x="12" y="${PAD.top + 4}" class="tick">${yMax.toFixed(3)}</text>`,
    `<text x="12" y="${height - PAD.bottom}" class="tick">0</text>`,
    `<polyline class="series" fill="none" points="${path}"/>`,
    dots,
    xTicks,
    `</svg>`,
  ].join("");
}
