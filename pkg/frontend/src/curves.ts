// Chart models built from raw service curves. Point values are carried
// through untouched (volume fraction scaled to percent, nothing else), and
// every series is validated against the curve invariants before rendering.

import type { CurveSeries } from "./api.js";

/** The structures the review panel always tries to show, in display order. */
export const PANEL_STRUCTURES = [
  "ptv",
  "left_lung",
  "right_lung",
  "chest_wall",
  "spinal_cord",
] as const;

export type SeriesRole = "predicted" | "previous" | "ground-truth";

export interface CurvePoint {
  dose_gy: number;
  volume_pct: number;
}

export interface SeriesView {
  label: string;
  role: SeriesRole;
  points: CurvePoint[];
}

export interface CurveView {
  structure: string;
  series: SeriesView[];
}

/** One panel position: a chart, or null when the structure is absent. */
export interface ChartSlot {
  structure: string;
  view: CurveView | null;
}

export class CurveDataError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "CurveDataError";
  }
}

/** Pair dose edges with volume fractions (as percent), enforcing invariants. */
export function toPoints(edgesGy: number[], fractions: number[]): CurvePoint[] {
  if (edgesGy.length !== fractions.length) {
    throw new CurveDataError(`curve lengths disagree: ${edgesGy.length} edges vs ${fractions.length} values`);
  }
  if (edgesGy.length === 0) {
    throw new CurveDataError("curve is empty");
  }
  const points: CurvePoint[] = [];
  let lastDose = -Infinity;
  let lastPct = Infinity;
  for (let i = 0; i < edgesGy.length; i += 1) {
    const dose = edgesGy[i] as number;
    const pct = (fractions[i] as number) * 100;
    if (!Number.isFinite(dose) || !Number.isFinite(pct)) {
      throw new CurveDataError(`curve point ${i} is not finite`);
    }
    if (dose < lastDose) {
      throw new CurveDataError(`curve doses not sorted at point ${i}`);
    }
    if (pct < 0 || pct > 100) {
      throw new CurveDataError(`volume ${pct}% out of range at point ${i}`);
    }
    if (pct > lastPct) {
      throw new CurveDataError(`volume increases at point ${i}`);
    }
    points.push({ dose_gy: dose, volume_pct: pct });
    lastDose = dose;
    lastPct = pct;
  }
  return points;
}

/** Assemble the overlay stack for one structure. */
export function curveView(current: CurveSeries, previous: CurveSeries | null): CurveView {
  const series: SeriesView[] = [
    { label: "predicted", role: "predicted", points: toPoints(current.edges_gy, current.predicted) },
  ];
  if (previous !== null) {
    series.push({ label: "previous", role: "previous", points: toPoints(previous.edges_gy, previous.predicted) });
  }
  if (current.truth !== null) {
    series.push({ label: "true", role: "ground-truth", points: toPoints(current.edges_gy, current.truth) });
  }
  return { structure: current.structure, series };
}

/** One slot per panel structure; slots without a served curve get view null. */
export function buildCharts(current: CurveSeries[], previous: CurveSeries[] | null): ChartSlot[] {
  return PANEL_STRUCTURES.map((structure) => {
    const series = current.find((c) => c.structure === structure);
    if (series === undefined) {
      return { structure, view: null };
    }
    const prior = previous?.find((c) => c.structure === structure) ?? null;
    return { structure, view: curveView(series, prior) };
  });
}

const WIDTH = 360;
const HEIGHT = 240;
const MARGIN = { left: 46, right: 12, top: 20, bottom: 36 };

const SERIES_STYLE: Record<SeriesRole, string> = {
  predicted: 'stroke="#1f6fb2"',
  previous: 'stroke="#c27f1f" stroke-dasharray="6 4"',
  "ground-truth": 'stroke="#888888"',
};

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function polyline(view: SeriesView, xMax: number): string {
  const innerW = WIDTH - MARGIN.left - MARGIN.right;
  const innerH = HEIGHT - MARGIN.top - MARGIN.bottom;
  const pixels = view.points
    .map((p) => {
      const x = MARGIN.left + (xMax > 0 ? (p.dose_gy / xMax) * innerW : 0);
      const y = MARGIN.top + (1 - p.volume_pct / 100) * innerH;
      return `${x.toFixed(2)},${y.toFixed(2)}`;
    })
    .join(" ");
  // data-* attributes carry the exact payload values so rendered charts can
  // be compared byte-for-byte against the service response.
  const doses = JSON.stringify(view.points.map((p) => p.dose_gy));
  const volumes = JSON.stringify(view.points.map((p) => p.volume_pct));
  return (
    `<polyline class="series ${view.role}" fill="none" ${SERIES_STYLE[view.role]} ` +
    `points="${pixels}" data-dose="${doses}" data-volume="${volumes}"></polyline>`
  );
}

function axes(xMax: number): string {
  const x0 = MARGIN.left;
  const x1 = WIDTH - MARGIN.right;
  const y0 = HEIGHT - MARGIN.bottom;
  const y1 = MARGIN.top;
  const parts = [
    `<line x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}" stroke="#333"></line>`,
    `<line x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}" stroke="#333"></line>`,
    `<text x="${(x0 + x1) / 2}" y="${HEIGHT - 6}" text-anchor="middle" font-size="11">dose (Gy)</text>`,
    `<text x="12" y="${(y0 + y1) / 2}" text-anchor="middle" font-size="11" ` +
      `transform="rotate(-90 12 ${(y0 + y1) / 2})">volume (%)</text>`,
  ];
  for (const frac of [0, 0.5, 1]) {
    const x = x0 + frac * (x1 - x0);
    parts.push(`<text x="${x}" y="${y0 + 14}" text-anchor="middle" font-size="10">${(frac * xMax).toFixed(1)}</text>`);
    const y = y0 + frac * (y1 - y0);
    parts.push(`<text x="${x0 - 6}" y="${y + 3}" text-anchor="end" font-size="10">${(frac * 100).toFixed(0)}</text>`);
  }
  return parts.join("");
}

/** Render one panel slot as an inline-SVG figure (or a note when absent). */
export function renderChart(slot: ChartSlot): string {
  const title = escapeHtml(slot.structure);
  if (slot.view === null) {
    return (
      `<figure class="chart chart-empty"><figcaption>${title} CDVH</figcaption>` +
      `<p class="note">structure not present in this case</p></figure>`
    );
  }
  const xMax = Math.max(...slot.view.series.map((s) => s.points[s.points.length - 1]?.dose_gy ?? 0));
  const body = slot.view.series.map((s) => polyline(s, xMax)).join("");
  return (
    `<figure class="chart"><figcaption>${title} CDVH</figcaption>` +
    `<svg viewBox="0 0 ${WIDTH} ${HEIGHT}" width="${WIDTH}" height="${HEIGHT}" role="img">` +
    `${axes(xMax)}${body}</svg></figure>`
  );
}
