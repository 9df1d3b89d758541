import { DownsampledTrace } from './types';

export interface ChartGeometry {
  width: number;
  height: number;
  padding: number;
}

export interface ChartData {
  pathD: string;
  guide70Y: number;
  guide180Y: number;
  yMin: number;
  yMax: number;
}

const DEFAULT_GEOMETRY: ChartGeometry = { width: 640, height: 280, padding: 28 };

/**
 * Map the service's downsampled trace to SVG path data plus the 70/180 guide
 * line positions. No resampling happens here: every plotted point is exactly
 * a gated sample.
 */
export function chartData(
  trace: DownsampledTrace,
  geom: ChartGeometry = DEFAULT_GEOMETRY,
): ChartData {
  const g = trace.glucose;
  if (g.length === 0) {
    throw new Error('cannot chart an empty trace');
  }
  const yMin = Math.min(60, Math.floor(Math.min(...g) / 10) * 10);
  const yMax = Math.max(200, Math.ceil(Math.max(...g) / 10) * 10);
  const t0 = trace.t_min[0];
  const t1 = trace.t_min[trace.t_min.length - 1];
  const span = Math.max(t1 - t0, 1e-9);
  const innerW = geom.width - 2 * geom.padding;
  const innerH = geom.height - 2 * geom.padding;

  const x = (t: number) => geom.padding + ((t - t0) / span) * innerW;
  const y = (v: number) =>
    geom.padding + (1 - (v - yMin) / (yMax - yMin)) * innerH;

  const parts = g.map((v, i) => {
    const cmd = i === 0 ? 'M' : 'L';
    return `${cmd}${x(trace.t_min[i]).toFixed(2)},${y(v).toFixed(2)}`;
  });
  return {
    pathD: parts.join(' '),
    guide70Y: y(70),
    guide180Y: y(180),
    yMin,
    yMax,
  };
}
