export type PlannerMode = 'exact' | 'linear';

export interface DownsampledTrace {
  t_min: number[];
  glucose: number[];
  iob: number[];
  stride: number;
}

export interface AdviseRequest {
  carbs: number;
  cr: number;
  iob: number | null;
  mode: PlannerMode;
  horizon_min?: number;
}

export interface AdviseResponse {
  dose_units: number;
  plan: {
    setpoints: { t_min: number; mgdl: number }[];
    boluses: { t_min: number; units: number }[];
  };
  verdict: 'Safe' | 'Unsafe';
  rho: number;
  feedback: string | null;
  predicted: DownsampledTrace;
  provenance: Record<string, unknown>;
}

export interface SimulateResponse {
  trace: DownsampledTrace;
  metrics: { tir: number; tar: number; tbr: number; mean_cgm: number };
  verdict: 'Safe' | 'Unsafe';
  rho: number;
  feedback: string | null;
}

export interface ServiceError {
  code: string;
  step: number | null;
  message: string;
}

export class ApiError extends Error {
  readonly payload: ServiceError | null;
  readonly status: number;

  constructor(status: number, payload: ServiceError | null) {
    super(payload ? `${payload.code}: ${payload.message}` : `HTTP ${status}`);
    this.status = status;
    this.payload = payload;
  }
}
