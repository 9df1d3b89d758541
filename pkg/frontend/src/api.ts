import {
  AdviseRequest,
  AdviseResponse,
  ApiError,
  ServiceError,
  SimulateResponse,
} from './types';

async function parseOrThrow<T>(res: Response): Promise<T> {
  if (res.ok) {
    return (await res.json()) as T;
  }
  let payload: ServiceError | null = null;
  try {
    payload = (await res.json()) as ServiceError;
  } catch {
    payload = null;
  }
  throw new ApiError(res.status, payload);
}

/**
 * Typed client for the /v1 endpoints. At most one advise request is in
 * flight: submitting a new one aborts the previous (cancel-and-replace).
 */
export class AdvisorApi {
  private readonly baseUrl: string;
  private adviseController: AbortController | null = null;

  constructor(baseUrl = 'http://127.0.0.1:8080') {
    this.baseUrl = baseUrl.replace(/\/+$/, '');
  }

  async health(): Promise<{ status: string; version: string }> {
    const res = await fetch(`${this.baseUrl}/v1/health`);
    return parseOrThrow(res);
  }

  async advise(req: AdviseRequest): Promise<AdviseResponse> {
    if (this.adviseController) {
      this.adviseController.abort();
    }
    this.adviseController = new AbortController();
    const res = await fetch(`${this.baseUrl}/v1/advise`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(req),
      signal: this.adviseController.signal,
    });
    return parseOrThrow(res);
  }

  /** Re-simulate the base plan with an overridden bolus dose. */
  async whatIf(
    base: AdviseResponse,
    overrideDose: number,
    meal: { carbs: number; timeMin?: number },
    horizonMin = 360.0,
  ): Promise<SimulateResponse> {
    if (overrideDose < 0) {
      throw new Error('what-if dose override must be nonnegative');
    }
    const res = await fetch(`${this.baseUrl}/v1/simulate`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({
        setpoints: base.plan.setpoints,
        boluses: [{ t_min: meal.timeMin ?? 0.0, units: overrideDose }],
        meal_carbs: meal.carbs,
        meal_time_min: meal.timeMin ?? 0.0,
        horizon_min: horizonMin,
      }),
    });
    return parseOrThrow(res);
  }
}
