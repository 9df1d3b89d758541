import { afterEach, describe, expect, it, vi } from 'vitest';

import { AdvisorApi } from '../src/api';
import { ApiError } from '../src/types';

// Response fixtures mirror the service's actual payload shapes for the
// reference 45 g / CR 5 / IOB 2 request.
const adviseSafe = {
  dose_units: 7.0,
  plan: {
    setpoints: [
      { t_min: 0.0, mgdl: 110.0 },
      { t_min: 120.0, mgdl: 90.0 },
    ],
    boluses: [{ t_min: 0.0, units: 7.0 }],
  },
  verdict: 'Safe',
  rho: 0.04,
  feedback: null,
  predicted: { t_min: [0, 1, 2], glucose: [126, 125, 124], iob: [0, 0, 0], stride: 1 },
  provenance: { estimator: 'fixed' },
};

const simulateUnsafe = {
  trace: { t_min: [0, 1, 2], glucose: [126, 80, 55], iob: [0, 0.2, 0.3], stride: 1 },
  metrics: { tir: 85.0, tar: 0.0, tbr: 15.0, mean_cgm: 98.0 },
  verdict: 'Unsafe',
  rho: -0.049,
  feedback: 'plan violates TBR < 4%: robustness -0.0490 < 0; first below-range sample at t=2 min.',
};

function mockFetch(handler: (url: string, init?: RequestInit) => Response | Promise<Response>) {
  const fn = vi.fn(async (input: RequestInfo | URL, init?: RequestInit) =>
    handler(String(input), init),
  );
  vi.stubGlobal('fetch', fn);
  return fn;
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe('AdvisorApi', () => {
  it('returns 7 U Safe for the reference request', async () => {
    const fetchFn = mockFetch((url) => {
      expect(url).toBe('http://svc/v1/advise');
      return new Response(JSON.stringify(adviseSafe), { status: 200 });
    });
    const api = new AdvisorApi('http://svc');
    const res = await api.advise({ carbs: 45, cr: 5, iob: 2, mode: 'exact' });
    expect(res.dose_units).toBe(7.0);
    expect(res.verdict).toBe('Safe');
    const body = JSON.parse(String(fetchFn.mock.calls[0][1]?.body));
    expect(body).toMatchObject({ carbs: 45, cr: 5, iob: 2, mode: 'exact' });
  });

  it('what-if override posts the base plan setpoints with the new dose', async () => {
    let captured: Record<string, unknown> = {};
    mockFetch((url, init) => {
      expect(url).toBe('http://svc/v1/simulate');
      captured = JSON.parse(String(init?.body));
      return new Response(JSON.stringify(simulateUnsafe), { status: 200 });
    });
    const api = new AdvisorApi('http://svc');
    const res = await api.whatIf(adviseSafe as never, 11.0, { carbs: 45 });
    expect(res.verdict).toBe('Unsafe');
    expect(res.feedback).toContain('TBR');
    expect(captured.boluses).toEqual([{ t_min: 0.0, units: 11.0 }]);
    expect(captured.setpoints).toEqual(adviseSafe.plan.setpoints);
    expect(captured.meal_carbs).toBe(45);
  });

  it('surfaces structured service errors', async () => {
    mockFetch(
      () =>
        new Response(
          JSON.stringify({ code: 'validation', step: null, message: 'carb ratio must be positive' }),
          { status: 422 },
        ),
    );
    const api = new AdvisorApi('http://svc');
    await expect(api.advise({ carbs: 45, cr: 0, iob: 2, mode: 'exact' })).rejects.toSatisfy(
      (err: unknown) =>
        err instanceof ApiError &&
        err.status === 422 &&
        err.payload?.message.includes('carb ratio'),
    );
  });

  it('rejects negative what-if doses before any network call', async () => {
    const fetchFn = mockFetch(() => new Response('{}', { status: 200 }));
    const api = new AdvisorApi('http://svc');
    await expect(api.whatIf(adviseSafe as never, -1, { carbs: 45 })).rejects.toThrow(/nonnegative/);
    expect(fetchFn).not.toHaveBeenCalled();
  });

  it('cancel-and-replace: a second advise aborts the first', async () => {
    const signals: AbortSignal[] = [];
    mockFetch(async (_url, init) => {
      const signal = init?.signal as AbortSignal;
      signals.push(signal);
      await new Promise((resolve) => setTimeout(resolve, 5));
      if (signal.aborted) {
        throw Object.assign(new Error('aborted'), { name: 'AbortError' });
      }
      return new Response(JSON.stringify(adviseSafe), { status: 200 });
    });
    const api = new AdvisorApi('http://svc');
    const first = api.advise({ carbs: 20, cr: 10, iob: 0, mode: 'exact' });
    const second = api.advise({ carbs: 45, cr: 5, iob: 2, mode: 'exact' });
    await expect(first).rejects.toMatchObject({ name: 'AbortError' });
    await expect(second).resolves.toMatchObject({ dose_units: 7.0 });
    expect(signals[0].aborted).toBe(true);
    expect(signals[1].aborted).toBe(false);
  });
});
