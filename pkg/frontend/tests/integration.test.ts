import { describe, expect, it } from 'vitest';

import { AdvisorApi } from '../src/api';

// Opt-in end-to-end checks against a running service:
//   GLUCOGATE_URL=http://127.0.0.1:8080 npx vitest run tests/integration.test.ts
const url = process.env.GLUCOGATE_URL;

describe.skipIf(!url)('live service integration', () => {
  it('reference meal: 7 U Safe, override to 11 U Unsafe with TBR feedback', async () => {
    const api = new AdvisorApi(url);
    const proposal = await api.advise({ carbs: 45, cr: 5, iob: 2, mode: 'exact' });
    expect(proposal.dose_units).toBe(7.0);
    expect(proposal.verdict).toBe('Safe');

    const whatIf = await api.whatIf(proposal, 11.0, { carbs: 45 });
    expect(whatIf.verdict).toBe('Unsafe');
    expect(whatIf.feedback).toContain('TBR');
  });

  it('monotone overrides give monotone chart minima', async () => {
    const api = new AdvisorApi(url);
    const proposal = await api.advise({ carbs: 45, cr: 5, iob: 2, mode: 'exact' });
    const minima: number[] = [];
    for (const dose of [5.0, 8.0, 11.0]) {
      const res = await api.whatIf(proposal, dose, { carbs: 45 });
      minima.push(Math.min(...res.trace.glucose));
    }
    expect(minima[0]).toBeGreaterThanOrEqual(minima[1]);
    expect(minima[1]).toBeGreaterThanOrEqual(minima[2]);
  });
});
