import { describe, expect, it } from 'vitest';

import { SessionState } from '../src/session';
import { AdviseResponse, SimulateResponse } from '../src/types';

const safeProposal: AdviseResponse = {
  dose_units: 7.0,
  plan: {
    setpoints: [
      { t_min: 0, mgdl: 110 },
      { t_min: 120, mgdl: 90 },
    ],
    boluses: [{ t_min: 0, units: 7.0 }],
  },
  verdict: 'Safe',
  rho: 0.04,
  feedback: null,
  predicted: { t_min: [0, 1], glucose: [120, 119], iob: [0, 0.1], stride: 1 },
  provenance: {},
};

const unsafeWhatIf: SimulateResponse = {
  trace: { t_min: [0, 1], glucose: [120, 60], iob: [0, 0.3], stride: 1 },
  metrics: { tir: 80, tar: 0, tbr: 20, mean_cgm: 95 },
  verdict: 'Unsafe',
  rho: -0.054,
  feedback: 'plan violates TBR < 4%: robustness -0.0542 < 0',
};

function freshSession(): SessionState {
  let tick = 0;
  const session = new SessionState(() => `2026-08-10T00:00:0${tick++}Z`);
  session.inputs = { carbs: 45, cr: 5, iob: 2, mode: 'exact' };
  return session;
}

describe('SessionState decision log', () => {
  it('records the proposal and a what-if override as two entries', () => {
    const s = freshSession();
    s.recordProposal(safeProposal);
    s.recordWhatIf(11.0, unsafeWhatIf);

    expect(s.entries).toHaveLength(2);
    expect(s.entries[0]).toMatchObject({
      kind: 'proposal',
      doseUnits: 7.0,
      verdict: 'Safe',
    });
    expect(s.entries[1]).toMatchObject({
      kind: 'what-if',
      doseUnits: 11.0,
      verdict: 'Unsafe',
    });
    expect(s.entries[1].feedback).toContain('TBR');
  });

  it('export contains both entries with ordered sequence numbers', () => {
    const s = freshSession();
    s.recordProposal(safeProposal);
    s.recordWhatIf(11.0, unsafeWhatIf);
    const exported = JSON.parse(s.exportJson());
    expect(exported.entries).toHaveLength(2);
    expect(exported.entries.map((e: { seq: number }) => e.seq)).toEqual([0, 1]);
    expect(exported.entries[0].verdict).toBe('Safe');
    expect(exported.entries[1].verdict).toBe('Unsafe');
  });

  it('is append-only: earlier entries never mutate', () => {
    const s = freshSession();
    s.recordProposal(safeProposal);
    const first = s.entries[0];
    const snapshot = { ...first };
    s.recordWhatIf(9.0, unsafeWhatIf);
    s.recordWhatIf(8.0, unsafeWhatIf);
    s.recordWhatIf(7.5, unsafeWhatIf);
    expect(s.entries).toHaveLength(4);
    expect(s.entries[0]).toEqual(snapshot);
    expect(Object.isFrozen(first)).toBe(true);
    expect(s.entries.map((e) => e.seq)).toEqual([0, 1, 2, 3]);
  });

  it('requires a base proposal before what-if exploration', () => {
    const s = freshSession();
    expect(() => s.recordWhatIf(5.0, unsafeWhatIf)).toThrow(/base proposal/);
  });

  it('accept/reject append new entries instead of mutating', () => {
    const s = freshSession();
    s.recordProposal(safeProposal);
    s.decide(true);
    expect(s.entries).toHaveLength(2);
    expect(s.entries[0].accepted).toBeNull();
    expect(s.entries[1].accepted).toBe(true);
  });
});
