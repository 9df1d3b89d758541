import { AdviseResponse, PlannerMode, SimulateResponse } from './types';

export interface DecisionEntry {
  readonly seq: number;
  readonly at: string; // ISO timestamp
  readonly kind: 'proposal' | 'what-if';
  readonly carbs: number;
  readonly cr: number;
  readonly doseUnits: number;
  readonly verdict: 'Safe' | 'Unsafe';
  readonly rho: number;
  readonly feedback: string | null;
  readonly accepted: boolean | null;
}

export interface SessionInputs {
  carbs: number;
  cr: number;
  iob: number | null;
  mode: PlannerMode;
}

/**
 * Single-user session: holds the entered meal, the latest proposal, the
 * what-if override, and an append-only decision log. Prior log entries are
 * never mutated; acceptance marks are recorded as new entries.
 */
export class SessionState {
  inputs: SessionInputs = { carbs: 0, cr: 10, iob: null, mode: 'exact' };
  latest: AdviseResponse | null = null;
  whatIfDose: number | null = null;
  private readonly log: DecisionEntry[] = [];
  private seq = 0;
  private readonly now: () => string;

  constructor(now: () => string = () => new Date().toISOString()) {
    this.now = now;
  }

  recordProposal(res: AdviseResponse): DecisionEntry {
    this.latest = res;
    this.whatIfDose = null;
    return this.append({
      kind: 'proposal',
      doseUnits: res.dose_units,
      verdict: res.verdict,
      rho: res.rho,
      feedback: res.feedback,
    });
  }

  recordWhatIf(doseUnits: number, res: SimulateResponse): DecisionEntry {
    if (this.latest === null) {
      throw new Error('a base proposal is required before what-if exploration');
    }
    this.whatIfDose = doseUnits;
    return this.append({
      kind: 'what-if',
      doseUnits,
      verdict: res.verdict,
      rho: res.rho,
      feedback: res.feedback,
    });
  }

  private append(
    partial: Omit<DecisionEntry, 'seq' | 'at' | 'carbs' | 'cr' | 'accepted'>,
  ): DecisionEntry {
    const entry: DecisionEntry = {
      seq: this.seq++,
      at: this.now(),
      carbs: this.inputs.carbs,
      cr: this.inputs.cr,
      accepted: null,
      ...partial,
    };
    this.log.push(Object.freeze(entry));
    return entry;
  }

  /** Mark the latest entry accepted/rejected by appending a copy; the
   * original entry is untouched (append-only log). */
  decide(accepted: boolean): DecisionEntry {
    const last = this.log[this.log.length - 1];
    if (!last) {
      throw new Error('nothing to decide on');
    }
    const entry: DecisionEntry = Object.freeze({
      ...last,
      seq: this.seq++,
      at: this.now(),
      accepted,
    });
    this.log.push(entry);
    return entry;
  }

  get entries(): readonly DecisionEntry[] {
    return this.log;
  }

  exportJson(): string {
    return JSON.stringify(
      {
        exported_at: this.now(),
        inputs: this.inputs,
        entries: this.log,
      },
      null,
      2,
    );
  }
}
