import { AdvisorApi } from './api';
import { chartData } from './chart';
import { SessionState } from './session';
import { AdviseResponse, ApiError, DownsampledTrace, PlannerMode, SimulateResponse } from './types';

const api = new AdvisorApi(
  (window as unknown as { GLUCOGATE_URL?: string }).GLUCOGATE_URL,
);
const session = new SessionState();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showError(err: unknown): void {
  const banner = el<HTMLDivElement>('error-banner');
  if (err instanceof ApiError && err.payload) {
    const step = err.payload.step !== null ? ` (step ${err.payload.step})` : '';
    banner.textContent = `${err.payload.message}${step}`;
  } else if (err instanceof Error && err.name === 'AbortError') {
    return; // superseded by a newer request
  } else {
    banner.textContent = `service unreachable: ${String(err)}`;
  }
  banner.hidden = false;
}

function clearError(): void {
  el<HTMLDivElement>('error-banner').hidden = true;
}

function renderVerdict(verdict: 'Safe' | 'Unsafe', rho: number, feedback: string | null): void {
  const badge = el<HTMLSpanElement>('verdict-badge');
  badge.textContent = `${verdict} (ρ = ${rho.toFixed(4)})`;
  badge.className = verdict === 'Safe' ? 'badge safe' : 'badge unsafe';
  const fb = el<HTMLParagraphElement>('feedback');
  fb.textContent = feedback ?? '';
  fb.hidden = feedback === null;
}

function renderChart(trace: DownsampledTrace): void {
  const data = chartData(trace);
  el<HTMLElement>('cgm-path').setAttribute('d', data.pathD);
  const g70 = el<HTMLElement>('guide-70');
  const g180 = el<HTMLElement>('guide-180');
  g70.setAttribute('y1', String(data.guide70Y));
  g70.setAttribute('y2', String(data.guide70Y));
  g180.setAttribute('y1', String(data.guide180Y));
  g180.setAttribute('y2', String(data.guide180Y));
}

function renderLog(): void {
  const tbody = el<HTMLTableSectionElement>('log-body');
  tbody.innerHTML = '';
  for (const e of session.entries) {
    const row = document.createElement('tr');
    row.innerHTML =
      `<td>${e.seq}</td><td>${e.kind}</td><td>${e.doseUnits.toFixed(2)} U</td>` +
      `<td>${e.verdict}</td><td>${e.rho.toFixed(4)}</td>` +
      `<td>${e.accepted === null ? '' : e.accepted ? 'accepted' : 'rejected'}</td>`;
    tbody.appendChild(row);
  }
}

function readInputs(): { carbs: number; cr: number; iob: number | null; mode: PlannerMode } {
  const carbs = Number(el<HTMLInputElement>('carbs').value);
  const cr = Number(el<HTMLInputElement>('cr').value);
  const iobRaw = el<HTMLInputElement>('iob').value.trim();
  const mode = el<HTMLSelectElement>('mode').value as PlannerMode;
  return { carbs, cr, iob: iobRaw === '' ? null : Number(iobRaw), mode };
}

async function onAdvise(): Promise<void> {
  clearError();
  session.inputs = readInputs();
  let res: AdviseResponse;
  try {
    res = await api.advise({
      carbs: session.inputs.carbs,
      cr: session.inputs.cr,
      iob: session.inputs.iob,
      mode: session.inputs.mode,
    });
  } catch (err) {
    showError(err); // inputs stay as entered
    return;
  }
  session.recordProposal(res);
  el<HTMLSpanElement>('dose').textContent = `${res.dose_units.toFixed(2)} U`;
  renderVerdict(res.verdict, res.rho, res.feedback);
  renderChart(res.predicted);
  renderLog();
  el<HTMLInputElement>('override').value = String(res.dose_units);
}

async function onWhatIf(): Promise<void> {
  clearError();
  if (!session.latest) {
    showError(new Error('request a proposal first'));
    return;
  }
  const dose = Number(el<HTMLInputElement>('override').value);
  let res: SimulateResponse;
  try {
    res = await api.whatIf(session.latest, dose, { carbs: session.inputs.carbs });
  } catch (err) {
    showError(err);
    return;
  }
  session.recordWhatIf(dose, res);
  el<HTMLSpanElement>('dose').textContent = `${dose.toFixed(2)} U (what-if)`;
  renderVerdict(res.verdict, res.rho, res.feedback);
  renderChart(res.trace);
  renderLog();
}

function onExport(): void {
  const blob = new Blob([session.exportJson()], { type: 'application/json' });
  const a = document.createElement('a');
  a.href = URL.createObjectURL(blob);
  a.download = 'glucogate-session.json';
  a.click();
  URL.revokeObjectURL(a.href);
}

export function wire(): void {
  el<HTMLButtonElement>('advise-btn').addEventListener('click', () => void onAdvise());
  el<HTMLButtonElement>('whatif-btn').addEventListener('click', () => void onWhatIf());
  el<HTMLButtonElement>('accept-btn').addEventListener('click', () => {
    session.decide(true);
    renderLog();
  });
  el<HTMLButtonElement>('reject-btn').addEventListener('click', () => {
    session.decide(false);
    renderLog();
  });
  el<HTMLButtonElement>('export-btn').addEventListener('click', onExport);
}

if (typeof document !== 'undefined' && document.readyState !== 'loading') {
  wire();
} else if (typeof document !== 'undefined') {
  document.addEventListener('DOMContentLoaded', wire);
}
