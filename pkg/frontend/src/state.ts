/**
 * Pure view-model: UI state is a function of API responses plus pending
 * optimistic verdicts. Reloading the page and replaying the same responses
 * reconstructs identical state.
 */

import type { ComparisonDoc, FailuresPage, QueueItem, Verdict } from './api.js';

export interface PendingVerdict {
  verdict: Verdict;
  eventId: string;
}

export interface AppState {
  pathology: string;
  pageSize: number;
  page: FailuresPage | null;
  /** keyed by `${image_id}|${pathology}`; overlays the server verdicts */
  pending: Record<string, PendingVerdict>;
  jobStatus: string | null;
  jobError: string | null;
  toast: string | null;
}

export function initialState(pathology = '', pageSize = 8): AppState {
  return {
    pathology,
    pageSize,
    page: null,
    pending: {},
    jobStatus: null,
    jobError: null,
    toast: null,
  };
}

export function itemKey(imageId: string, pathology: string): string {
  return `${imageId}|${pathology}`;
}

/** Server page with pending optimistic verdicts overlaid. */
export function visibleItems(state: AppState): QueueItem[] {
  if (!state.page) return [];
  return state.page.items.map((item) => {
    const pending = state.pending[itemKey(item.image_id, item.pathology)];
    return pending ? { ...item, verdict: pending.verdict } : item;
  });
}

export function applyOptimistic(
  state: AppState,
  item: QueueItem,
  verdict: Verdict,
  eventId: string,
): AppState {
  return {
    ...state,
    pending: {
      ...state.pending,
      [itemKey(item.image_id, item.pathology)]: { verdict, eventId },
    },
    toast: null,
  };
}

/** Server accepted the event: the optimistic entry is now authoritative. */
export function reconcile(state: AppState, item: QueueItem, eventId: string): AppState {
  const key = itemKey(item.image_id, item.pathology);
  const pending = state.pending[key];
  if (!pending || pending.eventId !== eventId) return state; // superseded meanwhile
  return state;
}

/** Server rejected the event (or the network failed): drop the overlay. */
export function revert(state: AppState, item: QueueItem, eventId: string, reason: string): AppState {
  const key = itemKey(item.image_id, item.pathology);
  const pending = state.pending[key];
  if (!pending || pending.eventId !== eventId) return state;
  const remaining = { ...state.pending };
  delete remaining[key];
  return { ...state, pending: remaining, toast: reason };
}

/** A fresh server page clears overlays the server already reflects. */
export function absorbPage(state: AppState, page: FailuresPage): AppState {
  const pending: Record<string, PendingVerdict> = {};
  const byKey = new Map(page.items.map((i) => [itemKey(i.image_id, i.pathology), i]));
  for (const [key, entry] of Object.entries(state.pending)) {
    const server = byKey.get(key);
    // keep the overlay only while the server has not caught up
    if (server && server.verdict !== entry.verdict) pending[key] = entry;
  }
  return { ...state, page, pending };
}

export function totalPages(total: number, pageSize: number): number {
  return Math.max(1, Math.ceil(total / pageSize));
}

export interface ComparisonCell {
  /** exact JSON value, serialized without reformatting */
  raw: string;
  /** two-decimal rendering for the table body */
  display: string;
}

export interface ComparisonRowView {
  pathology: string;
  ppvBefore: ComparisonCell;
  ppvAfter: ComparisonCell;
  ppvDelta: ComparisonCell;
  npvBefore: ComparisonCell;
  npvAfter: ComparisonCell;
  npvDelta: ComparisonCell;
}

function cell(value: number): ComparisonCell {
  return { raw: String(value), display: value.toFixed(2) };
}

/**
 * Table rows straight from a comparison document. `raw` carries the exact
 * serialized numbers so the rendered table can be checked byte-for-byte
 * against the report payload.
 */
export function comparisonRows(comparison: ComparisonDoc): ComparisonRowView[] {
  return comparison.deltas.map((d) => ({
    pathology: d.pathology,
    ppvBefore: cell(d.ppv_before),
    ppvAfter: cell(d.ppv_after),
    ppvDelta: cell(d.ppv_delta),
    npvBefore: cell(d.npv_before),
    npvAfter: cell(d.npv_after),
    npvDelta: cell(d.npv_delta),
  }));
}

export function tTestSummary(comparison: ComparisonDoc, metric: 'ppv' | 'npv'): string {
  const entry = comparison.t_tests[metric];
  if (!entry.result) return `${metric.toUpperCase()}: ${entry.error ?? 'test unavailable'}`;
  const r = entry.result;
  return (
    `${metric.toUpperCase()}: t = ${r.t_statistic.toFixed(4)}, ` +
    `df = ${r.degrees_of_freedom}, p = ${r.p_value.toFixed(6)}`
  );
}
