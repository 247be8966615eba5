import { describe, expect, it } from 'vitest';

import type { ComparisonDoc, FailuresPage, QueueItem } from '../src/api.js';
import {
  absorbPage,
  applyOptimistic,
  comparisonRows,
  initialState,
  revert,
  tTestSummary,
  totalPages,
  visibleItems,
} from '../src/state.js';

function item(id: string, verdict: QueueItem['verdict'] = null): QueueItem {
  return {
    image_id: id,
    pathology: 'No Finding',
    probability: 0.42,
    decision: 'negative',
    truth: 'positive',
    cell: 'FN',
    verdict,
    image_url: `/images/${id}`,
  };
}

function page(items: QueueItem[], total = items.length): FailuresPage {
  return { pathology: 'No Finding', page: 1, page_size: 8, total, items };
}

describe('optimistic verdicts', () => {
  it('overlays a pending verdict onto the server page', () => {
    let state = absorbPage(initialState('No Finding'), page([item('a'), item('b')]));
    state = applyOptimistic(state, item('a'), 'confirm-FN', 'e1');
    const visible = visibleItems(state);
    expect(visible[0]!.verdict).toBe('confirm-FN');
    expect(visible[1]!.verdict).toBeNull();
  });

  it('revert drops the overlay and records the reason', () => {
    let state = absorbPage(initialState('No Finding'), page([item('a')]));
    state = applyOptimistic(state, item('a'), 'confirm-FN', 'e1');
    state = revert(state, item('a'), 'e1', 'rejected: nope');
    expect(visibleItems(state)[0]!.verdict).toBeNull();
    expect(state.toast).toBe('rejected: nope');
  });

  it('revert ignores superseded event ids', () => {
    let state = absorbPage(initialState('No Finding'), page([item('a')]));
    state = applyOptimistic(state, item('a'), 'confirm-FN', 'e1');
    state = applyOptimistic(state, item('a'), 'baseline-correct', 'e2');
    state = revert(state, item('a'), 'e1', 'stale failure');
    expect(visibleItems(state)[0]!.verdict).toBe('baseline-correct');
  });

  it('a fresh page absorbs overlays the server now reflects', () => {
    let state = absorbPage(initialState('No Finding'), page([item('a')]));
    state = applyOptimistic(state, item('a'), 'confirm-FN', 'e1');
    state = absorbPage(state, page([item('a', 'confirm-FN')]));
    expect(Object.keys(state.pending)).toHaveLength(0);
    expect(visibleItems(state)[0]!.verdict).toBe('confirm-FN');
  });

  it('state is a pure function of responses plus pending events', () => {
    const responses = page([item('a'), item('b', 'confirm-FN')]);
    const one = absorbPage(initialState('No Finding'), responses);
    const two = absorbPage(initialState('No Finding'), responses);
    expect(JSON.stringify(one)).toBe(JSON.stringify(two));
  });
});

describe('pagination', () => {
  it('computes page counts', () => {
    expect(totalPages(0, 8)).toBe(1);
    expect(totalPages(8, 8)).toBe(1);
    expect(totalPages(9, 8)).toBe(2);
    expect(totalPages(50, 8)).toBe(7);
  });
});

describe('comparison view', () => {
  const doc: ComparisonDoc = {
    before: { rows: [] },
    after: { rows: [] },
    deltas: [
      {
        pathology: 'No Finding',
        ppv_before: 100.0,
        ppv_after: 100.0,
        ppv_delta: 0.0,
        npv_before: 58.21428571428571,
        npv_after: 100.0,
        npv_delta: 41.78571428571429,
        ppv_excluded: false,
        npv_excluded: false,
      },
    ],
    t_tests: {
      ppv: { pathologies: [], excluded: [], error: 'needs >= 2 defined pairs, have 1', result: null },
      npv: {
        pathologies: ['No Finding'],
        excluded: [],
        result: { t_statistic: 1.5, degrees_of_freedom: 13, p_value: 0.157, n_pairs: 14, degenerate: false },
      },
    },
  };

  it('keeps raw values byte-identical to their JSON serialization', () => {
    const rows = comparisonRows(doc);
    expect(rows[0]!.npvBefore.raw).toBe('58.21428571428571');
    expect(rows[0]!.npvDelta.raw).toBe('41.78571428571429');
    expect(rows[0]!.ppvBefore.raw).toBe('100');
    expect(rows[0]!.npvBefore.display).toBe('58.21');
  });

  it('summarizes t-tests including the unavailable case', () => {
    expect(tTestSummary(doc, 'npv')).toContain('p = 0.157000');
    expect(tTestSummary(doc, 'ppv')).toContain('needs >= 2');
  });
});
