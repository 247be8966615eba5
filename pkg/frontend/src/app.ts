/**
 * DOM application: failure queue browsing, verdict submission with
 * optimistic updates, retrain trigger with a live job panel, and the
 * before/after comparison table.
 */

import { ApiClient, ApiError, pollJob } from './api.js';
import type { ComparisonDoc, JobInfo, QueueItem, Verdict } from './api.js';
import {
  AppState,
  absorbPage,
  applyOptimistic,
  comparisonRows,
  initialState,
  itemKey,
  revert,
  tTestSummary,
  totalPages,
  visibleItems,
} from './state.js';

const VERDICTS: Verdict[] = ['confirm-FP', 'confirm-FN', 'baseline-correct'];

function newEventId(): string {
  if (typeof crypto !== 'undefined' && 'randomUUID' in crypto) return crypto.randomUUID();
  return `evt-${Date.now()}-${Math.random().toString(16).slice(2)}`;
}

export interface AppOptions {
  pageSize?: number;
  pollIntervalMs?: number;
  retrainConfig?: Record<string, unknown>;
  reviewerId?: string;
}

export class ReviewApp {
  readonly api: ApiClient;
  state: AppState;
  private root: HTMLElement;
  private options: Required<AppOptions>;
  private inflight = new Map<string, { eventId: string; promise: Promise<void> }>();

  constructor(root: HTMLElement, api: ApiClient, options: AppOptions = {}) {
    this.root = root;
    this.api = api;
    this.options = {
      pageSize: options.pageSize ?? 8,
      pollIntervalMs: options.pollIntervalMs ?? 1000,
      retrainConfig: options.retrainConfig ?? {},
      reviewerId: options.reviewerId ?? 'reviewer',
    };
    this.state = initialState('', this.options.pageSize);
    this.root.innerHTML = `
      <header class="bar">
        <h1>Failure review</h1>
        <label>Pathology
          <select data-role="pathology"></select>
        </label>
        <span data-role="queue-total"></span>
      </header>
      <p data-role="toast" class="toast" hidden></p>
      <section>
        <ul data-role="queue" class="queue"></ul>
        <nav class="pager">
          <button data-role="prev">&laquo; prev</button>
          <span data-role="page-info"></span>
          <button data-role="next">next &raquo;</button>
        </nav>
      </section>
      <section class="bar">
        <button data-role="retrain">Retrain on this pathology</button>
        <span data-role="job-panel"></span>
      </section>
      <section>
        <h2>Before / after</h2>
        <div data-role="comparison"></div>
      </section>`;
    this.el('prev').addEventListener('click', () => this.goto(-1));
    this.el('next').addEventListener('click', () => this.goto(+1));
    this.el('retrain').addEventListener('click', () => void this.retrain());
    this.el<HTMLSelectElement>('pathology').addEventListener('change', (ev) => {
      void this.loadQueue((ev.target as HTMLSelectElement).value, 1);
    });
    this.el('queue').addEventListener('click', (ev) => {
      const button = (ev.target as HTMLElement).closest<HTMLButtonElement>('button[data-verdict]');
      if (button) void this.submitVerdict(button);
    });
  }

  el<T extends HTMLElement = HTMLElement>(role: string): T {
    const found = this.root.querySelector<T>(`[data-role="${role}"]`);
    if (!found) throw new Error(`missing element: ${role}`);
    return found;
  }

  async boot(): Promise<void> {
    const { pathologies } = await this.api.pathologies();
    const select = this.el<HTMLSelectElement>('pathology');
    select.innerHTML = pathologies
      .map((p) => `<option value="${p.name}">${p.name} (${p.failed})</option>`)
      .join('');
    const first = pathologies.find((p) => p.failed > 0) ?? pathologies[0];
    if (first) {
      select.value = first.name;
      await this.loadQueue(first.name, 1);
    }
    const latest = await this.api.latestReport();
    if (latest.comparison) this.renderComparison(latest.comparison);
  }

  async loadQueue(pathology: string, page: number): Promise<void> {
    try {
      const data = await this.api.failures(pathology, page, this.state.pageSize);
      this.state = absorbPage({ ...this.state, pathology }, data);
      this.renderQueue();
    } catch (err) {
      this.showToast(`cannot load queue: ${(err as Error).message} — retry`);
    }
  }

  private goto(direction: number): void {
    if (!this.state.page) return;
    const pages = totalPages(this.state.page.total, this.state.pageSize);
    const next = Math.min(pages, Math.max(1, this.state.page.page + direction));
    if (next !== this.state.page.page) void this.loadQueue(this.state.pathology, next);
  }

  renderQueue(): void {
    const page = this.state.page;
    const list = this.el('queue');
    if (!page || page.total === 0) {
      list.innerHTML = '<li class="empty">No failed inferences for this pathology.</li>';
      this.el('queue-total').textContent = '0 failures';
      this.el('page-info').textContent = '';
      (this.el('retrain') as HTMLButtonElement).disabled = true;
      return;
    }
    (this.el('retrain') as HTMLButtonElement).disabled = false;
    this.el('queue-total').textContent = `${page.total} failures`;
    this.el('page-info').textContent = `page ${page.page} / ${totalPages(page.total, this.state.pageSize)}`;
    list.innerHTML = visibleItems(this.state)
      .map((item) => this.renderItem(item))
      .join('');
  }

  private renderItem(item: QueueItem): string {
    const allowed: Verdict[] = item.cell === 'FP' ? ['confirm-FP', 'baseline-correct']
      : item.cell === 'FN' ? ['confirm-FN', 'baseline-correct']
      : ['baseline-correct'];
    const buttons = VERDICTS.map((v) => {
      const disabled = allowed.includes(v) ? '' : 'disabled';
      const active = item.verdict === v ? 'class="active"' : '';
      return `<button data-verdict="${v}" data-image-id="${item.image_id}" ${active} ${disabled}>${v}</button>`;
    }).join('');
    const badge = item.verdict
      ? `<span class="badge" data-role="badge">${item.verdict}</span>`
      : '<span class="badge badge-unset" data-role="badge">unreviewed</span>';
    return `
      <li class="queue-item" data-key="${itemKey(item.image_id, item.pathology)}">
        <img src="${item.image_url}" alt="${item.image_id}" width="64" height="64" loading="lazy">
        <div class="meta">
          <code>${item.image_id}</code>
          <span>baseline ${item.decision} @ p=${item.probability.toFixed(3)}</span>
          <span>truth ${item.truth} &rarr; <strong>${item.cell}</strong></span>
        </div>
        ${badge}
        <div class="verdicts">${buttons}</div>
      </li>`;
  }

  async submitVerdict(button: HTMLButtonElement): Promise<void> {
    const verdict = button.dataset.verdict as Verdict;
    const imageId = button.dataset.imageId!;
    const item = this.state.page?.items.find((i) => i.image_id === imageId);
    if (!item) return;
    const key = itemKey(item.image_id, item.pathology);
    const existing = this.inflight.get(key);
    if (existing) return existing.promise; // double click: one idempotent event
    const eventId = newEventId();
    this.state = applyOptimistic(this.state, item, verdict, eventId);
    this.renderQueue();
    const promise = this.api
      .submitRelabel({
        image_id: item.image_id,
        pathology: item.pathology,
        verdict,
        event_id: eventId,
        reviewer_id: this.options.reviewerId,
      })
      .then(async () => {
        await this.loadQueue(this.state.pathology, this.state.page?.page ?? 1);
      })
      .catch((err: unknown) => {
        const reason = err instanceof ApiError ? err.message : 'network failure; verdict reverted';
        this.state = revert(this.state, item, eventId, reason);
        this.renderQueue();
        this.showToast(reason);
      })
      .finally(() => this.inflight.delete(key));
    this.inflight.set(key, { eventId, promise });
    return promise;
  }

  async retrain(): Promise<JobInfo | null> {
    const panel = this.el('job-panel');
    try {
      const { job_id } = await this.api.retrain(this.state.pathology, this.options.retrainConfig);
      panel.textContent = `${job_id}: queued`;
      const job = await pollJob(
        this.api,
        job_id,
        (update) => {
          panel.textContent = `${update.job_id}: ${update.status}`;
          this.state = { ...this.state, jobStatus: update.status };
        },
        this.options.pollIntervalMs,
      );
      if (job.status === 'failed') {
        panel.innerHTML = `<span class="error">${job.job_id} failed: ${job.error ?? 'unknown'}</span>`;
        return job;
      }
      const latest = await this.api.latestReport();
      if (latest.comparison) this.renderComparison(latest.comparison);
      return job;
    } catch (err) {
      const reason = err instanceof ApiError ? err.message : String(err);
      panel.innerHTML = `<span class="error">${reason}</span>`;
      this.showToast(reason);
      return null;
    }
  }

  renderComparison(comparison: ComparisonDoc): void {
    const rows = comparisonRows(comparison);
    const body = rows
      .map(
        (r) => `
        <tr data-pathology="${r.pathology}">
          <td>${r.pathology}</td>
          <td data-raw="${r.ppvBefore.raw}">${r.ppvBefore.display}</td>
          <td data-raw="${r.ppvAfter.raw}">${r.ppvAfter.display}</td>
          <td data-raw="${r.ppvDelta.raw}">${r.ppvDelta.display}</td>
          <td data-raw="${r.npvBefore.raw}">${r.npvBefore.display}</td>
          <td data-raw="${r.npvAfter.raw}">${r.npvAfter.display}</td>
          <td data-raw="${r.npvDelta.raw}">${r.npvDelta.display}</td>
        </tr>`,
      )
      .join('');
    this.el('comparison').innerHTML = `
      <table class="comparison" data-role="comparison-table">
        <thead>
          <tr>
            <th>Pathology</th>
            <th>PPV before</th><th>PPV after</th><th>&Delta;PPV</th>
            <th>NPV before</th><th>NPV after</th><th>&Delta;NPV</th>
          </tr>
        </thead>
        <tbody>${body}</tbody>
      </table>
      <p data-role="ttest-ppv">${tTestSummary(comparison, 'ppv')}</p>
      <p data-role="ttest-npv">${tTestSummary(comparison, 'npv')}</p>`;
  }

  showToast(message: string): void {
    const toast = this.el('toast');
    toast.textContent = message;
    toast.hidden = false;
  }
}

export function mountApp(root: HTMLElement, baseUrl = '', options: AppOptions = {}): ReviewApp {
  return new ReviewApp(root, new ApiClient(baseUrl), options);
}
