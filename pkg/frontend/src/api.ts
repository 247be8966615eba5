/**
 * Typed client for the review service HTTP API.
 *
 * Every payload mirrors the server JSON exactly; no field is renamed or
 * recomputed on the client side.
 */

export interface PathologyInfo {
  index: number;
  name: string;
  failed: number;
}

export type Verdict = 'confirm-FP' | 'confirm-FN' | 'baseline-correct';

export interface QueueItem {
  image_id: string;
  pathology: string;
  probability: number;
  decision: string;
  truth: string;
  cell: string;
  verdict: Verdict | null;
  image_url: string;
}

export interface FailuresPage {
  pathology: string;
  page: number;
  page_size: number;
  total: number;
  items: QueueItem[];
}

export interface JobInfo {
  job_id: string;
  target: string;
  status: 'queued' | 'running' | 'done' | 'failed';
  error?: string;
  result?: { checkpoint_ids: Record<string, string> };
}

export interface ReportRow {
  name: string;
  counts: { tp: number; fp: number; tn: number; fn: number };
  ppv: number;
  npv: number;
  ppv_undefined: boolean;
  npv_undefined: boolean;
}

export interface DeltaRow {
  pathology: string;
  ppv_before: number;
  ppv_after: number;
  ppv_delta: number;
  npv_before: number;
  npv_after: number;
  npv_delta: number;
  ppv_excluded: boolean;
  npv_excluded: boolean;
}

export interface TTestEntry {
  pathologies: string[];
  excluded: string[];
  error?: string;
  result: {
    t_statistic: number;
    degrees_of_freedom: number;
    p_value: number;
    n_pairs: number;
    degenerate: boolean;
  } | null;
}

export interface ComparisonDoc {
  before: { rows: ReportRow[] };
  after: { rows: ReportRow[] };
  deltas: DeltaRow[];
  t_tests: { ppv: TTestEntry; npv: TTestEntry };
}

export interface LatestReport {
  report: { rows: ReportRow[] };
  comparison: ComparisonDoc | null;
  job_id: string | null;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(res: Response): Promise<ApiError> {
  let code = 'http_error';
  let message = `${res.status} ${res.statusText}`;
  try {
    const body = await res.json();
    if (body && typeof body === 'object') {
      code = body.code ?? code;
      message = body.message ?? message;
    }
  } catch {
    /* non-JSON error body; keep the status line */
  }
  return new ApiError(res.status, code, message);
}

export class ApiClient {
  constructor(private baseUrl = '') {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.baseUrl + path, init);
    if (!res.ok) throw await parseError(res);
    return (await res.json()) as T;
  }

  pathologies(): Promise<{ pathologies: PathologyInfo[] }> {
    return this.request('/pathologies');
  }

  failures(pathology: string, page: number, pageSize: number): Promise<FailuresPage> {
    const params = new URLSearchParams({
      pathology,
      page: String(page),
      page_size: String(pageSize),
    });
    return this.request(`/failures?${params}`);
  }

  submitRelabel(body: {
    image_id: string;
    pathology: string;
    verdict: Verdict;
    event_id: string;
    reviewer_id?: string;
  }): Promise<{ event_id: string }> {
    return this.request('/relabels', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  retrain(pathology: string, config?: Record<string, unknown>): Promise<{ job_id: string }> {
    return this.request('/retrain', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ pathology, config }),
    });
  }

  job(jobId: string): Promise<JobInfo> {
    return this.request(`/jobs/${jobId}`);
  }

  latestReport(): Promise<LatestReport> {
    return this.request('/reports/latest');
  }
}

/**
 * Poll a job until it reaches a terminal state. Transient fetch failures
 * (e.g. a service restart mid-poll) do not abort the loop; the next tick
 * resumes from GET /jobs/{id}.
 */
export async function pollJob(
  api: ApiClient,
  jobId: string,
  onUpdate: (job: JobInfo) => void,
  intervalMs = 1000,
  maxTicks = 600,
): Promise<JobInfo> {
  for (let tick = 0; tick < maxTicks; tick++) {
    try {
      const job = await api.job(jobId);
      onUpdate(job);
      if (job.status === 'done' || job.status === 'failed') return job;
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) throw err;
      // connection refused / 5xx: keep polling
    }
    await new Promise((resolve) => setTimeout(resolve, intervalMs));
  }
  throw new Error(`job ${jobId} did not finish within ${maxTicks} polls`);
}
