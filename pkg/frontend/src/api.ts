import type { AnalysisResult, JobRecord, Region, SlideInfo } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

/** Thin typed wrapper over the server API; fetch is injectable for tests. */
export class ApiClient {
  constructor(
    private readonly base: string = '',
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async json<T>(url: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + url, init);
    const body = await resp.text();
    if (!resp.ok) {
      let message = body;
      try {
        message = (JSON.parse(body) as { error: string }).error;
      } catch {
        // non-JSON error body: keep raw text
      }
      throw new ApiError(resp.status, message);
    }
    return JSON.parse(body) as T;
  }

  listSlides(): Promise<SlideInfo[]> {
    return this.json<SlideInfo[]>('/api/slides');
  }

  slideInfo(id: string): Promise<SlideInfo> {
    return this.json<SlideInfo>(`/api/slides/${id}`);
  }

  tileUrl(slideId: string, level: number, tx: number, ty: number): string {
    return `${this.base}/api/slides/${slideId}/tiles/${level}/${tx}/${ty}`;
  }

  submitAnalysis(slideId: string, region: Region | null, idempotencyKey?: string):
      Promise<{ job_id: string }> {
    const body: Record<string, unknown> = {};
    if (region) body.region = region;
    if (idempotencyKey) body.idempotency_key = idempotencyKey;
    return this.json(`/api/slides/${slideId}/analyze`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  jobStatus(jobId: string): Promise<JobRecord> {
    return this.json<JobRecord>(`/api/jobs/${jobId}`);
  }

  jobResult(jobId: string): Promise<AnalysisResult> {
    return this.json<AnalysisResult>(`/api/jobs/${jobId}/result`);
  }
}
