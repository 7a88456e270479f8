import { ApiClient, ApiError } from './api.js';
import type { AnalysisResult, JobRecord, Region } from './types.js';

// Submit a region and follow the job to completion. Polling backs off
// geometrically and survives transient network loss (failed polls retry;
// only a server-reported job failure ends tracking with an error).

export interface TrackUpdate {
  record: JobRecord;
}

export interface TrackOptions {
  initialDelayMs?: number;
  maxDelayMs?: number;
  backoff?: number;
  sleep?: (ms: number) => Promise<void>;
  onUpdate?: (u: TrackUpdate) => void;
}

const defaultSleep = (ms: number) => new Promise<void>((res) => setTimeout(res, ms));

export class JobFailedError extends Error {
  constructor(readonly record: JobRecord) {
    super(record.error ?? 'analysis job failed');
  }
}

export async function submitAndTrack(
  api: ApiClient,
  slideId: string,
  region: Region | null,
  options: TrackOptions = {},
): Promise<{ record: JobRecord; result: AnalysisResult }> {
  const { job_id } = await api.submitAnalysis(slideId, region);
  return trackJob(api, job_id, options);
}

export async function trackJob(
  api: ApiClient,
  jobId: string,
  options: TrackOptions = {},
): Promise<{ record: JobRecord; result: AnalysisResult }> {
  const sleep = options.sleep ?? defaultSleep;
  const backoff = options.backoff ?? 1.5;
  const maxDelay = options.maxDelayMs ?? 3000;
  let delay = options.initialDelayMs ?? 150;
  for (;;) {
    let record: JobRecord;
    try {
      record = await api.jobStatus(jobId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        throw err;
      }
      // network loss: keep polling
      await sleep(delay);
      delay = Math.min(delay * backoff, maxDelay);
      continue;
    }
    options.onUpdate?.({ record });
    if (record.status === 'done') {
      const result = await api.jobResult(jobId);
      return { record, result };
    }
    if (record.status === 'failed') {
      throw new JobFailedError(record);
    }
    await sleep(delay);
    delay = Math.min(delay * backoff, maxDelay);
  }
}
