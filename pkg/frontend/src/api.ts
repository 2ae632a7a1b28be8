/** Typed client for the review service. All numbers shown in the UI come
 *  straight from these payloads; the client never recomputes statistics. */

export interface RunSummary {
  run_id: string;
  status: string;
  iterations_completed: number;
  pending_reviews: number;
}

export interface IterationRow {
  index: number;
  new_confounders: string[];
  validated_total: string[];
  strata: string[];
  mean_ci_width: number | null;
  stable_count: number;
  unstable_count: number;
}

export interface RunReport {
  run_id: string;
  status: string;
  iterations?: IterationRow[];
  validated?: string[];
  termination_reason?: string | null;
}

export interface EvidenceRef {
  chunk_id: string;
  source: string;
  provenance: "rag" | "tool";
  snippet: string;
}

export interface CandidateView {
  covariate: string;
  vote_count: number;
  rationales: string[];
  evidence: EvidenceRef[];
}

export interface PendingItem {
  item_id: string;
  run_id: string;
  iteration: number;
  rework: number;
  status: string;
  candidates: { confounders: CandidateView[] };
}

export type Verdict = "accept" | "reject";

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

/** The decision was already recorded by someone else (HTTP 409). */
export class ConflictError extends ApiError {
  constructor(message: string) {
    super(message, 409);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly base: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(`${this.base}${path}`, init);
    if (resp.status === 409) {
      throw new ConflictError(await resp.text());
    }
    if (!resp.ok) {
      throw new ApiError(`${resp.status} on ${path}: ${await resp.text()}`, resp.status);
    }
    return (await resp.json()) as T;
  }

  listRuns(): Promise<RunSummary[]> {
    return this.request<RunSummary[]>("/runs");
  }

  getRun(runId: string): Promise<RunReport> {
    return this.request<RunReport>(`/runs/${encodeURIComponent(runId)}`);
  }

  pendingReviews(runId: string): Promise<PendingItem[]> {
    return this.request<PendingItem[]>(`/runs/${encodeURIComponent(runId)}/reviews/pending`);
  }

  submitDecision(
    runId: string,
    itemId: string,
    decisions: Record<string, Verdict>,
    feedback?: string,
  ): Promise<{ item_id: string; status: string }> {
    return this.request(`/runs/${encodeURIComponent(runId)}/reviews/${encodeURIComponent(itemId)}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(feedback ? { decisions, feedback } : { decisions }),
    });
  }

  trace(runId: string, iteration: number): Promise<unknown[]> {
    return this.request(`/runs/${encodeURIComponent(runId)}/trace/${iteration}`);
  }
}
