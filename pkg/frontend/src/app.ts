/** Hash router, polling, and event wiring. Pages are re-rendered from fresh
 *  API state on every poll tick; the app holds only the in-progress decision
 *  form, so a reload reproduces any finished run exactly. */

import { ApiClient, ConflictError, PendingItem, Verdict } from "./api.js";
import {
  DecisionState,
  renderConflictBanner,
  renderErrorBanner,
  renderReviewPage,
  renderRunPage,
  renderRunsPage,
  submitEnabled,
} from "./views.js";

const POLL_MS = 2000;

type Route =
  | { page: "runs" }
  | { page: "run"; runId: string }
  | { page: "review"; runId: string };

export function parseRoute(hash: string): Route {
  const parts = hash.replace(/^#\/?/, "").split("/").filter(Boolean);
  if (parts[0] === "runs" && parts.length >= 2) {
    const runId = decodeURIComponent(parts[1]);
    return parts[2] === "review" ? { page: "review", runId } : { page: "run", runId };
  }
  return { page: "runs" };
}

export class App {
  private decisionState: DecisionState = { decisions: {}, feedback: "" };
  private decisionItem: string | null = null;
  private banner = "";
  private timer: number | undefined;

  constructor(
    private readonly api: ApiClient,
    private readonly root: HTMLElement,
  ) {}

  start(): void {
    window.addEventListener("hashchange", () => {
      this.banner = "";
      void this.refresh();
    });
    this.timer = window.setInterval(() => void this.refresh(), POLL_MS);
    void this.refresh();
  }

  stop(): void {
    if (this.timer !== undefined) window.clearInterval(this.timer);
  }

  async refresh(): Promise<void> {
    const route = parseRoute(window.location.hash);
    try {
      if (route.page === "runs") {
        const runs = await this.api.listRuns();
        this.render(renderRunsPage(runs));
      } else if (route.page === "run") {
        const [report, pending] = await Promise.all([
          this.api.getRun(route.runId),
          this.api.pendingReviews(route.runId),
        ]);
        this.render(renderRunPage(report, pending.length));
      } else {
        const pending = await this.api.pendingReviews(route.runId);
        this.syncDecisionState(pending);
        this.render(renderReviewPage(pending, this.decisionState, route.runId));
        this.wireReviewHandlers(route.runId, pending);
      }
    } catch (err) {
      this.render(renderErrorBanner(`Review service unreachable: ${String(err)}`));
      const retry = this.root.querySelector<HTMLButtonElement>("#retry");
      retry?.addEventListener("click", () => void this.refresh());
    }
  }

  /** Reset the form when a different item becomes the pending one. */
  private syncDecisionState(pending: PendingItem[]): void {
    const current = pending.length > 0 ? pending[0].item_id : null;
    if (current !== this.decisionItem) {
      this.decisionItem = current;
      this.decisionState = { decisions: {}, feedback: "" };
    }
  }

  private render(html: string): void {
    this.root.innerHTML = this.banner + html;
  }

  private wireReviewHandlers(runId: string, pending: PendingItem[]): void {
    if (pending.length === 0) return;
    const item = pending[0];
    for (const button of this.root.querySelectorAll<HTMLButtonElement>("button.decide")) {
      button.addEventListener("click", () => {
        const name = button.dataset.name as string;
        this.decisionState.decisions[name] = button.dataset.verdict as Verdict;
        this.render(renderReviewPage(pending, this.decisionState, runId));
        this.wireReviewHandlers(runId, pending);
      });
    }
    const feedback = this.root.querySelector<HTMLTextAreaElement>("#feedback");
    feedback?.addEventListener("input", () => {
      this.decisionState.feedback = feedback.value;
    });
    const submit = this.root.querySelector<HTMLButtonElement>("#submit");
    submit?.addEventListener("click", () => void this.submit(runId, item));
  }

  private async submit(runId: string, item: PendingItem): Promise<void> {
    if (!submitEnabled(item, this.decisionState)) return;
    try {
      await this.api.submitDecision(
        runId,
        item.item_id,
        this.decisionState.decisions,
        this.decisionState.feedback || undefined,
      );
      this.banner = "";
      this.decisionItem = null;
    } catch (err) {
      this.banner = err instanceof ConflictError ? renderConflictBanner() : renderErrorBanner(String(err));
    }
    await this.refresh();
    const reload = this.root.querySelector<HTMLButtonElement>("#reload");
    reload?.addEventListener("click", () => {
      this.banner = "";
      this.decisionItem = null;
      void this.refresh();
    });
  }
}
