/** Pure view models and HTML renderers.
 *
 * Everything rendered traces to an API field; the only client-side
 * computation is formatting. Keeping these as pure string builders makes
 * them testable without a DOM.
 */

import type { IterationRow, PendingItem, RunReport, RunSummary, Verdict } from "./api.js";
import type { Point } from "./chart.js";
import { lineChartSvg } from "./chart.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function formatWidth(width: number | null): string {
  return width === null ? "–" : width.toFixed(4);
}

/** Chart points: iterations that ran the bootstrap, in index order. */
export function chartPoints(report: RunReport): Point[] {
  return (report.iterations ?? [])
    .filter((row): row is IterationRow & { mean_ci_width: number } => row.mean_ci_width !== null)
    .map((row) => ({ x: row.index, y: row.mean_ci_width }));
}

export interface DecisionState {
  decisions: Record<string, Verdict>;
  feedback: string;
}

/** Submit is enabled only when every candidate has a decision. */
export function submitEnabled(item: PendingItem, state: DecisionState): boolean {
  return item.candidates.confounders.every((c) => state.decisions[c.covariate] !== undefined);
}

export function renderRunsPage(runs: RunSummary[]): string {
  if (runs.length === 0) {
    return `<section class="empty">No runs yet. Start one with <code>confloop serve</code>.</section>`;
  }
  const rows = runs
    .map((run) => {
      const badge = run.pending_reviews > 0
        ? `<a class="badge pending" href="#/runs/${encodeURIComponent(run.run_id)}/review">${run.pending_reviews} pending review${run.pending_reviews > 1 ? "s" : ""}</a>`
        : `<span class="badge">up to date</span>`;
      return `<tr>
        <td><a href="#/runs/${encodeURIComponent(run.run_id)}">${escapeHtml(run.run_id)}</a></td>
        <td class="status status-${escapeHtml(run.status)}">${escapeHtml(run.status)}</td>
        <td>${run.iterations_completed}</td>
        <td>${badge}</td>
      </tr>`;
    })
    .join("");
  return `<section>
    <h2>Runs</h2>
    <table class="runs">
      <thead><tr><th>run</th><th>status</th><th>iterations</th><th>review</th></tr></thead>
      <tbody>${rows}</tbody>
    </table>
  </section>`;
}

function iterationCard(row: IterationRow): string {
  const names = row.new_confounders.length > 0
    ? row.new_confounders.map(escapeHtml).join(", ")
    : "<em>baseline</em>";
  return `<div class="card">
    <h4>iteration ${row.index}</h4>
    <dl>
      <dt>confounders</dt><dd>${names}</dd>
      <dt>mean CI width</dt><dd>${formatWidth(row.mean_ci_width)}</dd>
      <dt>stable / unstable</dt><dd>${row.stable_count} / ${row.unstable_count}</dd>
      <dt>strata</dt><dd>${row.strata.length}</dd>
    </dl>
  </div>`;
}

export function renderRunPage(report: RunReport, pendingCount: number): string {
  const rows = report.iterations ?? [];
  const cards = rows.map(iterationCard).join("");
  const chart = lineChartSvg(chartPoints(report), { xLabel: "iteration", yLabel: "mean CI width" });
  const pendingBanner = pendingCount > 0
    ? `<a class="banner review" href="#/runs/${encodeURIComponent(report.run_id)}/review">${pendingCount} candidate set${pendingCount > 1 ? "s" : ""} awaiting review →</a>`
    : "";
  const termination = report.termination_reason
    ? `<p class="termination">terminated: <strong>${escapeHtml(report.termination_reason)}</strong></p>`
    : `<p class="termination running">run in progress…</p>`;
  const validated = (report.validated ?? []).map(escapeHtml).join(", ") || "(none yet)";
  return `<section>
    <h2>${escapeHtml(report.run_id)} <span class="status status-${escapeHtml(report.status)}">${escapeHtml(report.status)}</span></h2>
    ${pendingBanner}
    <h3>Mean CI width by iteration</h3>
    ${chart}
    ${termination}
    <p>validated confounders: <strong>${validated}</strong></p>
    <div class="cards">${cards}</div>
  </section>`;
}

export function renderReviewPage(items: PendingItem[], state: DecisionState, runId: string): string {
  if (items.length === 0) {
    return `<section class="empty">No pending reviews for ${escapeHtml(runId)}. <a href="#/runs/${encodeURIComponent(runId)}">Back to the run.</a></section>`;
  }
  const item = items[0];
  const candidates = item.candidates.confounders
    .map((c) => {
      const current = state.decisions[c.covariate];
      const evidence = c.evidence
        .map(
          (e) => `<li class="evidence ${e.provenance}">
            <span class="provenance">${e.provenance}</span>
            <span class="source">${escapeHtml(e.source)}:${escapeHtml(e.chunk_id)}</span>
            <blockquote>${escapeHtml(e.snippet)}</blockquote>
          </li>`,
        )
        .join("");
      return `<div class="candidate" data-name="${escapeHtml(c.covariate)}">
        <h4>${escapeHtml(c.covariate)} <span class="votes">${c.vote_count} vote${c.vote_count > 1 ? "s" : ""}</span></h4>
        <p class="rationale">${c.rationales.map(escapeHtml).join("<br>") || "<em>no rationale provided</em>"}</p>
        <ul class="evidence-list">${evidence || "<li class='evidence none'>no retrieved evidence</li>"}</ul>
        <div class="verdict">
          <button class="decide accept ${current === "accept" ? "chosen" : ""}" data-name="${escapeHtml(c.covariate)}" data-verdict="accept">accept</button>
          <button class="decide reject ${current === "reject" ? "chosen" : ""}" data-name="${escapeHtml(c.covariate)}" data-verdict="reject">reject</button>
        </div>
      </div>`;
    })
    .join("");
  const enabled = submitEnabled(item, state);
  return `<section>
    <h2>Review ${escapeHtml(item.item_id)} <span class="meta">iteration ${item.iteration}${item.rework > 0 ? `, rework ${item.rework}` : ""}</span></h2>
    <div class="candidates">${candidates}</div>
    <label class="feedback">Feedback to the agent (used when everything is rejected)
      <textarea id="feedback" rows="2">${escapeHtml(state.feedback)}</textarea>
    </label>
    <button id="submit" class="submit" ${enabled ? "" : "disabled"} data-item="${escapeHtml(item.item_id)}">Submit decisions</button>
  </section>`;
}

export function renderErrorBanner(message: string): string {
  return `<div class="banner error">${escapeHtml(message)} <button id="retry">retry</button></div>`;
}

export function renderConflictBanner(): string {
  return `<div class="banner conflict">This item was already decided elsewhere. <button id="reload">reload</button></div>`;
}
