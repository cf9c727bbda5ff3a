/**
 * Pure HTML builders. app.ts injects these strings into the page, and the
 * tests assert on them directly, so what is tested is exactly what renders.
 */

import type { RecordRow, SearchResult, Suggestion } from "./api.js";
import type { ReviewSession, StagedDecision } from "./session.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Index of the threshold divider: right after the last flagged suggestion. */
export function dividerIndex(suggestions: Suggestion[]): number {
  return suggestions.filter((s) => s.above_threshold).length;
}

/**
 * Suggestion rows in the exact order the service returned them (no client
 * re-sorting), with one divider row separating above-threshold suggestions
 * from the rest.
 */
export function renderSuggestions(
  suggestions: Suggestion[],
  staged: StagedDecision[],
): string {
  if (suggestions.length === 0) {
    return '<li class="empty">no suggestions</li>';
  }
  const stagedByCode = new Map(staged.map((d) => [d.code, d.action]));
  const rows = suggestions.map((s) => {
    const action = stagedByCode.get(s.code);
    const mark = action === undefined ? "" : ` staged-${action}`;
    return (
      `<li class="suggestion${mark}" data-code="${escapeHtml(s.code)}">` +
      `<span class="prob">${(s.probability * 100).toFixed(1)}%</span> ` +
      `<span class="code">${escapeHtml(s.code)}</span> ` +
      `<span class="term">${escapeHtml(s.term)}</span> ` +
      `<button data-act="accept" data-code="${escapeHtml(s.code)}">accept</button>` +
      `<button data-act="reject" data-code="${escapeHtml(s.code)}">reject</button>` +
      `</li>`
    );
  });
  const divider = '<li class="threshold-divider" role="separator">threshold</li>';
  rows.splice(dividerIndex(suggestions), 0, divider);
  return rows.join("\n");
}

export function renderQueue(pending: RecordRow[], currentId: string | null): string {
  if (pending.length === 0) {
    return '<li class="empty">queue is empty</li>';
  }
  return pending
    .map((r) => {
      const current = r.record_id === currentId ? ' class="current"' : "";
      return (
        `<li${current} data-record="${escapeHtml(r.record_id)}">` +
        `${escapeHtml(r.record_id)} (${r.codes.length} coded)</li>`
      );
    })
    .join("\n");
}

export function renderSearchResults(results: SearchResult[]): string {
  if (results.length === 0) {
    return '<li class="empty">no matches</li>';
  }
  return results
    .map(
      (r) =>
        `<li data-code="${escapeHtml(r.code)}">` +
        `<span class="code">${escapeHtml(r.code)}</span> ` +
        `<span class="term">${escapeHtml(r.term)}</span> ` +
        `<button data-act="augment" data-code="${escapeHtml(r.code)}">augment</button></li>`,
    )
    .join("\n");
}

export function renderStaged(staged: StagedDecision[]): string {
  if (staged.length === 0) {
    return '<li class="empty">nothing staged</li>';
  }
  return staged
    .map(
      (d) =>
        `<li data-code="${escapeHtml(d.code)}">${d.action} ${escapeHtml(d.code)} ` +
        `<button data-act="unstage" data-code="${escapeHtml(d.code)}">×</button></li>`,
    )
    .join("\n");
}

export function renderStats(session: ReviewSession): string {
  const rate = session.acceptanceRate();
  const ratePart = rate === null ? "–" : `${(rate * 100).toFixed(0)}%`;
  return (
    `${session.stats.recordsFinalized} finalized · ` +
    `acceptance rate ${ratePart}`
  );
}
