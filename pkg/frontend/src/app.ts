/** DOM wiring: binds the session state machine to the page. */

import { ServiceClient } from "./api.js";
import {
  renderQueue,
  renderSearchResults,
  renderStaged,
  renderStats,
  renderSuggestions,
} from "./render.js";
import { ReviewSession } from "./session.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

const client = new ServiceClient("", (url, init) => fetch(url, init));
const actor = `coder-${Math.random().toString(36).slice(2, 8)}`;
const session = new ReviewSession(client, actor);

const queueList = el<HTMLUListElement>("queue");
const bannerBox = el<HTMLDivElement>("banner");
const diagnosisBox = el<HTMLTextAreaElement>("diagnosis");
const assessmentBox = el<HTMLTextAreaElement>("assessment");
const suggestButton = el<HTMLButtonElement>("suggest");
const suggestionList = el<HTMLUListElement>("suggestions");
const searchBox = el<HTMLInputElement>("search");
const searchList = el<HTMLUListElement>("search-results");
const stagedList = el<HTMLUListElement>("staged");
const emptyConfirm = el<HTMLInputElement>("empty-confirm");
const finalizeButton = el<HTMLButtonElement>("finalize");
const statsLine = el<HTMLSpanElement>("stats");

let lastSearch: Map<string, string> = new Map();

function redraw(): void {
  queueList.innerHTML = renderQueue(session.pending, session.currentRecordId);
  suggestionList.innerHTML = renderSuggestions(session.suggestions, session.staged);
  stagedList.innerHTML = renderStaged(session.staged);
  statsLine.textContent = renderStats(session);
  bannerBox.textContent = session.banner ?? "";
  bannerBox.hidden = session.banner === null;
  finalizeButton.disabled = !session.canFinalize(emptyConfirm.checked);
  const open = session.currentRecordId !== null;
  suggestButton.disabled = !open;
  searchBox.disabled = !open;
}

queueList.addEventListener("click", (event) => {
  const item = (event.target as HTMLElement).closest("li[data-record]");
  if (item === null) return;
  session.openRecord(item.getAttribute("data-record")!);
  diagnosisBox.value = "";
  assessmentBox.value = "";
  searchList.innerHTML = "";
  redraw();
});

suggestButton.addEventListener("click", () => {
  session.setSection("diagnosis", diagnosisBox.value);
  session.setSection("assessment", assessmentBox.value);
  session
    .fetchSuggestions()
    .then(redraw)
    .catch(() => {
      session.banner = "suggestion request failed: retry";
      redraw();
    });
});

suggestionList.addEventListener("click", (event) => {
  const button = (event.target as HTMLElement).closest("button[data-act]");
  if (button === null) return;
  const act = button.getAttribute("data-act");
  const code = button.getAttribute("data-code")!;
  if (act === "accept" || act === "reject") {
    session.toggleDecision(code, act);
    redraw();
  }
});

let searchTimer: ReturnType<typeof setTimeout> | undefined;
searchBox.addEventListener("input", () => {
  clearTimeout(searchTimer);
  const query = searchBox.value.trim();
  if (query === "") {
    searchList.innerHTML = "";
    return;
  }
  searchTimer = setTimeout(() => {
    client
      .search(query)
      .then((results) => {
        lastSearch = new Map(results.map((r) => [r.code, r.term]));
        searchList.innerHTML = renderSearchResults(results);
      })
      .catch(() => {
        session.banner = "search failed: retry";
        redraw();
      });
  }, 200);
});

searchList.addEventListener("click", (event) => {
  const button = (event.target as HTMLElement).closest("button[data-act=augment]");
  if (button === null) return;
  const code = button.getAttribute("data-code")!;
  session.stageAugment({ code, term: lastSearch.get(code) ?? "" });
  redraw();
});

stagedList.addEventListener("click", (event) => {
  const button = (event.target as HTMLElement).closest("button[data-act=unstage]");
  if (button === null) return;
  session.unstage(button.getAttribute("data-code")!);
  redraw();
});

emptyConfirm.addEventListener("change", redraw);

finalizeButton.addEventListener("click", () => {
  finalizeButton.disabled = true;
  session
    .finalize(emptyConfirm.checked)
    .then(() => {
      emptyConfirm.checked = false;
      searchList.innerHTML = "";
      return session.loadQueue();
    })
    .catch(() => {
      // staged decisions survive; the banner invites a retry
    })
    .then(redraw);
});

session.loadQueue().then(redraw);
