// DOM glue: renders the store into a container and forwards events back.
// All state lives in the store; this layer is replaceable markup.

import { renderChart } from "./curves.js";
import type { ConsoleStore, HistoryRow } from "./store.js";

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function bannerHtml(store: ConsoleStore): string {
  if (store.banner === null) return "";
  return (
    `<div class="banner" role="alert">${escapeHtml(store.banner)} ` +
    `<button type="button" data-action="retry">retry</button></div>`
  );
}

function casesHtml(store: ConsoleStore): string {
  const rows = store.cases
    .map((info) => {
      const active = info.case_id === store.caseId ? " active" : "";
      const truth = info.has_ground_truth ? "with ground truth" : "prediction only";
      return (
        `<li class="case-row${active}">` +
        `<button type="button" data-action="open" data-case="${escapeHtml(info.case_id)}">` +
        `${escapeHtml(info.case_id)}</button>` +
        `<span class="case-meta">${info.image_shape.join("×")} image, ` +
        `${info.prescription_dose} Gy, ${truth}</span></li>`
      );
    })
    .join("");
  return `<section class="cases"><h2>cases</h2><ul>${rows}</ul></section>`;
}

function chartsHtml(store: ConsoleStore): string {
  if (store.sessionId === null) {
    return `<section class="charts"><p class="note">select a case to view its CDVH panel</p></section>`;
  }
  const figures = store.charts().map(renderChart).join("");
  return `<section class="charts">${figures}</section>`;
}

function historyRow(row: HistoryRow, hasTruth: boolean): string {
  const label = row.instruction === "" ? "(initial prediction)" : escapeHtml(row.instruction);
  const mse = hasTruth && row.mse !== null ? row.mse.toPrecision(6) : "";
  const status = row.status === "failed" ? `failed: ${escapeHtml(row.detail)}` : escapeHtml(row.detail);
  return (
    `<tr class="history-${row.status}"><td>${escapeHtml(row.at)}</td>` +
    `<td>${label}</td><td>${mse}</td><td>${status}</td></tr>`
  );
}

function panelHtml(store: ConsoleStore): string {
  if (store.sessionId === null) return "";
  const disabled = store.busy ? " disabled" : "";
  const hasTruth = store.mse !== null;
  const rows = store.history.map((row) => historyRow(row, hasTruth)).join("");
  const warnings = store.warnings.map((w) => `<li class="warning">${escapeHtml(w)}</li>`).join("");
  return (
    `<section class="instruct">` +
    `<form data-action="instruct">` +
    `<input name="instruction" placeholder="instruction, e.g. boost_ptv" autocomplete="off"${disabled}>` +
    `<button type="submit"${disabled}>re-predict</button></form>` +
    (warnings === "" ? "" : `<ul class="warnings">${warnings}</ul>`) +
    `<table class="history"><thead><tr><th>when</th><th>instruction</th>` +
    `<th>mse</th><th>notes</th></tr></thead><tbody>${rows}</tbody></table></section>`
  );
}

export function view(store: ConsoleStore): string {
  return (
    `<header><h1>cdvh console</h1></header>` +
    bannerHtml(store) +
    `<main>${casesHtml(store)}<div class="panel">${chartsHtml(store)}${panelHtml(store)}</div></main>`
  );
}

function wire(root: HTMLElement, store: ConsoleStore): void {
  root.querySelector<HTMLButtonElement>('[data-action="retry"]')?.addEventListener("click", () => {
    void store.loadCases();
  });
  for (const button of root.querySelectorAll<HTMLButtonElement>('[data-action="open"]')) {
    button.addEventListener("click", () => {
      const caseId = button.dataset.case ?? "";
      void store.openCase(caseId).then(() => {
        if (store.sessionId !== null) location.hash = store.sessionId;
      });
    });
  }
  root.querySelector<HTMLFormElement>('[data-action="instruct"]')?.addEventListener("submit", (event) => {
    event.preventDefault();
    const input = root.querySelector<HTMLInputElement>('input[name="instruction"]');
    void store.submitInstruction(input?.value ?? "");
  });
}

export function mount(root: HTMLElement, store: ConsoleStore): void {
  const render = () => {
    root.innerHTML = view(store);
    wire(root, store);
  };
  store.subscribe(render);
  render();
}
