// DOM rendering for the queue and the item detail view. Rendering is a
// pure function of (app state, server data): handlers dispatch through the
// controller passed in, never mutate state locally.

import type { AppState } from "./state";
import { legalActions, occlusionBin, visibleItems } from "./state";
import { stableColor, drawOverlay } from "./overlay";
import type { ItemDetail, VariantInfo } from "./types";
import type { ReviewApi } from "./api";

export interface Controller {
  openItem(id: string): void;
  runInitial(): void;
  refine(): void;
  markUnoccluded(): void;
  markFailed(): void;
  selectVariant(variantId: string): void;
  annotate(): void;
  openOrderEditor(): void;
  toggleOrderOccluder(instanceId: string): void;
  submitOrder(): void;
  reloadCurrent(): void;
  setFilters(state: string, bin: string): void;
}

const STATE_FILTERS = ["", "pending", "initial", "variants_ready", "selected", "annotated", "unoccluded", "failed"];
const BIN_FILTERS = ["", "0-10%", "10-50%", "50-90%", "90-100%"];

export function renderQueue(root: HTMLElement, state: AppState, ctl: Controller): void {
  const items = visibleItems(state);
  root.innerHTML = "";
  const bar = el("div", "filter-bar");
  bar.appendChild(
    select("state-filter", STATE_FILTERS, state.filters.state, (v) =>
      ctl.setFilters(v, state.filters.bin),
    ),
  );
  bar.appendChild(
    select("bin-filter", BIN_FILTERS, state.filters.bin, (v) =>
      ctl.setFilters(state.filters.state, v),
    ),
  );
  root.appendChild(bar);
  const list = el("ul", "queue-list");
  for (const item of items) {
    const li = el("li", `queue-item state-${item.state}`);
    li.dataset.itemId = item.id;
    if (state.current && state.current.id === item.id) li.classList.add("active");
    const label = el("span", "queue-label");
    label.textContent = `${item.id} · ${item.state} · ${item.occluder_count} occluder(s)`;
    const bin = occlusionBin(item.occlusion_pct);
    if (bin) label.textContent += ` · ${bin}`;
    li.appendChild(label);
    li.addEventListener("click", () => ctl.openItem(item.id));
    list.appendChild(li);
  }
  root.appendChild(list);
}

const ACTION_LABELS: Record<string, string> = {
  run_initial: "Run initial deocclusion (r)",
  refine: "Refine variants (e)",
  mark_unoccluded: "Mark unoccluded (u)",
  mark_failed: "Mark failed (f)",
  annotate: "Annotate (a)",
  edit_order: "Edit occlusion order (o)",
};

export function renderDetail(
  root: HTMLElement,
  state: AppState,
  ctl: Controller,
  api: ReviewApi,
): void {
  root.innerHTML = "";
  const item = state.current;
  if (!item) {
    root.appendChild(text("p", "empty-hint", "Select an item from the queue."));
    return;
  }
  const head = el("div", "detail-head");
  head.appendChild(text("h2", "detail-title", item.id));
  head.appendChild(text("span", `state-badge state-${item.state}`, item.state));
  if (item.flagged) head.appendChild(text("span", "flagged", `flagged: ${item.flagged}`));
  root.appendChild(head);

  if (state.conflict) {
    const prompt = el("div", "conflict-prompt");
    prompt.appendChild(text("span", "conflict-text", `Item changed elsewhere: ${state.conflict}`));
    const reload = text("button", "reload-button", "Reload item");
    reload.addEventListener("click", () => ctl.reloadCurrent());
    prompt.appendChild(reload);
    root.appendChild(prompt);
  }
  if (state.error) root.appendChild(text("div", "error-banner", state.error));

  root.appendChild(renderPanels(item, api));

  if (item.variants.length) {
    root.appendChild(renderVariantGrid(item, ctl, api));
  }

  const actions = el("div", "action-bar");
  for (const action of legalActions(item.state)) {
    if (action === "select_variant") continue; // selection happens on the grid
    const btn = text("button", `action action-${action}`, ACTION_LABELS[action] ?? action);
    btn.dataset.action = action;
    btn.addEventListener("click", () => dispatch(ctl, action));
    actions.appendChild(btn);
  }
  root.appendChild(actions);

  if (item.caption) root.appendChild(text("p", "caption", `caption: ${item.caption}`));

  if (state.orderDraft) {
    root.appendChild(renderOrderEditor(item, state.orderDraft, ctl, api));
  }
}

function dispatch(ctl: Controller, action: string): void {
  if (action === "run_initial") ctl.runInitial();
  else if (action === "refine") ctl.refine();
  else if (action === "mark_unoccluded") ctl.markUnoccluded();
  else if (action === "mark_failed") ctl.markFailed();
  else if (action === "annotate") ctl.annotate();
  else if (action === "edit_order") ctl.openOrderEditor();
}

function renderPanels(item: ItemDetail, api: ReviewApi): HTMLElement {
  const panels = el("div", "panels");
  panels.appendChild(
    imagePanel("scene + modal overlay", api.blobUrl(item.image), [
      { maskUrl: api.blobUrl(item.modal), color: stableColor(item.id) },
      ...item.occluders.map((o) => ({
        maskUrl: api.blobUrl(o.mask),
        color: stableColor(o.id),
      })),
    ]),
  );
  if (item.initial.rgba) {
    panels.appendChild(imagePanel("initial deocclusion", api.blobUrl(item.initial.rgba), []));
  }
  return panels;
}

function imagePanel(
  title: string,
  imageUrl: string,
  layers: { maskUrl: string; color: [number, number, number] }[],
): HTMLElement {
  const panel = el("figure", "panel");
  panel.appendChild(text("figcaption", "panel-title", title));
  const canvas = document.createElement("canvas");
  canvas.className = "panel-canvas";
  panel.appendChild(canvas);
  void drawOverlay(canvas, imageUrl, layers).then((drawn) => {
    if (!drawn) {
      // no 2d context here (tests) or image failed: plain image fallback
      const img = document.createElement("img");
      img.src = imageUrl;
      img.className = "panel-image";
      canvas.replaceWith(img);
    }
  });
  return panel;
}

function renderVariantGrid(item: ItemDetail, ctl: Controller, api: ReviewApi): HTMLElement {
  const grid = el("div", "variant-grid");
  const bySeed = new Map<number, VariantInfo[]>();
  for (const v of item.variants) {
    const row = bySeed.get(v.seed_index) ?? [];
    row.push(v);
    bySeed.set(v.seed_index, row);
  }
  let shortcut = 1;
  for (const [seed, row] of [...bySeed.entries()].sort((a, b) => a[0] - b[0])) {
    const rowEl = el("div", "variant-row");
    rowEl.appendChild(text("span", "variant-seed", `seed ${seed}`));
    for (const v of row.sort((a, b) => a.strength - b.strength)) {
      const cell = el("figure", "variant-cell");
      cell.dataset.variantId = v.id;
      if (item.selection === v.id) cell.classList.add("selected");
      const img = document.createElement("img");
      img.src = api.blobUrl(v.rgba);
      img.className = "variant-image";
      cell.appendChild(img);
      const label = `${shortcut <= 9 ? `[${shortcut}] ` : ""}strength ${v.strength}`;
      cell.appendChild(text("figcaption", "variant-label", label));
      if (item.state === "variants_ready") {
        cell.classList.add("selectable");
        cell.addEventListener("click", () => ctl.selectVariant(v.id));
      }
      rowEl.appendChild(cell);
      shortcut += 1;
    }
    grid.appendChild(rowEl);
  }
  return grid;
}

function renderOrderEditor(
  item: ItemDetail,
  draft: string[],
  ctl: Controller,
  api: ReviewApi,
): HTMLElement {
  const editor = el("div", "order-editor");
  editor.appendChild(text("h3", "order-title", "Occlusion order (nearest first)"));
  const selfId = item.id.split(".").pop() ?? item.id;
  const list = el("ul", "order-list");
  for (const inst of item.instances) {
    if (inst.id === selfId) continue; // a self edge is never legal
    const li = el("li", "order-row");
    li.dataset.instanceId = inst.id;
    const checkbox = document.createElement("input");
    checkbox.type = "checkbox";
    checkbox.checked = draft.includes(inst.id);
    checkbox.addEventListener("change", () => ctl.toggleOrderOccluder(inst.id));
    li.appendChild(checkbox);
    const pos = draft.indexOf(inst.id);
    li.appendChild(
      text("span", "order-label", pos >= 0 ? `${pos + 1}. ${inst.id} occludes this` : inst.id),
    );
    const thumb = document.createElement("img");
    thumb.src = api.blobUrl(inst.mask);
    thumb.className = "order-mask-thumb";
    li.appendChild(thumb);
    list.appendChild(li);
  }
  editor.appendChild(list);
  if (draft.length === 0) {
    editor.appendChild(
      text("p", "order-hint", "No occluders left: consider marking the item unoccluded."),
    );
  }
  const submit = text("button", "order-submit", "Submit corrected order");
  submit.addEventListener("click", () => ctl.submitOrder());
  editor.appendChild(submit);
  return editor;
}

function el(tag: string, className: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  return node;
}

function text(tag: string, className: string, content: string): HTMLElement {
  const node = el(tag, className);
  node.textContent = content;
  return node;
}

function select(
  className: string,
  options: string[],
  value: string,
  onChange: (v: string) => void,
): HTMLElement {
  const node = document.createElement("select");
  node.className = className;
  for (const opt of options) {
    const o = document.createElement("option");
    o.value = opt;
    o.textContent = opt || "(all)";
    if (opt === value) o.selected = true;
    node.appendChild(o);
  }
  node.addEventListener("change", () => onChange(node.value));
  return node;
}
