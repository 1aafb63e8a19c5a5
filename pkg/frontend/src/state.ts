// Client-side mirror of the service state machine plus the reviewing
// session's transient state. The mirror exists so the UI only ever offers
// actions the server would accept; the server remains the authority.

import type { ItemDetail, ItemState, ItemSummary } from "./types";

export type ActionName =
  | "run_initial"
  | "refine"
  | "mark_unoccluded"
  | "mark_failed"
  | "select_variant"
  | "annotate"
  | "edit_order";

const TRANSITIONS: Record<ItemState, ActionName[]> = {
  pending: ["run_initial", "mark_unoccluded", "mark_failed", "edit_order"],
  initial: ["refine", "mark_failed", "edit_order"],
  variants_ready: ["select_variant", "mark_failed", "edit_order"],
  selected: ["annotate", "edit_order"],
  annotated: [],
  unoccluded: [],
  failed: [],
};

export function legalActions(state: ItemState): ActionName[] {
  return TRANSITIONS[state] ?? [];
}

export function isLegal(state: ItemState, action: ActionName): boolean {
  return legalActions(state).includes(action);
}

// occlusion bins shared with the evaluation protocol
export const OCCLUSION_BINS = [
  { label: "0-10%", lo: 0.0, hi: 0.1 },
  { label: "10-50%", lo: 0.1, hi: 0.5 },
  { label: "50-90%", lo: 0.5, hi: 0.9 },
  { label: "90-100%", lo: 0.9, hi: 1.0 + 1e-12 },
];

export function occlusionBin(pct: number | null): string | null {
  if (pct === null) return null;
  for (const bin of OCCLUSION_BINS) {
    if (pct >= bin.lo && pct < bin.hi) return bin.label;
  }
  return pct >= 0.9 ? "90-100%" : null;
}

export interface QueueFilters {
  state: ItemState | "";
  bin: string | "";
}

export function applyFilters(items: ItemSummary[], filters: QueueFilters): ItemSummary[] {
  return items.filter((item) => {
    if (filters.state && item.state !== filters.state) return false;
    if (filters.bin && occlusionBin(item.occlusion_pct) !== filters.bin) return false;
    return true;
  });
}

export interface AppState {
  items: ItemSummary[];
  filters: QueueFilters;
  current: ItemDetail | null;
  currentIndex: number;
  // an optimistic in-flight action; a hard refresh loses nothing but this
  pending: { itemId: string; action: ActionName } | null;
  conflict: string | null; // reload prompt text after a 409
  error: string | null;
  orderDraft: string[] | null; // unsubmitted occluder order, ids
}

export function initialState(): AppState {
  return {
    items: [],
    filters: { state: "", bin: "" },
    current: null,
    currentIndex: -1,
    pending: null,
    conflict: null,
    error: null,
    orderDraft: null,
  };
}

// Pure update helpers; rendering reads only this state plus server data.

export function withQueue(state: AppState, items: ItemSummary[]): AppState {
  return { ...state, items };
}

export function withDetail(state: AppState, detail: ItemDetail): AppState {
  const items = state.items.map((i) =>
    i.id === detail.id ? { ...i, state: detail.state, version: detail.version } : i,
  );
  return { ...state, items, current: detail, pending: null, conflict: null, orderDraft: null };
}

export function withPending(state: AppState, itemId: string, action: ActionName): AppState {
  return { ...state, pending: { itemId, action }, error: null };
}

export function withConflict(state: AppState, message: string): AppState {
  // optimistic assumption failed: roll back the in-flight marker and ask
  // the reviewer to reload the item
  return { ...state, pending: null, conflict: message };
}

export function withError(state: AppState, message: string): AppState {
  return { ...state, pending: null, error: message };
}

export function visibleItems(state: AppState): ItemSummary[] {
  return applyFilters(state.items, state.filters);
}

export function neighborId(state: AppState, offset: number): string | null {
  const visible = visibleItems(state);
  if (!state.current) return visible.length ? visible[0].id : null;
  const idx = visible.findIndex((i) => i.id === state.current!.id);
  if (idx < 0) return visible.length ? visible[0].id : null;
  const next = idx + offset;
  if (next < 0 || next >= visible.length) return null;
  return visible[next].id;
}
