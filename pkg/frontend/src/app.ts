// Application controller: owns the state, talks to the API, re-renders on
// every change. Keyboard-first: review throughput is the point.

import { ApiConflict, ApiFailure, ReviewApi } from "./api";
import {
  AppState,
  initialState,
  isLegal,
  neighborId,
  withConflict,
  withDetail,
  withError,
  withPending,
  withQueue,
} from "./state";
import type { ActionName } from "./state";
import type { Decision, ItemDetail } from "./types";
import { Controller, renderDetail, renderQueue } from "./views";

export class App implements Controller {
  state: AppState = initialState();

  constructor(
    readonly api: ReviewApi,
    readonly queueRoot: HTMLElement,
    readonly detailRoot: HTMLElement,
  ) {}

  render(): void {
    renderQueue(this.queueRoot, this.state, this);
    renderDetail(this.detailRoot, this.state, this, this.api);
  }

  private set(next: AppState): void {
    this.state = next;
    this.render();
  }

  async loadQueue(): Promise<void> {
    const doc = await this.api.queue();
    this.set(withQueue(this.state, doc.items));
  }

  async openItem(id: string): Promise<void> {
    try {
      const detail = await this.api.item(id);
      this.set(withDetail(this.state, detail));
    } catch (err) {
      this.set(withError(this.state, String(err)));
    }
  }

  reloadCurrent(): void {
    if (this.state.current) void this.openItem(this.state.current.id);
  }

  setFilters(state: string, bin: string): void {
    this.set({ ...this.state, filters: { state: state as never, bin } });
  }

  private async mutate(action: ActionName, send: () => Promise<ItemDetail>): Promise<void> {
    const item = this.state.current;
    if (!item) return;
    if (!isLegal(item.state, action)) {
      this.set(withError(this.state, `${action} is not legal while ${item.state}`));
      return;
    }
    this.set(withPending(this.state, item.id, action));
    try {
      const detail = await send();
      this.set(withDetail(this.state, detail));
      await this.loadQueue();
    } catch (err) {
      if (err instanceof ApiConflict) {
        this.set(withConflict(this.state, err.message));
      } else if (err instanceof ApiFailure) {
        this.set(withError(this.state, err.message));
      } else {
        this.set(withError(this.state, String(err)));
      }
    }
  }

  runInitial(): void {
    void this.mutate("run_initial", () => this.api.run(this.state.current!.id));
  }

  refine(): void {
    void this.mutate("refine", () => this.api.refine(this.state.current!.id));
  }

  private decide(action: ActionName, decision: Decision): void {
    const item = this.state.current;
    if (!item) return;
    void this.mutate(action, () => this.api.decide(item.id, decision, item.version));
  }

  markUnoccluded(): void {
    this.decide("mark_unoccluded", { kind: "mark_unoccluded" });
  }

  markFailed(): void {
    this.decide("mark_failed", { kind: "mark_failed" });
  }

  selectVariant(variantId: string): void {
    this.decide("select_variant", { kind: "select", variant: variantId });
  }

  selectVariantByIndex(index: number): void {
    const item = this.state.current;
    if (!item || item.state !== "variants_ready") return;
    const ordered = [...item.variants].sort(
      (a, b) => a.seed_index - b.seed_index || a.strength - b.strength,
    );
    if (index >= 0 && index < ordered.length) this.selectVariant(ordered[index].id);
  }

  annotate(): void {
    void this.mutate("annotate", () => this.api.annotate(this.state.current!.id));
  }

  openOrderEditor(): void {
    const item = this.state.current;
    if (!item || item.state === "annotated") return;
    this.set({ ...this.state, orderDraft: item.occluders.map((o) => o.id) });
  }

  toggleOrderOccluder(instanceId: string): void {
    const draft = this.state.orderDraft;
    if (!draft) return;
    const next = draft.includes(instanceId)
      ? draft.filter((i) => i !== instanceId)
      : [...draft, instanceId];
    this.set({ ...this.state, orderDraft: next });
  }

  submitOrder(): void {
    const item = this.state.current;
    const draft = this.state.orderDraft;
    if (!item || !draft) return;
    void this.mutate("edit_order", () => this.api.correctOrder(item.id, draft, item.version));
  }

  moveSelection(offset: number): void {
    const id = neighborId(this.state, offset);
    if (id) void this.openItem(id);
  }

  handleKey(key: string): void {
    if (key === "j" || key === "ArrowDown") this.moveSelection(1);
    else if (key === "k" || key === "ArrowUp") this.moveSelection(-1);
    else if (key === "r") this.runInitial();
    else if (key === "e") this.refine();
    else if (key === "u") this.markUnoccluded();
    else if (key === "f") this.markFailed();
    else if (key === "a") this.annotate();
    else if (key === "o") this.openOrderEditor();
    else if (/^[1-9]$/.test(key)) this.selectVariantByIndex(Number(key) - 1);
  }

  bindKeyboard(target: Document): void {
    target.addEventListener("keydown", (ev) => {
      const active = target.activeElement;
      if (active && (active.tagName === "INPUT" || active.tagName === "SELECT")) return;
      this.handleKey((ev as KeyboardEvent).key);
    });
  }
}
