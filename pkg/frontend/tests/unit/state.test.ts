import { describe, expect, it } from "vitest";

import {
  applyFilters,
  initialState,
  isLegal,
  legalActions,
  neighborId,
  occlusionBin,
  withConflict,
  withDetail,
  withError,
  withPending,
  withQueue,
} from "../../src/state";
import { stableColor } from "../../src/overlay";
import type { ItemDetail, ItemSummary } from "../../src/types";

function summary(id: string, state: ItemSummary["state"], pct: number | null = 0.3): ItemSummary {
  return {
    id,
    state,
    version: 0,
    category: null,
    occlusion_pct: pct,
    occluder_count: 1,
    variant_count: 0,
    flagged: null,
    image: "img",
    modal: "mod",
  };
}

function detail(id: string, state: ItemDetail["state"]): ItemDetail {
  return {
    ...summary(id, state),
    occluders: [],
    instances: [],
    initial: { rgba: null, mask: null },
    run_attempts: 0,
    variants: [],
    selection: null,
    caption: null,
    fine_mask: null,
    history: [],
  };
}

describe("legalActions mirrors the service state machine", () => {
  it("pending offers run, unoccluded, failed and order editing", () => {
    expect(new Set(legalActions("pending"))).toEqual(
      new Set(["run_initial", "mark_unoccluded", "mark_failed", "edit_order"]),
    );
  });

  it("initial offers refine and failure", () => {
    expect(new Set(legalActions("initial"))).toEqual(
      new Set(["refine", "mark_failed", "edit_order"]),
    );
  });

  it("variants_ready offers selection and failure", () => {
    expect(new Set(legalActions("variants_ready"))).toEqual(
      new Set(["select_variant", "mark_failed", "edit_order"]),
    );
  });

  it("selected offers only annotation (plus order correction)", () => {
    expect(new Set(legalActions("selected"))).toEqual(new Set(["annotate", "edit_order"]));
    expect(isLegal("selected", "mark_unoccluded")).toBe(false);
  });

  it("terminal states offer nothing", () => {
    for (const s of ["annotated", "unoccluded", "failed"] as const) {
      expect(legalActions(s)).toEqual([]);
    }
  });
});

describe("occlusion bins", () => {
  it("uses the protocol bin edges", () => {
    expect(occlusionBin(0.05)).toBe("0-10%");
    expect(occlusionBin(0.1)).toBe("10-50%"); // half-open boundary
    expect(occlusionBin(0.5)).toBe("50-90%");
    expect(occlusionBin(0.9)).toBe("90-100%");
    expect(occlusionBin(1.0)).toBe("90-100%");
    expect(occlusionBin(null)).toBeNull();
  });
});

describe("queue filtering", () => {
  const items = [
    summary("a", "pending", 0.05),
    summary("b", "initial", 0.3),
    summary("c", "pending", 0.95),
  ];

  it("filters by state and bin independently", () => {
    expect(applyFilters(items, { state: "pending", bin: "" }).map((i) => i.id)).toEqual(["a", "c"]);
    expect(applyFilters(items, { state: "", bin: "90-100%" }).map((i) => i.id)).toEqual(["c"]);
    expect(applyFilters(items, { state: "pending", bin: "0-10%" }).map((i) => i.id)).toEqual(["a"]);
  });
});

describe("state transitions are pure and rollback-friendly", () => {
  it("withDetail clears pending, conflict and order draft", () => {
    let s = withQueue(initialState(), [summary("a", "pending")]);
    s = withPending(s, "a", "run_initial");
    s = withConflict(s, "someone else moved it");
    expect(s.pending).toBeNull();
    expect(s.conflict).toMatch(/moved/);
    s = { ...s, orderDraft: ["x"] };
    s = withDetail(s, detail("a", "initial"));
    expect(s.conflict).toBeNull();
    expect(s.orderDraft).toBeNull();
    expect(s.items[0].state).toBe("initial");
  });

  it("withError drops the in-flight marker", () => {
    let s = withPending(initialState(), "a", "refine");
    s = withError(s, "backend exploded");
    expect(s.pending).toBeNull();
    expect(s.error).toMatch(/exploded/);
  });

  it("neighborId walks the filtered queue", () => {
    let s = withQueue(initialState(), [
      summary("a", "pending"),
      summary("b", "pending"),
      summary("c", "failed"),
    ]);
    s = withDetail(s, detail("a", "pending"));
    expect(neighborId(s, 1)).toBe("b");
    s = { ...s, filters: { state: "pending", bin: "" } };
    s = withDetail({ ...s }, detail("b", "pending"));
    expect(neighborId(s, 1)).toBeNull(); // c is filtered out
    expect(neighborId(s, -1)).toBe("a");
  });
});

describe("overlay colors", () => {
  it("are stable per id and distinct across ids", () => {
    const a1 = stableColor("item-a");
    const a2 = stableColor("item-a");
    const b = stableColor("item-b");
    expect(a1).toEqual(a2);
    expect(a1).not.toEqual(b);
  });

  it("stay inside rgb bounds", () => {
    for (const id of ["x", "y", "L00", "s000000000042.L03"]) {
      for (const c of stableColor(id)) {
        expect(c).toBeGreaterThanOrEqual(0);
        expect(c).toBeLessThanOrEqual(255);
      }
    }
  });
});
