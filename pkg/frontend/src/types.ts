// Shapes of the review-service JSON responses. The UI renders only what the
// server returns and never fabricates state locally.

export type ItemState =
  | "pending"
  | "unoccluded"
  | "failed"
  | "initial"
  | "variants_ready"
  | "selected"
  | "annotated";

export interface ItemSummary {
  id: string;
  state: ItemState;
  version: number;
  category: string | null;
  occlusion_pct: number | null;
  occluder_count: number;
  variant_count: number;
  flagged: string | null;
  image: string; // blob hash
  modal: string; // blob hash
}

export interface VariantInfo {
  id: string;
  seed_index: number;
  seed: number;
  strength: number;
  rgba: string;
  mask: string;
}

export interface MaskRef {
  id: string;
  mask: string;
}

export interface ItemDetail extends ItemSummary {
  occluders: MaskRef[];
  instances: MaskRef[];
  initial: { rgba: string | null; mask: string | null };
  run_attempts: number;
  variants: VariantInfo[];
  selection: string | null;
  caption: string | null;
  fine_mask: string | null;
  history: number[];
}

export interface QueueResponse {
  items: ItemSummary[];
}

export type Decision =
  | { kind: "mark_unoccluded" }
  | { kind: "mark_failed"; reason?: string }
  | { kind: "select"; variant: string };

export interface ApiError {
  status: number;
  message: string;
  currentVersion?: number;
}
