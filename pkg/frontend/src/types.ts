/** Shared types mirroring the annotation service's JSON payloads. */

export interface PyramidLevel {
  level: number;
  width: number;
  height: number;
}

export interface PyramidMeta {
  tile_size: number;
  levels: PyramidLevel[];
  width: number;
  height: number;
}

export interface SlideMeta {
  slide_id: string;
  width: number;
  height: number;
  mpp: number;
  pyramid?: PyramidMeta;
}

export interface SlidesResponse {
  slides: SlideMeta[];
  class_names: string[];
  label_version: number;
}

export interface CellFeature {
  type: "Feature";
  geometry: { type: "Polygon"; coordinates: number[][][] };
  properties: {
    id: string;
    class: string | null;
    prob: number | null;
    centroid: [number, number]; // [x, y]
    area: number;
  };
}

export interface CellCollection {
  type: "FeatureCollection";
  features: CellFeature[];
  label_version: number;
}

export interface RelabelResponse {
  no_op: boolean;
  event?: {
    event_id: number;
    cell_id: string;
    old_label: number | null;
    new_label: number;
    actor: string;
    timestamp: string;
  };
  label_version: number;
}

export type JobState = "queued" | "running" | "done" | "failed";

export interface TrainJob {
  job_id: string;
  state: JobState;
  config: Record<string, unknown>;
  result: {
    val_auroc: number;
    val_macro_f1: number;
    best_epoch?: number;
    checkpoint?: string;
    label_version?: number;
  } | null;
  error: string | null;
}

/** Viewport rectangle in slide pixel coordinates (rows/cols, half-open). */
export interface Bbox {
  r0: number;
  c0: number;
  r1: number;
  c1: number;
}
