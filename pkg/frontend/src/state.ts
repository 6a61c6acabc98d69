/** View state and its pure update helpers.
 *
 * The rendered frame is a pure function of (ViewState, last fetched data),
 * so every mutation here returns a new state object and clamps the
 * viewport to the slide bounds.
 */

import type { Bbox, SlideMeta } from "./types.js";

/** Cells are drawn as polygons above this zoom; density markers below. */
export const POLYGON_ZOOM_THRESHOLD = 0.25;
/** Decimation budget requested from the server at overview zoom. */
export const OVERVIEW_MAX_FEATURES = 500;

export interface ViewState {
  slideId: string;
  /** Display scale: slide px -> screen px. Level 0 is scale 1. */
  zoom: number;
  viewport: Bbox;
  classVisibility: Record<string, boolean>;
  selectedCell: string | null;
  minProb: number;
}

export function initialViewState(slide: SlideMeta, classNames: string[]): ViewState {
  const visibility: Record<string, boolean> = {};
  for (const name of classNames) visibility[name] = true;
  return {
    slideId: slide.slide_id,
    zoom: 1.0,
    viewport: { r0: 0, c0: 0, r1: Math.min(slide.height, 1024), c1: Math.min(slide.width, 1024) },
    classVisibility: visibility,
    selectedCell: null,
    minProb: 0,
  };
}

export function clampViewport(bbox: Bbox, slide: SlideMeta): Bbox {
  const height = Math.min(bbox.r1 - bbox.r0, slide.height);
  const width = Math.min(bbox.c1 - bbox.c0, slide.width);
  const r0 = Math.max(0, Math.min(bbox.r0, slide.height - height));
  const c0 = Math.max(0, Math.min(bbox.c0, slide.width - width));
  return { r0, c0, r1: r0 + height, c1: c0 + width };
}

export function pan(state: ViewState, slide: SlideMeta, dRow: number, dCol: number): ViewState {
  const v = state.viewport;
  return {
    ...state,
    viewport: clampViewport(
      { r0: v.r0 + dRow, c0: v.c0 + dCol, r1: v.r1 + dRow, c1: v.c1 + dCol },
      slide,
    ),
  };
}

export function zoomTo(state: ViewState, slide: SlideMeta, zoom: number): ViewState {
  const v = state.viewport;
  const centerR = (v.r0 + v.r1) / 2;
  const centerC = (v.c0 + v.c1) / 2;
  const clamped = Math.max(1 / 64, Math.min(zoom, 8));
  const halfH = (v.r1 - v.r0) * (state.zoom / clamped) / 2;
  const halfW = (v.c1 - v.c0) * (state.zoom / clamped) / 2;
  return {
    ...state,
    zoom: clamped,
    viewport: clampViewport(
      { r0: centerR - halfH, c0: centerC - halfW, r1: centerR + halfH, c1: centerC + halfW },
      slide,
    ),
  };
}

export function toggleClass(state: ViewState, className: string): ViewState {
  return {
    ...state,
    classVisibility: {
      ...state.classVisibility,
      [className]: !(state.classVisibility[className] ?? true),
    },
  };
}

export function selectCell(state: ViewState, cellId: string | null): ViewState {
  return { ...state, selectedCell: cellId };
}

/** Deterministic class colors from the class-universe order. */
const PALETTE = [
  "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00",
  "#ffff33", "#a65628", "#f781bf", "#999999", "#66c2a5",
];

export function classColor(classNames: string[], className: string | null): string {
  if (className === null) return "#c0c0c0";
  const index = classNames.indexOf(className);
  if (index < 0) return "#c0c0c0";
  return PALETTE[index % PALETTE.length] ?? "#c0c0c0";
}
