/** Pure render planning: (view state, fetched data) -> draw operations.
 *
 * Nothing here touches the DOM; the plan is plain data, which is what the
 * snapshot tests assert on and what the canvas layer executes. Replaying
 * the same inputs yields an identical plan.
 */

import { classColor, POLYGON_ZOOM_THRESHOLD, type ViewState } from "./state.js";
import { tilesForViewport, type TileAddress } from "./tiles.js";
import type { CellCollection, CellFeature, PyramidMeta } from "./types.js";

export interface TileDraw {
  address: TileAddress;
  /** Destination rectangle in screen px. */
  screen: { x: number; y: number; size: number };
}

export interface PolygonDraw {
  cellId: string;
  className: string | null;
  color: string;
  selected: boolean;
  /** Screen-space ring, [x, y] pairs. */
  points: [number, number][];
}

export interface MarkerDraw {
  cellId: string;
  color: string;
  x: number;
  y: number;
}

export interface RenderPlan {
  mode: "polygons" | "markers";
  tiles: TileDraw[];
  polygons: PolygonDraw[];
  markers: MarkerDraw[];
  legend: { className: string; color: string; count: number; visible: boolean }[];
}

function toScreen(view: ViewState, x: number, y: number): [number, number] {
  return [(x - view.viewport.c0) * view.zoom, (y - view.viewport.r0) * view.zoom];
}

function featureVisible(view: ViewState, feature: CellFeature): boolean {
  const name = feature.properties.class;
  if (name !== null && view.classVisibility[name] === false) return false;
  return true;
}

export function planRender(
  view: ViewState,
  data: CellCollection | null,
  classNames: string[],
  pyramid: PyramidMeta | null,
): RenderPlan {
  const tiles: TileDraw[] = [];
  if (pyramid) {
    for (const address of tilesForViewport(pyramid, view.viewport, view.zoom)) {
      const scale = 2 ** -address.level;
      const sizeSlidePx = pyramid.tile_size / scale;
      const [x, y] = toScreen(
        view,
        (address.x * sizeSlidePx),
        (address.y * sizeSlidePx),
      );
      tiles.push({ address, screen: { x, y, size: sizeSlidePx * view.zoom } });
    }
  }

  const counts = new Map<string, number>();
  const polygons: PolygonDraw[] = [];
  const markers: MarkerDraw[] = [];
  const mode: RenderPlan["mode"] =
    view.zoom >= POLYGON_ZOOM_THRESHOLD ? "polygons" : "markers";

  const features = data ? [...data.features] : [];
  features.sort((a, b) => (a.properties.id < b.properties.id ? -1 : 1));
  for (const feature of features) {
    const name = feature.properties.class;
    if (name !== null) counts.set(name, (counts.get(name) ?? 0) + 1);
    if (!featureVisible(view, feature)) continue;
    const color = classColor(classNames, name);
    if (mode === "polygons") {
      const ring = feature.geometry.coordinates[0] ?? [];
      polygons.push({
        cellId: feature.properties.id,
        className: name,
        color,
        selected: feature.properties.id === view.selectedCell,
        points: ring.map(([x, y]) => toScreen(view, x ?? 0, y ?? 0)),
      });
    } else {
      const [cx, cy] = feature.properties.centroid;
      const [x, y] = toScreen(view, cx, cy);
      markers.push({ cellId: feature.properties.id, color, x, y });
    }
  }

  const legend = classNames.map((name) => ({
    className: name,
    color: classColor(classNames, name),
    count: counts.get(name) ?? 0,
    visible: view.classVisibility[name] !== false,
  }));

  return { mode, tiles, polygons, markers, legend };
}

/** Point-in-polygon pick over the drawn (visible) polygons, topmost last. */
export function pickCell(plan: RenderPlan, x: number, y: number): string | null {
  for (let i = plan.polygons.length - 1; i >= 0; i--) {
    const polygon = plan.polygons[i];
    if (polygon && pointInRing(polygon.points, x, y)) return polygon.cellId;
  }
  return null;
}

function pointInRing(ring: [number, number][], x: number, y: number): boolean {
  let inside = false;
  for (let i = 0, j = ring.length - 1; i < ring.length; j = i++) {
    const [xi, yi] = ring[i]!;
    const [xj, yj] = ring[j]!;
    if (yi > y !== yj > y && x < ((xj - xi) * (y - yi)) / (yj - yi) + xi) {
      inside = !inside;
    }
  }
  return inside;
}
