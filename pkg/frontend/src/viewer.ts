/** Viewer orchestration: fetching, stale-response discipline, relabeling.
 *
 * Every viewport change bumps a generation counter; a response is painted
 * only if its generation is still current, so out-of-order replies from
 * superseded viewports can never reach the canvas. Class toggles and
 * selection repaint from the cached feature set without refetching.
 *
 * Relabeling recolors optimistically, posts, and reverts on any error;
 * undo re-posts the previous label through the same path.
 */

import { ApiClient } from "./api.js";
import { planRender, type RenderPlan } from "./overlay.js";
import {
  initialViewState,
  OVERVIEW_MAX_FEATURES,
  POLYGON_ZOOM_THRESHOLD,
  pan,
  selectCell,
  toggleClass,
  zoomTo,
  type ViewState,
} from "./state.js";
import { TileCache } from "./tiles.js";
import type { CellCollection, SlideMeta } from "./types.js";

export interface ViewerOptions {
  paint: (plan: RenderPlan) => void;
  onError?: (message: string) => void;
  tileCache?: TileCache<unknown>;
}

interface UndoEntry {
  cellId: string;
  previousLabel: number;
}

export class Viewer {
  state: ViewState;
  lastData: CellCollection | null = null;
  labelVersion = 0;
  private generation = 0;
  private readonly undoStack: UndoEntry[] = [];
  readonly tileCache: TileCache<unknown>;

  constructor(
    private readonly api: ApiClient,
    readonly slide: SlideMeta,
    readonly classNames: string[],
    private readonly options: ViewerOptions,
  ) {
    this.state = initialViewState(slide, classNames);
    this.tileCache = options.tileCache ?? new TileCache(async (url) => url);
  }

  /** Fetch cells for the current viewport; stale generations never paint. */
  async refresh(): Promise<void> {
    const generation = ++this.generation;
    const wantDecimated = this.state.zoom < POLYGON_ZOOM_THRESHOLD;
    try {
      const data = await this.api.getCells(this.state.slideId, this.state.viewport, {
        minProb: this.state.minProb,
        ...(wantDecimated ? { maxFeatures: OVERVIEW_MAX_FEATURES } : {}),
      });
      if (generation !== this.generation) return; // superseded viewport
      this.lastData = data;
      this.labelVersion = data.label_version;
      if (
        this.state.selectedCell !== null &&
        !data.features.some((f) => f.properties.id === this.state.selectedCell)
      ) {
        this.state = selectCell(this.state, null);
      }
      this.paint();
    } catch (error) {
      if (generation !== this.generation) return;
      this.options.onError?.(String(error));
    }
  }

  paint(): void {
    const plan = planRender(
      this.state,
      this.lastData,
      this.classNames,
      this.slide.pyramid ?? null,
    );
    for (const tile of plan.tiles) {
      const { level, x, y } = tile.address;
      void this.tileCache
        .get(this.api.tileUrl(this.state.slideId, level, x, y))
        .catch(() => undefined); // tile errors surface visually, not fatally
    }
    this.options.paint(plan);
  }

  async panBy(dRow: number, dCol: number): Promise<void> {
    this.state = pan(this.state, this.slide, dRow, dCol);
    await this.refresh();
  }

  async setZoom(zoom: number): Promise<void> {
    this.state = zoomTo(this.state, this.slide, zoom);
    await this.refresh();
  }

  /** Client-side filter: no refetch, just a repaint from cached features. */
  toggleClassVisibility(className: string): void {
    this.state = toggleClass(this.state, className);
    this.paint();
  }

  select(cellId: string | null): void {
    this.state = selectCell(this.state, cellId);
    this.paint();
  }

  private featureOf(cellId: string) {
    return this.lastData?.features.find((f) => f.properties.id === cellId);
  }

  private recolor(cellId: string, labelIndex: number | null): void {
    const feature = this.featureOf(cellId);
    if (!feature) return;
    feature.properties.class =
      labelIndex === null ? null : this.classNames[labelIndex] ?? null;
    this.paint();
  }

  private labelIndexOf(cellId: string): number | null {
    const feature = this.featureOf(cellId);
    if (!feature || feature.properties.class === null) return null;
    const index = this.classNames.indexOf(feature.properties.class);
    return index >= 0 ? index : null;
  }

  /** Optimistic relabel; reverts and reports on any server rejection. */
  async relabel(cellId: string, newLabel: number, actor = "viewer"): Promise<boolean> {
    const previous = this.labelIndexOf(cellId);
    this.recolor(cellId, newLabel);
    try {
      const response = await this.api.relabel(this.state.slideId, cellId, newLabel, actor);
      this.labelVersion = response.label_version;
      if (!response.no_op && previous !== null) {
        this.undoStack.push({ cellId, previousLabel: previous });
      }
      return true;
    } catch (error) {
      this.recolor(cellId, previous);
      this.options.onError?.(String(error));
      return false;
    }
  }

  /** Undo the most recent relabel by posting the previous label back. */
  async undo(): Promise<boolean> {
    const entry = this.undoStack.pop();
    if (!entry) return false;
    return this.relabel(entry.cellId, entry.previousLabel, "viewer-undo");
  }
}

export async function openViewer(
  api: ApiClient,
  slideId: string,
  options: ViewerOptions,
): Promise<Viewer> {
  const slides = await api.getSlides();
  const slide = slides.slides.find((s) => s.slide_id === slideId);
  if (!slide) throw new Error(`unknown slide ${slideId}`);
  const viewer = new Viewer(api, slide, slides.class_names, options);
  await viewer.refresh();
  return viewer;
}
