/** In-process fake of the annotation service HTTP contract.
 *
 * Faithful to the parts the viewer depends on: bbox cell queries with the
 * current label state and a version counter, append-only relabel events
 * with no-op detection, 404/422 validation, one-training-job-at-a-time
 * with 409, and job polling that walks queued -> running -> done. Cell
 * responses can be held and released out of order to exercise the
 * stale-viewport discipline.
 */

import type { FetchFn } from "../src/api.js";

export interface FakeCell {
  id: string;
  row: number;
  col: number;
  size: number;
  label: number;
  prob: number;
}

export interface FakeEvent {
  event_id: number;
  slide_id: string;
  cell_id: string;
  old_label: number | null;
  new_label: number;
  actor: string;
  timestamp: string;
}

interface FakeJob {
  job_id: string;
  state: "queued" | "running" | "done" | "failed";
  config: Record<string, unknown>;
  result: Record<string, unknown> | null;
  error: string | null;
  polls: number;
  submittedAtVersion: number;
}

function json(body: unknown, status = 200, headers: Record<string, string> = {}): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json", ...headers },
  });
}

export class FakeService {
  readonly classNames = ["neg", "pos"];
  readonly cells = new Map<string, FakeCell[]>();
  readonly labels = new Map<string, number>();
  readonly events: FakeEvent[] = [];
  version = 0;
  cellRequests = 0;
  holdCells = false;
  private held: Array<() => void> = [];
  private jobs = new Map<string, FakeJob>();

  constructor(cellsPerSlide = 8) {
    for (const slideId of ["slideA", "slideB"]) {
      const cells: FakeCell[] = [];
      for (let i = 0; i < cellsPerSlide; i++) {
        const cell: FakeCell = {
          id: `${slideId}-c${String(i).padStart(3, "0")}`,
          row: 40 + 60 * Math.floor(i / 2),
          col: 60 + 300 * (i % 2),
          size: 16,
          label: i % 2,
          prob: 0.8,
        };
        cells.push(cell);
        this.labels.set(`${slideId}|${cell.id}`, cell.label);
      }
      this.cells.set(slideId, cells);
    }
  }

  /** Release held /cells responses, optionally only the n oldest. */
  releaseHeld(n = Infinity): void {
    const release = this.held.splice(0, Math.min(n, this.held.length));
    for (const resolve of release) resolve();
  }

  get heldCount(): number {
    return this.held.length;
  }

  currentLabel(slideId: string, cellId: string): number {
    return this.labels.get(`${slideId}|${cellId}`) ?? 0;
  }

  /** Replay the event log over the initial labels (contract check). */
  replayedLabels(): Map<string, number> {
    const replayed = new Map<string, number>();
    for (const [slideId, cells] of this.cells) {
      for (const cell of cells) replayed.set(`${slideId}|${cell.id}`, cell.label);
    }
    for (const event of this.events) {
      replayed.set(`${event.slide_id}|${event.cell_id}`, event.new_label);
    }
    return replayed;
  }

  fetch: FetchFn = async (rawUrl, init) => {
    const url = new URL(rawUrl, "http://fake");
    const parts = url.pathname.split("/").filter(Boolean);
    const method = init?.method ?? "GET";

    if (method === "GET" && url.pathname === "/slides") {
      return json({
        slides: [...this.cells.keys()].map((slideId) => ({
          slide_id: slideId,
          width: 2048,
          height: 2048,
          mpp: 0.25,
          pyramid: {
            tile_size: 256,
            width: 2048,
            height: 2048,
            levels: [
              { level: 0, width: 2048, height: 2048 },
              { level: 1, width: 1024, height: 1024 },
              { level: 2, width: 512, height: 512 },
              { level: 3, width: 256, height: 256 },
            ],
          },
        })),
        class_names: this.classNames,
        label_version: this.version,
      });
    }

    if (method === "GET" && parts[0] === "slides" && parts[2] === "cells") {
      const slideId = parts[1]!;
      if (!this.cells.has(slideId)) return json({ detail: "unknown slide" }, 404);
      const bbox = (url.searchParams.get("bbox") ?? "").split(",").map(Number);
      if (bbox.length !== 4 || bbox.some(Number.isNaN)) {
        return json({ detail: "bbox must be r0,c0,r1,c1" }, 400);
      }
      const [r0, c0, r1, c1] = bbox as [number, number, number, number];
      const minProb = Number(url.searchParams.get("min_prob") ?? "0");
      const maxFeatures = url.searchParams.get("max_features");
      this.cellRequests += 1;

      if (this.holdCells) {
        await new Promise<void>((resolve) => this.held.push(resolve));
      }

      let cells = this.cells
        .get(slideId)!
        .filter((cell) => cell.prob >= minProb)
        .filter((cell) => {
          const half = cell.size / 2;
          return (
            cell.row + half >= r0 && cell.row - half <= r1 &&
            cell.col + half >= c0 && cell.col - half <= c1
          );
        })
        .sort((a, b) => (a.id < b.id ? -1 : 1));
      if (maxFeatures !== null) cells = cells.slice(0, Number(maxFeatures));

      return json(
        {
          type: "FeatureCollection",
          features: cells.map((cell) => {
            const half = cell.size / 2;
            const label = this.currentLabel(slideId, cell.id);
            return {
              type: "Feature",
              geometry: {
                type: "Polygon",
                coordinates: [[
                  [cell.col - half, cell.row - half],
                  [cell.col + half, cell.row - half],
                  [cell.col + half, cell.row + half],
                  [cell.col - half, cell.row + half],
                  [cell.col - half, cell.row - half],
                ]],
              },
              properties: {
                id: cell.id,
                class: this.classNames[label] ?? null,
                prob: cell.prob,
                centroid: [cell.col, cell.row],
                area: cell.size * cell.size,
              },
            };
          }),
          label_version: this.version,
        },
        200,
        { ETag: `W/"${slideId}|${bbox.join(",")}|${this.version}"` },
      );
    }

    if (method === "POST" && parts[0] === "slides" && parts[2] === "cells" && parts[4] === "label") {
      const slideId = parts[1]!;
      const cellId = decodeURIComponent(parts[3]!);
      if (!this.cells.has(slideId)) return json({ detail: "unknown slide" }, 404);
      if (!this.cells.get(slideId)!.some((cell) => cell.id === cellId)) {
        return json({ detail: `unknown cell ${cellId}` }, 404);
      }
      const body = JSON.parse(String(init?.body ?? "{}"));
      const newLabel = body.new_label;
      if (!Number.isInteger(newLabel) || newLabel < 0 || newLabel >= this.classNames.length) {
        return json({ detail: `unknown label ${newLabel}` }, 422);
      }
      const key = `${slideId}|${cellId}`;
      const old = this.labels.get(key) ?? null;
      if (old === newLabel) {
        return json({ no_op: true, label_version: this.version });
      }
      const event: FakeEvent = {
        event_id: this.events.length + 1,
        slide_id: slideId,
        cell_id: cellId,
        old_label: old,
        new_label: newLabel,
        actor: body.actor ?? "",
        timestamp: new Date().toISOString(),
      };
      this.events.push(event);
      this.labels.set(key, newLabel);
      this.version += 1;
      return json({ no_op: false, event, label_version: this.version });
    }

    if (method === "POST" && url.pathname === "/train") {
      const active = [...this.jobs.values()].some(
        (job) => job.state === "queued" || job.state === "running",
      );
      if (active) return json({ detail: "a training job is already running" }, 409);
      const config = JSON.parse(String(init?.body ?? "{}"));
      if (config.hidden !== undefined && config.hidden < 1) {
        return json({ detail: "invalid training config" }, 422);
      }
      const job: FakeJob = {
        job_id: `job-${String(this.jobs.size).padStart(4, "0")}`,
        state: "queued",
        config,
        result: null,
        error: null,
        polls: 0,
        submittedAtVersion: this.version,
      };
      this.jobs.set(job.job_id, job);
      return json({ job_id: job.job_id }, 202);
    }

    if (method === "GET" && parts[0] === "train") {
      const job = this.jobs.get(parts[1]!);
      if (!job) return json({ detail: "unknown job" }, 404);
      job.polls += 1;
      if (job.state === "queued") job.state = "running";
      else if (job.state === "running") {
        job.state = "done";
        job.result = {
          val_auroc: 0.9876,
          val_macro_f1: 0.9543,
          best_epoch: 7,
          checkpoint: `models/model-${String(this.jobs.size - 1).padStart(4, "0")}.ckpt`,
          label_version: job.submittedAtVersion,
        };
      }
      return json({
        job_id: job.job_id,
        state: job.state,
        config: job.config,
        result: job.result,
        error: job.error,
      });
    }

    return json({ detail: `no route for ${method} ${url.pathname}` }, 404);
  };
}
