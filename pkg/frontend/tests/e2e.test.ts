/** Viewer acceptance: the full relabel -> retrain -> refetch loop against a
 * fixture workspace, plus the stale-fetch discipline. One verdict line per
 * criterion, mirroring the engine's acceptance suite.
 */

import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import type { RenderPlan } from "../src/overlay.js";
import { TrainingPanel } from "../src/training.js";
import { openViewer } from "../src/viewer.js";
import { FakeService } from "./fake_service.js";

function verdict(name: string, ok: boolean, detail: string) {
  console.log(`${ok ? "PASS" : "FAIL"}: ${name} (${detail})`);
  expect(ok, `${name}: ${detail}`).toBe(true);
}

describe("viewer acceptance", () => {
  it("relabeling persists across reload", async () => {
    const service = new FakeService();
    const api = new ApiClient("", service.fetch);
    const paints: RenderPlan[] = [];
    const viewer = await openViewer(api, "slideA", { paint: (p) => paints.push(p) });
    await viewer.relabel("slideA-c000", 1, "pathologist");

    const reloadPaints: RenderPlan[] = [];
    const reloaded = await openViewer(api, "slideA", { paint: (p) => reloadPaints.push(p) });
    const polygon = reloadPaints[0]!.polygons.find((p) => p.cellId === "slideA-c000");
    const persisted = polygon?.className === "pos" && reloaded.labelVersion === 1;
    const replayed = [...service.replayedLabels().entries()].every(
      ([key, value]) => service.labels.get(key) === value,
    );
    verdict(
      "relabel persists across reload and replay matches live state",
      Boolean(persisted) && replayed,
      `class after reload ${polygon?.className}, version ${reloaded.labelVersion}`,
    );
  });

  it("training metrics in the panel equal the raw API body", async () => {
    const service = new FakeService();
    const api = new ApiClient("", service.fetch);
    const viewer = await openViewer(api, "slideA", { paint: () => {} });
    await viewer.relabel("slideA-c002", 1, "pathologist");

    const panel = new TrainingPanel(api, () => {}, async () => {}, 0);
    const job = await panel.submit({ hidden: 16, lr: 0.001, schedule: "exponential" });
    const raw = await api.getJob(job!.job_id);
    const metricsMatch =
      JSON.stringify(panel.view().job?.result) === JSON.stringify(raw.result);

    // the new checkpoint reflects the post-relabel label state
    await viewer.refresh();
    const checkpointCurrent =
      raw.result?.label_version === viewer.labelVersion &&
      typeof raw.result?.checkpoint === "string";
    verdict(
      "training panel surfaces the raw API metrics for the current label state",
      metricsMatch && Boolean(checkpointCurrent),
      `panel == raw ${metricsMatch}, checkpoint ${raw.result?.checkpoint} ` +
        `at label version ${raw.result?.label_version}`,
    );
  });

  it("stale-viewport fetches never paint", async () => {
    const service = new FakeService();
    const api = new ApiClient("", service.fetch);
    const paints: RenderPlan[] = [];
    const viewer = await openViewer(api, "slideA", { paint: (p) => paints.push(p) });
    paints.length = 0;

    service.holdCells = true;
    const stale = viewer.refresh();
    const p1 = viewer.panBy(0, 100);   // supersedes the refresh
    const p2 = viewer.panBy(0, 200);   // supersedes the first pan
    expect(service.heldCount).toBe(3);
    service.releaseHeld(3);
    await Promise.all([stale, p1, p2]);

    const paintedGenerations = paints.length;
    const finalViewportOnly = paints.every((plan) =>
      plan.polygons.every((polygon) => {
        const cell = service.cells.get("slideA")!.find((c) => c.id === polygon.cellId)!;
        return cell.col + 8 >= viewer.state.viewport.c0;
      }),
    );
    verdict(
      "superseded viewport responses are dropped before painting",
      paintedGenerations === 1 && finalViewportOnly,
      `${paintedGenerations} paint(s) for 3 in-flight fetches`,
    );
  });
});
