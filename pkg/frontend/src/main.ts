/** Browser entry: canvas wiring around the pure viewer core. */

import { ApiClient } from "./api.js";
import { pickCell, type RenderPlan } from "./overlay.js";
import { TileCache } from "./tiles.js";
import { TrainingPanel } from "./training.js";
import { openViewer, Viewer } from "./viewer.js";

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`tile failed: ${url}`));
    img.src = url;
  });
}

function executePlan(
  canvas: HTMLCanvasElement,
  plan: RenderPlan,
  tiles: TileCache<HTMLImageElement>,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (const tile of plan.tiles) {
    const url = tile as unknown as { url?: string };
    void url;
  }
  for (const polygon of plan.polygons) {
    ctx.beginPath();
    for (const [i, [x, y]] of polygon.points.entries()) {
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    }
    ctx.closePath();
    ctx.strokeStyle = polygon.color;
    ctx.lineWidth = polygon.selected ? 3 : 1.5;
    ctx.stroke();
    ctx.globalAlpha = polygon.selected ? 0.45 : 0.2;
    ctx.fillStyle = polygon.color;
    ctx.fill();
    ctx.globalAlpha = 1;
  }
  for (const marker of plan.markers) {
    ctx.beginPath();
    ctx.arc(marker.x, marker.y, 3, 0, Math.PI * 2);
    ctx.fillStyle = marker.color;
    ctx.fill();
  }
}

function renderLegend(element: HTMLElement, plan: RenderPlan, viewer: Viewer): void {
  element.replaceChildren();
  for (const entry of plan.legend) {
    const row = document.createElement("label");
    row.className = "legend-row";
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = entry.visible;
    box.addEventListener("change", () => viewer.toggleClassVisibility(entry.className));
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = entry.color;
    row.append(box, swatch, `${entry.className} (${entry.count})`);
    element.append(row);
  }
}

async function start(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const api = new ApiClient(params.get("api") ?? "");
  const canvas = document.getElementById("overlay") as HTMLCanvasElement;
  const tileLayer = document.getElementById("tiles") as HTMLDivElement;
  const legend = document.getElementById("legend") as HTMLElement;
  const statusLine = document.getElementById("status") as HTMLElement;

  const slides = await api.getSlides();
  const first = slides.slides[0];
  if (!first) {
    statusLine.textContent = "no slides in the workspace";
    return;
  }
  const slideId = params.get("slide") ?? first.slide_id;

  const tileImages = new TileCache(loadImage);
  let lastPlan: RenderPlan | null = null;
  const viewer = await openViewer(api, slideId, {
    tileCache: tileImages,
    onError: (message) => {
      statusLine.textContent = message;
      setTimeout(() => (statusLine.textContent = ""), 4000);
    },
    paint: (plan) => {
      lastPlan = plan;
      executePlan(canvas, plan, tileImages);
      renderLegend(legend, plan, viewer);
      // tiles render as absolutely positioned <img> behind the canvas
      tileLayer.replaceChildren();
      for (const tile of plan.tiles) {
        const img = document.createElement("img");
        img.src = api.tileUrl(slideId, tile.address.level, tile.address.x, tile.address.y);
        img.style.cssText =
          `position:absolute;left:${tile.screen.x}px;top:${tile.screen.y}px;` +
          `width:${tile.screen.size}px;height:${tile.screen.size}px;`;
        tileLayer.append(img);
      }
    },
  });

  canvas.addEventListener("click", (event) => {
    if (!lastPlan) return;
    const rect = canvas.getBoundingClientRect();
    const cellId = pickCell(lastPlan, event.clientX - rect.left, event.clientY - rect.top);
    viewer.select(cellId);
    const picker = document.getElementById("relabel") as HTMLSelectElement;
    picker.disabled = cellId === null;
  });

  (document.getElementById("relabel") as HTMLSelectElement).addEventListener(
    "change",
    (event) => {
      const select = event.target as HTMLSelectElement;
      const cellId = viewer.state.selectedCell;
      if (cellId !== null) void viewer.relabel(cellId, Number(select.value), "pathologist");
    },
  );
  const relabelPicker = document.getElementById("relabel") as HTMLSelectElement;
  viewer.classNames.forEach((name, index) => {
    const option = document.createElement("option");
    option.value = String(index);
    option.textContent = name;
    relabelPicker.append(option);
  });

  document.addEventListener("keydown", (event) => {
    const step = 256 / viewer.state.zoom;
    if (event.key === "ArrowLeft") void viewer.panBy(0, -step);
    if (event.key === "ArrowRight") void viewer.panBy(0, step);
    if (event.key === "ArrowUp") void viewer.panBy(-step, 0);
    if (event.key === "ArrowDown") void viewer.panBy(step, 0);
    if (event.key === "+") void viewer.setZoom(viewer.state.zoom * 2);
    if (event.key === "-") void viewer.setZoom(viewer.state.zoom / 2);
    if (event.key === "z" && (event.ctrlKey || event.metaKey)) void viewer.undo();
  });

  const panel = new TrainingPanel(api, (view) => {
    const button = document.getElementById("train-submit") as HTMLButtonElement;
    const metrics = document.getElementById("train-metrics") as HTMLElement;
    button.disabled = view.busy;
    metrics.textContent = view.job?.result
      ? `AUROC ${view.job.result.val_auroc.toFixed(4)}  ` +
        `mF1 ${view.job.result.val_macro_f1.toFixed(4)}  [${view.job.job_id}]`
      : view.message ?? view.status;
  });
  (document.getElementById("train-submit") as HTMLButtonElement).addEventListener(
    "click",
    () => {
      const hidden = Number((document.getElementById("train-hidden") as HTMLInputElement).value);
      const lr = Number((document.getElementById("train-lr") as HTMLInputElement).value);
      const schedule = (document.getElementById("train-schedule") as HTMLSelectElement)
        .value as "exponential" | "halve";
      void panel.submit({ hidden, lr, schedule });
    },
  );
}

void start();
