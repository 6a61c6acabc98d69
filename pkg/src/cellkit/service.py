"""HTTP API for the human-in-the-loop annotation workflow.

Endpoints:

    GET  /slides                                   slide list + class universe
    GET  /slides/{id}/tiles/{level}/{x}/{y}        pyramid tile image
    GET  /slides/{id}/cells?bbox=r0,c0,r1,c1       GeoJSON cells in a viewport
         [&min_prob=p][&max_features=m]
    POST /slides/{id}/cells/{cell_id}/label        relabel one cell
    POST /train                                    launch classifier training
    GET  /train/{job_id}                           job state + metrics

Label writes append to a JSON-lines event log and swap an immutable
label-map snapshot, so reads never block and replaying the log from the
initial state reproduces the live state exactly. Cell GET bodies are
serialized deterministically and carry an ETag over (slide, query, label
version) so viewers can cache until a relabel bumps the version.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.responses import FileResponse
from pydantic import BaseModel

from . import clsmod
from .tensorio import CellRecord, read_cells, read_embeddings, write_geojson


@dataclass
class SlideEntry:
    slide_id: str
    width: int
    height: int
    mpp: float
    pyramid: Optional[Path] = None
    cells_path: Optional[Path] = None
    embeddings: Optional[tuple[Path, Path]] = None


class Workspace:
    """A directory with a manifest tying slides, cells, embeddings, labels."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = json.loads((self.root / "workspace.json").read_text())
        self.class_names: list[str] = manifest.get("class_names", [])
        self.splits: dict[str, str] = manifest.get("splits", {})
        self.events_path = self.root / manifest.get("events", "events.jsonl")
        self.models_dir = self.root / manifest.get("models", "models")
        self.slides: dict[str, SlideEntry] = {}
        for s in manifest.get("slides", []):
            entry = SlideEntry(
                slide_id=s["slide_id"],
                width=s["width"],
                height=s["height"],
                mpp=s.get("mpp", 0.25),
                pyramid=self.root / s["pyramid"] if s.get("pyramid") else None,
                cells_path=self.root / s["cells"] if s.get("cells") else None,
                embeddings=(
                    (self.root / s["embeddings"][0], self.root / s["embeddings"][1])
                    if s.get("embeddings")
                    else None
                ),
            )
            self.slides[entry.slide_id] = entry

    def load_cells(self, slide_id: str) -> list[CellRecord]:
        entry = self.slides[slide_id]
        if entry.cells_path is None or not entry.cells_path.exists():
            return []
        return read_cells(entry.cells_path)


@dataclass
class AnnotationEvent:
    event_id: int
    slide_id: str
    cell_id: str
    old_label: Optional[int]
    new_label: int
    actor: str
    timestamp: str

    def to_json_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "slide_id": self.slide_id,
            "cell_id": self.cell_id,
            "old_label": self.old_label,
            "new_label": self.new_label,
            "actor": self.actor,
            "timestamp": self.timestamp,
        }


class LabelStore:
    """Initial labels from the cell stores, overridden by the event log.

    Writes are serialized by a lock and swap a fresh dict, so concurrent
    readers always see a consistent snapshot.
    """

    def __init__(self, workspace: Workspace):
        self.workspace = workspace
        self._lock = threading.Lock()
        self.cells: dict[str, dict[str, CellRecord]] = {}
        initial: dict[tuple[str, str], Optional[int]] = {}
        for slide_id in workspace.slides:
            by_id = {c.cell_id: c for c in workspace.load_cells(slide_id)}
            self.cells[slide_id] = by_id
            for cid, cell in by_id.items():
                initial[(slide_id, cid)] = cell.class_label
        self._initial = initial
        labels = dict(initial)
        self._last_event_id = 0
        for event in self._read_events():
            labels[(event.slide_id, event.cell_id)] = event.new_label
            self._last_event_id = event.event_id
        self._labels = labels
        self.version = self._last_event_id

    def _read_events(self) -> list[AnnotationEvent]:
        path = self.workspace.events_path
        if not path.exists():
            return []
        events = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    d = json.loads(line)
                    events.append(AnnotationEvent(**d))
        return events

    @property
    def labels(self) -> dict[tuple[str, str], Optional[int]]:
        return self._labels

    def current_label(self, slide_id: str, cell_id: str) -> Optional[int]:
        return self._labels.get((slide_id, cell_id))

    def relabel(
        self, slide_id: str, cell_id: str, new_label: int, actor: str
    ) -> Optional[AnnotationEvent]:
        """Append an event and swap the snapshot; None when it's a no-op."""
        with self._lock:
            old = self._labels.get((slide_id, cell_id))
            if old == new_label:
                return None
            event = AnnotationEvent(
                event_id=self._last_event_id + 1,
                slide_id=slide_id,
                cell_id=cell_id,
                old_label=old,
                new_label=new_label,
                actor=actor,
                timestamp=datetime.now(timezone.utc).isoformat(),
            )
            self.workspace.events_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.workspace.events_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(event.to_json_dict(), separators=(",", ":")) + "\n")
            labels = dict(self._labels)
            labels[(slide_id, cell_id)] = new_label
            self._labels = labels
            self._last_event_id = event.event_id
            self.version += 1
            return event

    def replay(self) -> dict[tuple[str, str], Optional[int]]:
        """Recompute the label state from the initial state plus the log."""
        labels = dict(self._initial)
        for event in self._read_events():
            labels[(event.slide_id, event.cell_id)] = event.new_label
        return labels


class TrainRequest(BaseModel):
    hidden: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "exponential"
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0


class LabelBody(BaseModel):
    new_label: int
    actor: str = ""


@dataclass
class TrainJob:
    job_id: str
    state: str  # queued | running | done | failed
    config: dict
    result: Optional[dict] = None
    error: Optional[str] = None

    def to_json_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "state": self.state,
            "config": self.config,
            "result": self.result,
            "error": self.error,
        }


def _default_trainer(workspace: Workspace, store: LabelStore, request: TrainRequest) -> dict:
    """Assemble the current label state into a set and run the classifier."""
    vectors, labels, splits = [], [], []
    for slide_id, entry in workspace.slides.items():
        if entry.embeddings is None:
            continue
        matrix, ids = read_embeddings(*entry.embeddings)
        split = workspace.splits.get(slide_id)
        if split is None:
            continue
        for row, cid in enumerate(ids):
            label = store.current_label(slide_id, cid)
            if label is None:
                continue
            vectors.append(matrix[row])
            labels.append(label)
            splits.append(split)
    data = clsmod.LabeledCellSet(
        embeddings=np.stack(vectors),
        labels=np.array(labels),
        splits=np.array(splits),
        class_names=workspace.class_names,
    )
    config = clsmod.TrainConfig(
        lr=request.lr,
        weight_decay=request.weight_decay,
        schedule=request.schedule,
        max_epochs=request.max_epochs,
        patience=request.patience,
        seed=request.seed,
    )
    result = clsmod.train(data, config, hidden=request.hidden)
    val_idx = data.split_indices("val")
    probs, preds = clsmod.predict(result.params, data.embeddings[val_idx])
    val_f1 = clsmod.macro_f1(preds, data.labels[val_idx], len(workspace.class_names))

    workspace.models_dir.mkdir(parents=True, exist_ok=True)
    n_ckpt = len(list(workspace.models_dir.glob("*.ckpt")))
    ckpt = workspace.models_dir / f"model-{n_ckpt:04d}.ckpt"
    clsmod.save_checkpoint(
        ckpt,
        result.params,
        {"class_names": workspace.class_names, "label_version": store.version},
    )
    return {
        "val_auroc": result.best_auroc,
        "val_macro_f1": val_f1,
        "best_epoch": result.best_epoch,
        "checkpoint": str(ckpt.relative_to(workspace.root)),
        "label_version": store.version,
    }


def _geojson_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _decimate(cells: list[CellRecord], bbox: tuple[float, float, float, float],
              max_features: int) -> list[CellRecord]:
    """Uniform grid thinning: one cell (smallest id) per grid bucket."""
    if len(cells) <= max_features:
        return cells
    g = max(1, int(np.ceil(np.sqrt(max_features))))
    dr = max((bbox[2] - bbox[0]) / g, 1e-9)
    dc = max((bbox[3] - bbox[1]) / g, 1e-9)
    buckets: dict[tuple[int, int], CellRecord] = {}
    for cell in sorted(cells, key=lambda c: c.cell_id):
        key = (int((cell.centroid[0] - bbox[0]) / dr), int((cell.centroid[1] - bbox[1]) / dc))
        buckets.setdefault(key, cell)
    out = sorted(buckets.values(), key=lambda c: c.cell_id)
    return out[:max_features]


def create_app(
    workspace_root: str | Path,
    trainer: Optional[Callable[[Workspace, LabelStore, TrainRequest], dict]] = None,
) -> FastAPI:
    workspace = Workspace(workspace_root)
    store = LabelStore(workspace)
    trainer = trainer or _default_trainer

    app = FastAPI(title="cellkit annotation service")
    app.state.workspace = workspace
    app.state.store = store
    jobs: dict[str, TrainJob] = {}
    job_lock = threading.Lock()
    app.state.jobs = jobs

    def _slide_or_404(slide_id: str) -> SlideEntry:
        entry = workspace.slides.get(slide_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown slide {slide_id}")
        return entry

    @app.get("/slides")
    def list_slides():
        slides = []
        for entry in workspace.slides.values():
            meta = {
                "slide_id": entry.slide_id,
                "width": entry.width,
                "height": entry.height,
                "mpp": entry.mpp,
            }
            if entry.pyramid and (entry.pyramid / "meta.json").exists():
                meta["pyramid"] = json.loads((entry.pyramid / "meta.json").read_text())
            slides.append(meta)
        return {
            "slides": slides,
            "class_names": workspace.class_names,
            "label_version": store.version,
        }

    @app.get("/slides/{slide_id}/tiles/{level}/{x}/{y}")
    def get_tile(slide_id: str, level: int, x: int, y: int):
        entry = _slide_or_404(slide_id)
        if entry.pyramid is None:
            raise HTTPException(status_code=404, detail="slide has no pyramid")
        path = entry.pyramid / str(level) / f"{x}_{y}.jpg"
        if not path.exists():
            raise HTTPException(status_code=404, detail="tile not found")
        return FileResponse(path, media_type="image/jpeg")

    @app.get("/slides/{slide_id}/cells")
    def get_cells(
        slide_id: str,
        bbox: str = Query(...),
        min_prob: float = 0.0,
        max_features: Optional[int] = None,
    ):
        entry = _slide_or_404(slide_id)
        try:
            r0, c0, r1, c1 = (float(v) for v in bbox.split(","))
        except ValueError:
            raise HTTPException(status_code=400, detail="bbox must be r0,c0,r1,c1")
        if r1 < r0 or c1 < c0:
            raise HTTPException(status_code=400, detail="bbox is inverted")

        labels = store.labels
        version = store.version
        selected = []
        for cell in store.cells.get(slide_id, {}).values():
            ring = cell.ring()
            if not ring:
                continue
            rows = [p[0] for p in ring]
            cols = [p[1] for p in ring]
            if max(rows) < r0 or min(rows) > r1 or max(cols) < c0 or min(cols) > c1:
                continue
            prob = max(cell.class_probs) if cell.class_probs else 1.0
            if prob < min_prob:
                continue
            current = labels.get((slide_id, cell.cell_id), cell.class_label)
            if current != cell.class_label:
                cell = CellRecord(
                    cell_id=cell.cell_id,
                    slide_id=cell.slide_id,
                    centroid=cell.centroid,
                    area=cell.area,
                    contour=cell.contour,
                    class_label=current,
                    class_probs=cell.class_probs,
                    embedding_ref=cell.embedding_ref,
                    extra=cell.extra,
                )
            selected.append(cell)

        if max_features is not None:
            selected = _decimate(selected, (r0, c0, r1, c1), max_features)

        doc = write_geojson(selected, dict(enumerate(workspace.class_names)))
        doc["label_version"] = version
        body = _geojson_bytes(doc)
        etag = hashlib.sha256(
            f"{slide_id}|{bbox}|{min_prob}|{max_features}|{version}".encode()
        ).hexdigest()
        return Response(content=body, media_type="application/geo+json",
                        headers={"ETag": etag})

    @app.post("/slides/{slide_id}/cells/{cell_id}/label")
    def relabel(slide_id: str, cell_id: str, body: LabelBody):
        _slide_or_404(slide_id)
        if cell_id not in store.cells.get(slide_id, {}):
            raise HTTPException(status_code=404, detail=f"unknown cell {cell_id}")
        if not 0 <= body.new_label < len(workspace.class_names):
            raise HTTPException(status_code=422, detail=f"unknown label {body.new_label}")
        event = store.relabel(slide_id, cell_id, body.new_label, body.actor)
        if event is None:
            return {"no_op": True, "label_version": store.version}
        return {"no_op": False, "event": event.to_json_dict(), "label_version": store.version}

    @app.post("/train", status_code=202)
    def submit_train(request: TrainRequest):
        if request.hidden < 1 or request.lr < 0 or request.schedule not in ("exponential", "halve"):
            raise HTTPException(status_code=422, detail="invalid training config")
        with job_lock:
            if any(j.state in ("queued", "running") for j in jobs.values()):
                raise HTTPException(status_code=409, detail="a training job is already running")
            job = TrainJob(
                job_id=f"job-{len(jobs):04d}",
                state="queued",
                config=request.model_dump(),
            )
            jobs[job.job_id] = job

        def run():
            job.state = "running"
            try:
                job.result = trainer(workspace, store, request)
                job.state = "done"
            except Exception as e:  # surfaced through the job state
                job.error = str(e)
                job.state = "failed"

        thread = threading.Thread(target=run, daemon=True)
        thread.start()
        return {"job_id": job.job_id}

    @app.get("/train/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job.to_json_dict()

    return app
