"""Read-only HTTP facade over generated label sets.

Startup loads and validates every label file under the data root
(`<image_id>.labels.json`, with an optional `<image_id>.png` or `.jpg`
raw image next to it); any invalid file aborts startup with per-file
diagnostics. All requests read from immutable state.

Routes:
    GET  /api/images                     -> [{"id", "width", "height"}]
    GET  /api/images/{id}/hierarchy      -> label JSON
    GET  /api/images/{id}/mask?x&y&g     -> {"mask", "granularity", "instance_id"}
    POST /api/images/{id}/refine         -> same, from {"clicks": [...], "g": g}
    GET  /api/images/{id}/raw            -> image bytes
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, Response
from pydantic import BaseModel, Field

from . import masks as mk
from .hierarchy import GranularMask, PseudoLabelSet, load_labels, query_mask

__all__ = ["ServeState", "load_state", "create_app"]

LABEL_SUFFIX = ".labels.json"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class ServeState:
    root: Path
    labels: dict[str, PseudoLabelSet] = field(default_factory=dict)
    images: dict[str, Path] = field(default_factory=dict)


def _validate_labels(labels: PseudoLabelSet) -> None:
    """Enforce hierarchy invariants before serving."""
    for h in labels.hierarchies:
        if h.root.granularity != 1.0:
            raise ValueError(f"instance {h.instance_id}: root granularity {h.root.granularity} != 1.0")
        root_px = h.root.pixels()
        if root_px.shape != (labels.height, labels.width):
            raise ValueError(f"instance {h.instance_id}: root mask shape mismatch")
        root_area = mk.area(root_px)
        for c in h.children:
            if mk.area(c.pixels()) > root_area:
                raise ValueError(f"instance {h.instance_id}: child larger than root")


def load_state(data_dir: str | Path) -> ServeState:
    """Load every label set under the directory; fail fast on any bad file."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    state = ServeState(root=root)
    errors = []
    for path in sorted(root.glob(f"*{LABEL_SUFFIX}")):
        image_id = path.name[: -len(LABEL_SUFFIX)]
        try:
            labels = load_labels(path)
            _validate_labels(labels)
        except Exception as exc:  # noqa: BLE001 - collected into diagnostics
            errors.append(f"{path}: {exc}")
            continue
        state.labels[image_id] = labels
        for suffix in IMAGE_SUFFIXES:
            img = path.with_name(image_id + suffix)
            if img.exists():
                state.images[image_id] = img
                break
    if errors:
        raise ValueError("invalid label files:\n" + "\n".join(errors))
    if not state.labels:
        raise ValueError(f"no label files (*{LABEL_SUFFIX}) under {root}")
    return state


class ClickIn(BaseModel):
    x: int
    y: int
    positive: bool = True


class RefineIn(BaseModel):
    clicks: list[ClickIn] = Field(min_length=1)
    g: float


def _mask_response(gm: GranularMask | None) -> dict:
    if gm is None:
        return {"mask": None, "granularity": None, "instance_id": None}
    return {"mask": gm.mask, "granularity": gm.granularity, "instance_id": gm.instance_id}


def create_app(state: ServeState) -> FastAPI:
    app = FastAPI(title="granseg", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    def get_labels(image_id: str) -> PseudoLabelSet:
        labels = state.labels.get(image_id)
        if labels is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        return labels

    def checked_query(labels, point, g, clicks=None):
        if not 0.1 <= g <= 1.0:
            raise HTTPException(status_code=422, detail=f"g={g} outside [0.1, 1.0]")
        for x, y in [point, *[(c[0], c[1]) for c in clicks or []]]:
            if not (0 <= x < labels.width and 0 <= y < labels.height):
                raise HTTPException(status_code=422, detail=f"point ({x}, {y}) out of bounds")
        return query_mask(labels, point, g, clicks=clicks)

    @app.get("/api/images")
    def list_images() -> list[dict]:
        return [
            {"id": image_id, "width": labels.width, "height": labels.height}
            for image_id, labels in sorted(state.labels.items())
        ]

    @app.get("/api/images/{image_id}/hierarchy")
    def hierarchy(image_id: str) -> Response:
        from .hierarchy import labels_to_json

        return Response(labels_to_json(get_labels(image_id)), media_type="application/json")

    @app.get("/api/images/{image_id}/mask")
    def mask(image_id: str, x: int, y: int, g: float) -> dict:
        labels = get_labels(image_id)
        return _mask_response(checked_query(labels, (x, y), g))

    @app.post("/api/images/{image_id}/refine")
    def refine(image_id: str, body: RefineIn) -> dict:
        labels = get_labels(image_id)
        first, extra = body.clicks[0], body.clicks[1:]
        if not first.positive:
            raise HTTPException(status_code=422, detail="first click must be positive")
        clicks = [(c.x, c.y, c.positive) for c in extra]
        return _mask_response(checked_query(labels, (first.x, first.y), body.g, clicks=clicks))

    @app.get("/api/images/{image_id}/raw")
    def raw(image_id: str) -> FileResponse:
        get_labels(image_id)
        path = state.images.get(image_id)
        if path is None:
            raise HTTPException(status_code=404, detail=f"no raw image for {image_id!r}")
        media = "image/png" if path.suffix == ".png" else "image/jpeg"
        return FileResponse(path, media_type=media)

    return app
