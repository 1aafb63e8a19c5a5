"""Layered synthetic scenes with exact amodal ground truth.

Scenes are stacks of parametric shapes composited by the painter's
algorithm. Every layer keeps its full (amodal) mask and appearance before
compositing, which makes the generator the verification oracle for the
whole deocclusion pipeline: modal masks, occlusion edges, and completed
RGBA results can all be checked pixel-exactly.

Fills are deterministic functions of global pixel coordinates, so a
completed region is bit-identical to the ground-truth appearance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import InstanceRecord, OcclusionGraph, occluders_of, occlusion_percentage
from .masks import (
    BinaryMask,
    RgbaImage,
    read_mask_png,
    read_rgba_png,
    set_op,
    union_all,
    write_mask_png,
    write_rgba_png,
)

SHAPE_KINDS = ("ellipse", "rectangle", "polygon", "blob")
TEXTURE_KINDS = ("solid", "checker", "stripes")


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = (128, 128)
    layer_range: tuple[int, int] = (2, 5)
    size_range: tuple[int, int] = (32, 80)
    shapes: tuple[str, ...] = SHAPE_KINDS
    textures: tuple[str, ...] = TEXTURE_KINDS
    texture_cell: int = 4

    def validate(self):
        w, h = self.canvas
        lo, hi = self.layer_range
        smin, smax = self.size_range
        if w <= 0 or h <= 0:
            raise ValueError(f"canvas must be positive, got {self.canvas}")
        if not (1 <= lo <= hi <= 8):
            raise ValueError(f"layer_range must lie within [1, 8], got {self.layer_range}")
        if not (2 <= smin <= smax):
            raise ValueError(f"size_range must be >= 2 and ordered, got {self.size_range}")
        if smax > min(w, h):
            raise ValueError(f"max shape size {smax} exceeds canvas {self.canvas}")
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        unknown = set(self.textures) - set(TEXTURE_KINDS)
        if unknown:
            raise ValueError(f"unknown textures {sorted(unknown)}")


@dataclass(frozen=True)
class Fill:
    kind: str
    color_a: tuple[int, int, int]
    color_b: tuple[int, int, int]
    cell: int
    orientation: int  # stripes: 0 horizontal, 1 vertical, 2 diagonal


@dataclass(frozen=True)
class Layer:
    shape: str
    fill: Fill
    amodal: BinaryMask
    rgba: RgbaImage


@dataclass(frozen=True)
class LayeredScene:
    """Depth-ordered stack; ``layers[0]`` is the farthest (painted first)."""

    canvas: tuple[int, int]
    layers: tuple[Layer, ...]
    seed: int
    background: tuple[int, int, int]

    def composite(self) -> RgbaImage:
        w, h = self.canvas
        out = np.empty((h, w, 4), dtype=np.uint8)
        out[..., 0] = self.background[0]
        out[..., 1] = self.background[1]
        out[..., 2] = self.background[2]
        out[..., 3] = 255
        for layer in self.layers:
            sel = layer.amodal.data
            out[sel, :3] = layer.rgba.data[sel, :3]
        return RgbaImage(out)

    def modal_mask(self, index: int) -> BinaryMask:
        """Visible part of layer ``index``: amodal minus all nearer amodals."""
        nearer = [l.amodal for l in self.layers[index + 1 :]]
        m = self.layers[index].amodal
        if nearer:
            m = set_op(m, union_all(nearer), "difference")
        return m


# ---------------------------------------------------------------------------
# rasterization


def _raster_ellipse(w, h, cx, cy, ax, ay, theta) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _raster_rectangle(w, h, cx, cy, hw, hh, theta) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (np.abs(u) <= hw) & (np.abs(v) <= hh)


def _raster_star(w, h, cx, cy, radii, phases) -> np.ndarray:
    """Star-convex region: pixel is inside iff its radius is below the
    angular radius function (a small Fourier series, always positive)."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    ang = np.arctan2(dy, dx)
    r = np.sqrt(dx * dx + dy * dy)
    bound = np.full(ang.shape, radii[0])
    for k, (amp, ph) in enumerate(zip(radii[1:], phases), start=1):
        bound = bound + amp * np.cos(k * ang + ph)
    return r <= bound


def _raster_convex_polygon(w, h, pts) -> np.ndarray:
    """Intersection of edge half-planes; ``pts`` counter-clockwise."""
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((h, w), dtype=bool)
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        inside &= (px - x0) * (y1 - y0) - (py - y0) * (x1 - x0) <= 0
    return inside


def _texture_rgb(fill: Fill, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    a = np.array(fill.color_a, dtype=np.uint8)
    b = np.array(fill.color_b, dtype=np.uint8)
    if fill.kind == "solid":
        return np.broadcast_to(a, (h, w, 3)).copy()
    if fill.kind == "checker":
        sel = ((xs // fill.cell) + (ys // fill.cell)) % 2 == 0
    else:  # stripes
        if fill.orientation == 0:
            sel = (ys // fill.cell) % 2 == 0
        elif fill.orientation == 1:
            sel = (xs // fill.cell) % 2 == 0
        else:
            sel = ((xs + ys) // fill.cell) % 2 == 0
    out = np.where(sel[..., None], a, b)
    return out.astype(np.uint8)


def _sample_layer(config: SceneConfig, rng: np.random.Generator) -> Layer:
    w, h = config.canvas
    smin, smax = config.size_range
    shape = config.shapes[int(rng.integers(len(config.shapes)))]
    size = int(rng.integers(smin, smax + 1))
    half = size / 2.0
    cx = float(rng.uniform(half, w - half))
    cy = float(rng.uniform(half, h - half))
    if shape == "ellipse":
        ax = half
        ay = half * float(rng.uniform(0.5, 1.0))
        theta = float(rng.uniform(0, math.pi))
        mask = _raster_ellipse(w, h, cx, cy, ax, ay, theta)
    elif shape == "rectangle":
        hw = half
        hh = half * float(rng.uniform(0.4, 1.0))
        theta = float(rng.uniform(0, math.pi / 2))
        mask = _raster_rectangle(w, h, cx, cy, hw, hh, theta)
    elif shape == "polygon":
        k = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        rad = half * rng.uniform(0.6, 1.0, size=k)
        pts = [(cx + r * math.cos(t), cy + r * math.sin(t)) for r, t in zip(rad, angles)]
        pts = _convex_hull(pts)
        mask = _raster_convex_polygon(w, h, pts)
    else:  # blob
        base = half * 0.8
        n_harm = 3
        amps = rng.uniform(0.05, 0.18, size=n_harm) * base
        phases = rng.uniform(0, 2 * math.pi, size=n_harm)
        mask = _raster_star(w, h, cx, cy, [base, *amps], phases)
    if not mask.any():
        # degenerate draws collapse to a small centered square
        mask = _raster_rectangle(w, h, cx, cy, max(2.0, half / 2), max(2.0, half / 2), 0.0)
    texture = config.textures[int(rng.integers(len(config.textures)))]
    color_a = tuple(int(v) for v in rng.integers(40, 256, size=3))
    color_b = tuple(int(v) for v in rng.integers(0, 200, size=3))
    fill = Fill(texture, color_a, color_b, config.texture_cell, int(rng.integers(3)))
    rgb = _texture_rgb(fill, w, h)
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    rgba[mask, :3] = rgb[mask]
    rgba[mask, 3] = 255
    return Layer(shape, fill, BinaryMask(mask), RgbaImage(rgba))


def _convex_hull(pts):
    pts = sorted(set(pts))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def sample_scene(config: SceneConfig, seed: int) -> LayeredScene:
    """Deterministic scene draw; the same (config, seed) is bit-identical."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    lo, hi = config.layer_range
    n_layers = int(rng.integers(lo, hi + 1))
    background = tuple(int(v) for v in rng.integers(10, 60, size=3))
    layers = tuple(_sample_layer(config, rng) for _ in range(n_layers))
    return LayeredScene(config.canvas, layers, seed, background)


# ---------------------------------------------------------------------------
# ground-truth graph


def instance_id(layer_index: int) -> str:
    return f"L{layer_index:02d}"


def derive_graph(scene: LayeredScene) -> OcclusionGraph:
    """Exact occlusion graph: edge (i -> j) iff layer i is nearer than j and
    their amodal masks overlap. Depth 0 is the nearest layer."""
    n = len(scene.layers)
    instances = []
    for k, layer in enumerate(scene.layers):
        instances.append(
            InstanceRecord(
                id=instance_id(k),
                modal=scene.modal_mask(k),
                amodal=layer.amodal,
                category=layer.shape,
                depth=float(n - 1 - k),
            )
        )
    edges = []
    for i in range(n):
        for j in range(n):
            if i <= j:
                continue
            # i nearer than j
            if set_op(scene.layers[i].amodal, scene.layers[j].amodal, "intersect").area > 0:
                edges.append((instance_id(i), instance_id(j)))
    return OcclusionGraph.build(instances, edges)


# ---------------------------------------------------------------------------
# dataset emission
#
# Per occluded instance ``{id}``:
#   {id}.image.png    composite scene (opaque RGBA)
#   {id}.modal.png    visible mask
#   {id}.amodal.png   ground-truth amodal RGBA (alpha = amodal mask)
#   {id}.meta.json    category, caption placeholder, ordered occluder ids,
#                     occlusion_pct, plus every scene instance's modal mask
#                     so occlusion orders can be reviewed and corrected
# manifest.jsonl lists one record per instance (occluded or unoccluded).


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    state: str  # "occluded" | "unoccluded"
    occlusion_pct: float | None = None
    occluder_count: int | None = None
    amodal_bbox_side: int | None = None
    category: str | None = None
    fully_occluded: bool = False
    files: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {"id": self.id, "state": self.state}
        if self.state == "occluded":
            doc.update(
                occlusion_pct=self.occlusion_pct,
                occluder_count=self.occluder_count,
                amodal_bbox_side=self.amodal_bbox_side,
                category=self.category,
                fully_occluded=self.fully_occluded,
                files=self.files,
            )
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetRecord":
        if doc["state"] != "occluded":
            return cls(id=doc["id"], state=doc["state"])
        return cls(
            id=doc["id"],
            state="occluded",
            occlusion_pct=doc["occlusion_pct"],
            occluder_count=doc["occluder_count"],
            amodal_bbox_side=doc["amodal_bbox_side"],
            category=doc.get("category"),
            fully_occluded=doc.get("fully_occluded", False),
            files=doc.get("files", {}),
        )


@dataclass(frozen=True)
class Manifest:
    directory: Path
    records: tuple[DatasetRecord, ...]

    @property
    def occluded(self) -> tuple[DatasetRecord, ...]:
        return tuple(r for r in self.records if r.state == "occluded")

    def path_of(self, rel: str) -> Path:
        return self.directory / rel


def scene_record_id(scene: LayeredScene, layer_index: int) -> str:
    return f"s{scene.seed:012d}.{instance_id(layer_index)}"


def emit_dataset(scenes, directory: str | Path) -> Manifest:
    """Write the dataset for a list of scenes and return its manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records: list[DatasetRecord] = []
    for scene in scenes:
        g = derive_graph(scene)
        composite = scene.composite()
        for k, layer in enumerate(scene.layers):
            iid = instance_id(k)
            rid = scene_record_id(scene, k)
            occluders = occluders_of(g, iid)
            if not occluders:
                records.append(DatasetRecord(id=rid, state="unoccluded"))
                continue
            inst = g.instances[iid]
            pct = occlusion_percentage(inst)
            bbox = layer.amodal.bbox()
            files = {
                "image": f"{rid}.image.png",
                "modal": f"{rid}.modal.png",
                "amodal": f"{rid}.amodal.png",
                "meta": f"{rid}.meta.json",
            }
            try:
                write_rgba_png(composite, directory / files["image"])
                write_mask_png(inst.modal, directory / files["modal"])
                write_rgba_png(layer.rgba, directory / files["amodal"])
            except OSError as exc:
                raise OSError(f"failed writing dataset files for {rid}: {exc}") from exc
            meta = {
                "id": rid,
                "category": layer.shape,
                "caption": None,
                "occluder_ids": occluders,
                "occlusion_pct": pct,
                "fully_occluded": inst.modal.is_empty,
                "scene_seed": scene.seed,
                "canvas": list(scene.canvas),
                "instances": [],
            }
            for k2 in range(len(scene.layers)):
                iid2 = instance_id(k2)
                rel = f"s{scene.seed:012d}.{iid2}.inst.png"
                inst_path = directory / rel
                if not inst_path.exists():
                    write_mask_png(g.instances[iid2].modal, inst_path)
                meta["instances"].append(
                    {"id": iid2, "modal_png": rel, "depth": float(g.instances[iid2].depth)}
                )
            (directory / files["meta"]).write_text(json.dumps(meta, indent=2))
            records.append(
                DatasetRecord(
                    id=rid,
                    state="occluded",
                    occlusion_pct=pct,
                    occluder_count=len(occluders),
                    amodal_bbox_side=max(bbox[2] - bbox[0], bbox[3] - bbox[1]),
                    category=layer.shape,
                    fully_occluded=inst.modal.is_empty,
                    files=files,
                )
            )
    manifest_path = directory / "manifest.jsonl"
    with manifest_path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    return Manifest(directory, tuple(records))


def load_manifest(directory: str | Path) -> Manifest:
    directory = Path(directory)
    manifest_path = directory / "manifest.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {directory}")
    records = []
    with manifest_path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DatasetRecord.from_json(json.loads(line)))
    return Manifest(directory, tuple(records))


@dataclass(frozen=True)
class LoadedRecord:
    """An occluded record with its pixel data pulled off disk."""

    record: DatasetRecord
    image: RgbaImage
    modal: BinaryMask
    amodal_rgba: RgbaImage
    category: str | None
    caption: str | None
    occluders: tuple[tuple[str, BinaryMask], ...]  # removal order

    @property
    def amodal_mask(self) -> BinaryMask:
        return self.amodal_rgba.alpha_mask()


def load_record(manifest: Manifest, record: DatasetRecord) -> LoadedRecord:
    if record.state != "occluded":
        raise ValueError(f"record {record.id} is not an occluded instance")
    files = record.files
    meta = json.loads(manifest.path_of(files["meta"]).read_text())
    inst_masks = {e["id"]: manifest.path_of(e["modal_png"]) for e in meta["instances"]}
    occluders = tuple(
        (oid, read_mask_png(inst_masks[oid])) for oid in meta["occluder_ids"]
    )
    return LoadedRecord(
        record=record,
        image=read_rgba_png(manifest.path_of(files["image"])),
        modal=read_mask_png(manifest.path_of(files["modal"])),
        amodal_rgba=read_rgba_png(manifest.path_of(files["amodal"])),
        category=meta.get("category"),
        caption=meta.get("caption"),
        occluders=occluders,
    )


# ---------------------------------------------------------------------------
# statistics

OCCLUDER_COUNT_BINS = ("1", "2", "3", "4", "5+")


@dataclass(frozen=True)
class DatasetStats:
    occlusion_pct_histogram: tuple[int, ...]  # 10 uniform bins over [0, 1]
    occluder_count_histogram: dict[str, int]
    amodal_resolution_histogram: dict[int, int]  # keyed by next power of two
    total: int

    def validate(self):
        for name, total in (
            ("occlusion_pct", sum(self.occlusion_pct_histogram)),
            ("occluder_count", sum(self.occluder_count_histogram.values())),
            ("amodal_resolution", sum(self.amodal_resolution_histogram.values())),
        ):
            if total != self.total:
                raise ValueError(f"{name} histogram sums to {total}, expected {self.total}")

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "occlusion_pct_histogram": list(self.occlusion_pct_histogram),
            "occluder_count_histogram": dict(self.occluder_count_histogram),
            "amodal_resolution_histogram": {str(k): v for k, v in self.amodal_resolution_histogram.items()},
        }


def pct_bin(pct: float) -> int:
    """10 uniform bins over [0, 1]; 1.0 folds into the last bin."""
    return min(int(pct * 10), 9)


def count_bin(n: int) -> str:
    return OCCLUDER_COUNT_BINS[min(n, 5) - 1]


def resolution_bin(side: int) -> int:
    p = 1
    while p < side:
        p *= 2
    return p


def statistics(manifest: Manifest) -> DatasetStats:
    pct_hist = [0] * 10
    count_hist = {b: 0 for b in OCCLUDER_COUNT_BINS}
    res_hist: dict[int, int] = {}
    total = 0
    for rec in manifest.occluded:
        if rec.occlusion_pct is None or rec.occluder_count is None or rec.amodal_bbox_side is None:
            raise ValueError(f"record {rec.id} is missing statistics fields")
        total += 1
        pct_hist[pct_bin(rec.occlusion_pct)] += 1
        count_hist[count_bin(rec.occluder_count)] += 1
        key = resolution_bin(rec.amodal_bbox_side)
        res_hist[key] = res_hist.get(key, 0) + 1
    stats = DatasetStats(tuple(pct_hist), count_hist, dict(sorted(res_hist.items())), total)
    stats.validate()
    return stats
