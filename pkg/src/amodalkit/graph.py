"""Per-image instances with pairwise occlusion-order annotations.

An edge (a, b) means instance ``a`` covers part of instance ``b``. Graphs
come either from synthetic scenes (exact, with depth) or from annotation
files (possibly noisy, hence :func:`validate` diagnoses rather than rejects).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .masks import BinaryMask, read_mask_png, set_op, write_mask_png


@dataclass(frozen=True)
class InstanceRecord:
    """One instance: visible (modal) mask plus optional amodal ground truth.

    ``depth`` is available for synthetic scenes (smaller = nearer to the
    viewer); annotation files usually omit it.
    """

    id: str
    modal: BinaryMask
    amodal: BinaryMask | None = None
    category: str | None = None
    depth: float | None = None

    def __post_init__(self):
        if self.amodal is not None and not self.amodal.contains(self.modal):
            raise ValueError(f"instance {self.id}: modal mask must be a subset of the amodal mask")


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class OcclusionGraph:
    instances: dict[str, InstanceRecord]
    edges: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    @classmethod
    def build(cls, instances, edges) -> "OcclusionGraph":
        return cls({inst.id: inst for inst in instances}, frozenset(tuple(e) for e in edges))

    def occluder_ids(self, target: str) -> set[str]:
        return {a for (a, b) in self.edges if b == target}


def _overlap_area(g: OcclusionGraph, occluder: str, occludee: str) -> int:
    occ = g.instances[occluder]
    tgt = g.instances[occludee]
    tgt_mask = tgt.amodal if tgt.amodal is not None else tgt.modal
    if occ.modal.data.shape != tgt_mask.data.shape:
        return 0
    return set_op(occ.modal, tgt_mask, "intersect").area


def occluders_of(g: OcclusionGraph, target: str) -> list[str]:
    """Occluders of ``target`` in removal order: nearest first.

    With depth annotations the order is ascending depth. Without them the
    occluder-of-occluder edges induce the order (whatever covers another
    occluder is nearer). Ties break by larger overlap with the occludee,
    then lexicographic id, so the output is deterministic.
    """
    if target not in g.instances:
        raise KeyError(f"unknown instance id {target!r}")
    cands = sorted(g.occluder_ids(target))
    if not cands:
        return []

    def tie_key(i: str):
        return (-_overlap_area(g, i, target), i)

    if all(g.instances[i].depth is not None for i in cands):
        return sorted(cands, key=lambda i: (g.instances[i].depth, *tie_key(i)))

    # Kahn ordering on the occluder subgraph; cycles (mutual occlusion)
    # fall back to the tie-break among minimal in-degree nodes.
    remaining = set(cands)
    order: list[str] = []
    while remaining:
        indeg = {
            i: sum(1 for (a, b) in g.edges if b == i and a in remaining and a != i)
            for i in remaining
        }
        least = min(indeg.values())
        ready = [i for i in remaining if indeg[i] == least]
        pick = min(ready, key=tie_key)
        order.append(pick)
        remaining.remove(pick)
    return order


def occlusion_percentage(inst: InstanceRecord) -> float:
    """Fraction of the amodal extent that is hidden: 1 - |modal| / |amodal|."""
    if inst.amodal is None:
        raise ValueError(f"instance {inst.id} has no amodal annotation")
    amodal_area = inst.amodal.area
    if amodal_area == 0:
        raise ValueError(f"instance {inst.id} has an empty amodal mask")
    return 1.0 - inst.modal.area / amodal_area


def validate(g: OcclusionGraph) -> list[Finding]:
    """Diagnostics for annotation review; never raises.

    Mutual occlusion is flagged but legal (it happens in real scenes).
    """
    findings: list[Finding] = []
    seen_mutual: set[frozenset[str]] = set()
    for a, b in sorted(g.edges):
        if a == b:
            findings.append(Finding("self_edge", f"instance {a} marked as occluding itself", (a,)))
            continue
        missing = [i for i in (a, b) if i not in g.instances]
        if missing:
            findings.append(
                Finding("dangling_edge", f"edge ({a} -> {b}) references unknown ids {missing}", (a, b))
            )
            continue
        if (b, a) in g.edges and frozenset((a, b)) not in seen_mutual:
            seen_mutual.add(frozenset((a, b)))
            findings.append(
                Finding("mutual_occlusion", f"instances {a} and {b} occlude each other", (a, b))
            )
        ba = _bbox_of(g.instances[a])
        bb = _bbox_of(g.instances[b])
        if ba is not None and bb is not None and not _bboxes_touch(ba, bb):
            findings.append(
                Finding(
                    "disjoint_bboxes",
                    f"edge ({a} -> {b}) joins instances whose masks cannot interact",
                    (a, b),
                )
            )
    return findings


def _bbox_of(inst: InstanceRecord):
    mask = inst.amodal if inst.amodal is not None else inst.modal
    return mask.bbox()


def _bboxes_touch(a, b) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


# ---------------------------------------------------------------------------
# JSON annotation format
#
# {"instances": [{"id", "modal_png", "amodal_png"?, "category"?, "depth"?}],
#  "edges": [["occluder", "occludee"], ...]}
# PNG paths are relative to the JSON file.


def save_graph(g: OcclusionGraph, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc: dict = {"instances": [], "edges": [sorted_edge for sorted_edge in sorted(map(list, g.edges))]}
    for iid in sorted(g.instances):
        inst = g.instances[iid]
        rec: dict = {"id": iid, "modal_png": f"{path.stem}.{iid}.modal.png"}
        write_mask_png(inst.modal, path.parent / rec["modal_png"])
        if inst.amodal is not None:
            rec["amodal_png"] = f"{path.stem}.{iid}.amodal.png"
            write_mask_png(inst.amodal, path.parent / rec["amodal_png"])
        if inst.category is not None:
            rec["category"] = inst.category
        if inst.depth is not None:
            rec["depth"] = inst.depth
        doc["instances"].append(rec)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_graph(path: str | Path) -> OcclusionGraph:
    path = Path(path)
    doc = json.loads(path.read_text())
    instances = []
    for rec in doc["instances"]:
        amodal = None
        if rec.get("amodal_png"):
            amodal = read_mask_png(path.parent / rec["amodal_png"])
        instances.append(
            InstanceRecord(
                id=rec["id"],
                modal=read_mask_png(path.parent / rec["modal_png"]),
                amodal=amodal,
                category=rec.get("category"),
                depth=rec.get("depth"),
            )
        )
    return OcclusionGraph.build(instances, [tuple(e) for e in doc.get("edges", [])])
