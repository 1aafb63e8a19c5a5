"""Order-grounded training-sample construction and iterative deocclusion.

Training construction builds one supervised step (remove a synthetic
occluder) from purely modal data. The order-grounded rule subtracts every
known occluder from the synthetic mask, which removes the dual-occlusion
ambiguity: a synthetic occluder can otherwise hide an existing occluder and
teach the model that a partially occluded shape is complete.

Inference walks occluders nearest-first, rebuilding the background and
deoccluded-region conditions at every step exactly as training does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .backends import (
    BackendError,
    CompletionBackend,
    FullRequest,
    PartialRequest,
)
from .masks import (
    BinaryMask,
    RgbaImage,
    apply_mask,
    resample,
    resample_mask,
    roi_crop_spec,
    set_op,
    union_all,
    whole_image_spec,
)


class FullyOccludedError(ValueError):
    """The instance has no visible pixels, so the loop state is undefined."""


class BackendContractError(RuntimeError):
    """A backend violated the completion contract (alpha shrank)."""


class StepwiseAborted(RuntimeError):
    """Backend failure mid-loop; carries the trace of completed steps."""

    def __init__(self, step: int, trace: list, cause: Exception):
        super().__init__(f"backend failed at step {step}: {cause}")
        self.step = step
        self.trace = trace


# ---------------------------------------------------------------------------
# training-sample construction (one synthetic-occluder step)


@dataclass(frozen=True)
class TrainingSample:
    """One supervised deocclusion step.

    ``target`` is the less-occluded state (the label), ``input`` the state
    after the synthetic occluder landed; the three masks and the background
    image are the model's conditions.
    """

    target: RgbaImage
    input: RgbaImage
    occluder: BinaryMask
    deoccluded: BinaryMask
    background: RgbaImage
    instance: BinaryMask
    fully_occluded: bool = False


def candidate_regions(
    instance: BinaryMask,
    existing_occluders: list[BinaryMask],
    generated: BinaryMask,
    others: tuple[BinaryMask, ...] = (),
) -> list[BinaryMask]:
    """Visible non-occludee regions eligible for the synthetic deoccluded mask.

    Other instances' modal masks (when known) come first, then connected
    components of the leftover background.
    """
    w, h = instance.width, instance.height
    blocked = union_all(
        [instance, generated, *existing_occluders, *others], width=w, height=h
    )
    free = ~blocked.data
    labels, count = ndimage.label(free)
    comps = [BinaryMask(labels == i) for i in range(1, count + 1)]
    return list(others) + comps


def construct_sample(
    x: RgbaImage,
    instance: BinaryMask,
    existing_occluders: list[BinaryMask],
    generated: BinaryMask,
    rng: np.random.Generator,
    others: tuple[BinaryMask, ...] = (),
    order_grounded: bool = True,
) -> TrainingSample:
    """Build one training step from an image and its occlusion annotations.

    ``order_grounded=False`` skips the subtraction of existing occluders
    from the generated mask; it exists only to demonstrate the label
    contamination that the grounded rule removes.
    """
    for m in (instance, generated, *existing_occluders, *others):
        if m.data.shape != x.data.shape[:2]:
            raise ValueError(
                f"mask {m.width}x{m.height} does not match image {x.width}x{x.height}"
            )
    if instance.is_empty:
        raise ValueError("cannot construct a sample for an instance with no visible pixels")

    union_existing = union_all(existing_occluders, width=x.width, height=x.height)
    occluder = set_op(generated, union_existing, "difference") if order_grounded else generated
    instance_new = set_op(instance, occluder, "difference")
    cands = candidate_regions(instance, existing_occluders, generated, others)
    picked = [c for c in cands if rng.random() < 0.5]
    deoccluded = set_op(
        union_all(picked, width=x.width, height=x.height), occluder, "difference"
    )
    keep = BinaryMask(~deoccluded.data & ~occluder.data & ~instance_new.data)
    return TrainingSample(
        target=apply_mask(x, instance),
        input=apply_mask(x, instance_new),
        occluder=occluder,
        deoccluded=deoccluded,
        background=apply_mask(x, keep),
        instance=instance_new,
        fully_occluded=instance_new.is_empty,
    )


def construct_sample_multi(
    x: RgbaImage,
    instance: BinaryMask,
    existing_occluders: list[BinaryMask],
    generated_list: list[BinaryMask],
    rng: np.random.Generator,
    others: tuple[BinaryMask, ...] = (),
    order_grounded: bool = True,
    k_max: int = 4,
) -> TrainingSample:
    """Multi-occluder extension: the generated masks act as one occluder."""
    if not 1 <= len(generated_list) <= k_max:
        raise ValueError(f"need between 1 and {k_max} generated masks, got {len(generated_list)}")
    merged = union_all(generated_list)
    return construct_sample(
        x, instance, existing_occluders, merged, rng, others=others, order_grounded=order_grounded
    )


def check_sample_invariants(
    sample: TrainingSample, existing_occluders: list[BinaryMask]
) -> list[str]:
    """All disjointness obligations of a training sample; empty = clean."""
    problems = []
    w, h = sample.occluder.width, sample.occluder.height
    existing = union_all(existing_occluders, width=w, height=h)
    if set_op(sample.occluder, existing, "intersect").area:
        problems.append("occluder overlaps an existing occluder")
    if set_op(sample.instance, sample.occluder, "intersect").area:
        problems.append("instance overlaps the occluder")
    if set_op(sample.deoccluded, sample.occluder, "intersect").area:
        problems.append("deoccluded region overlaps the occluder")
    bg_support = sample.background.alpha_mask()
    involved = union_all([sample.instance, sample.occluder, sample.deoccluded])
    if set_op(bg_support, involved, "intersect").area:
        problems.append("background support leaks into instance/occluder/deoccluded")
    expect_input = apply_mask(sample.target, sample.instance)
    if expect_input != sample.input:
        problems.append("input does not equal the target restricted to the instance mask")
    return problems


def contaminated_label_pixels(
    occluder: BinaryMask, gt_modal: BinaryMask, gt_amodal: BinaryMask
) -> int:
    """Pixels the sample claims revealed although ground truth keeps them
    hidden behind a remaining occluder (the dual-occlusion ambiguity)."""
    hidden = set_op(gt_amodal, gt_modal, "difference")
    return set_op(occluder, hidden, "intersect").area


def place_mask(
    source: BinaryMask,
    canvas: tuple[int, int],
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.5, 1.5),
) -> BinaryMask:
    """Drop a donor instance mask onto a canvas at random scale and position.

    This is how synthetic occluders are drawn from other images: crop the
    donor to its bounding box, rescale by a factor in ``scale_range``
    (nearest neighbor), and translate so it always intersects the canvas.
    """
    w, h = canvas
    box = source.bbox()
    if box is None:
        return BinaryMask.empty(w, h)
    x0, y0, x1, y1 = box
    patch = source.data[y0:y1, x0:x1]
    scale = float(rng.uniform(*scale_range))
    ph = max(1, min(h, int(round(patch.shape[0] * scale))))
    pw = max(1, min(w, int(round(patch.shape[1] * scale))))
    src_y = np.minimum((np.arange(ph) / scale).astype(int), patch.shape[0] - 1)
    src_x = np.minimum((np.arange(pw) / scale).astype(int), patch.shape[1] - 1)
    scaled = patch[np.ix_(src_y, src_x)]
    ox = int(rng.integers(0, max(w - pw, 0) + 1))
    oy = int(rng.integers(0, max(h - ph, 0) + 1))
    out = np.zeros((h, w), dtype=bool)
    out[oy : oy + ph, ox : ox + pw] = scaled
    return BinaryMask(out)


# ---------------------------------------------------------------------------
# iterative inference (nearest occluder first)


@dataclass
class DeoccState:
    """Loop state: current estimate, its mask, processed regions, queue."""

    step: int
    current: RgbaImage
    instance: BinaryMask
    deoccluded: BinaryMask
    queue: tuple[BinaryMask, ...]


@dataclass(frozen=True)
class StepTrace:
    step: int
    backend: str
    occluder_area: int
    mask_area_before: int
    mask_area_after: int
    deoccluded_area: int


@dataclass(frozen=True)
class DeoccResult:
    rgba: RgbaImage
    mask: BinaryMask
    trace: tuple[StepTrace, ...]


def infer_stepwise(
    x: RgbaImage,
    instance: BinaryMask,
    occluders: list[BinaryMask],
    backend: CompletionBackend,
    seed: int = 0,
) -> DeoccResult:
    """Remove occluders one step at a time, nearest first.

    The deoccluded ledger grows by (occluder minus the pre-step instance
    mask) each step; the instance mask is whatever the backend decodes, so
    it must never shrink (contract violation otherwise).
    """
    if "partial" not in backend.capabilities:
        raise BackendError(f"backend {backend.identity} does not support partial completion")
    if instance.is_empty:
        raise FullyOccludedError("instance has no visible pixels; cannot enter the loop")
    state = DeoccState(
        step=len(occluders),
        current=apply_mask(x, instance),
        instance=instance,
        deoccluded=BinaryMask.empty(x.width, x.height),
        queue=tuple(occluders),
    )
    trace: list[StepTrace] = []
    while state.queue:
        occluder, rest = state.queue[0], state.queue[1:]
        keep = BinaryMask(~state.deoccluded.data & ~occluder.data & ~state.instance.data)
        background = apply_mask(x, keep)
        req = PartialRequest(
            image=state.current,
            instance_mask=state.instance,
            deoccluded_mask=state.deoccluded,
            occluder_mask=occluder,
            background=background,
            seed=seed + len(occluders) - state.step,
        )
        try:
            result = backend.complete_partial(req)
        except Exception as exc:  # noqa: BLE001 - backend boundary
            raise StepwiseAborted(state.step, trace, exc) from exc
        if not result.mask.contains(state.instance):
            raise BackendContractError(
                f"backend {backend.identity} shrank the instance mask at step {state.step}"
            )
        deoccluded = set_op(
            state.deoccluded, set_op(occluder, state.instance, "difference"), "union"
        )
        trace.append(
            StepTrace(
                step=state.step,
                backend=backend.identity,
                occluder_area=occluder.area,
                mask_area_before=state.instance.area,
                mask_area_after=result.mask.area,
                deoccluded_area=deoccluded.area,
            )
        )
        state = DeoccState(
            step=state.step - 1,
            current=result.rgba,
            instance=result.mask,
            deoccluded=deoccluded,
            queue=rest,
        )
    return DeoccResult(state.current, state.instance, tuple(trace))


# ---------------------------------------------------------------------------
# full completion


@dataclass(frozen=True)
class VariationResult:
    seed: int
    rgba: RgbaImage | None
    mask: BinaryMask | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def infer_full(
    x: RgbaImage,
    instance: BinaryMask,
    text: str | None,
    backend: CompletionBackend,
    variations: int,
    rng: np.random.Generator,
) -> list[VariationResult]:
    """Draw ``variations`` independent completions (one seed each)."""
    if "full" not in backend.capabilities:
        raise BackendError(f"backend {backend.identity} does not support full completion")
    if variations < 1:
        raise ValueError("need at least one variation")
    out = []
    for _ in range(variations):
        seed = int(rng.integers(0, 2**63 - 1))
        try:
            result = backend.complete_full(FullRequest(image=x, instance_mask=instance, text=text, seed=seed))
            mask = set_op(result.mask, instance, "union")
            out.append(VariationResult(seed=seed, rgba=result.rgba, mask=mask))
        except Exception as exc:  # noqa: BLE001 - backend boundary
            out.append(VariationResult(seed=seed, rgba=None, mask=None, error=str(exc)))
    return out


@dataclass(frozen=True)
class GlobalToLocalResult:
    rgba: RgbaImage
    pass1: RgbaImage
    spec1: object
    spec2: object | None
    warning: str | None = None


def infer_global_to_local(
    x: RgbaImage,
    instance: BinaryMask,
    backend: CompletionBackend,
    strength2: float,
    context: float = 0.5,
    text: str | None = None,
    seed: int = 0,
) -> GlobalToLocalResult:
    """Whole-image pass, then a reduced-strength ROI refinement pass
    initialized from the first result; outside the ROI the first pass wins."""
    if "full" not in backend.capabilities:
        raise BackendError(f"backend {backend.identity} does not support full completion")
    if not 0.0 < strength2 < 1.0:
        raise ValueError(f"strength2 must lie in (0, 1), got {strength2}")
    # resolution-free backends work at native crop scale (no resampling,
    # so ground-truth backends stay pixel-exact); model-bound backends get
    # their fixed input side
    model_side = backend.resolution or max(x.width, x.height)
    spec1 = whole_image_spec(x.width, x.height, model_side)
    crop_x = resample(x, spec1, "extract")
    crop_m = resample_mask(instance, spec1, "extract")
    res1 = backend.complete_full(
        FullRequest(image=crop_x, instance_mask=crop_m, text=text, seed=seed, window=spec1)
    )
    blank = RgbaImage.blank(x.width, x.height)
    pass1 = resample(res1.rgba, spec1, "paste", base=blank)
    amodal1 = pass1.alpha_mask()
    if amodal1.is_empty:
        return GlobalToLocalResult(
            rgba=pass1,
            pass1=pass1,
            spec1=spec1,
            spec2=None,
            warning="pass-1 amodal mask empty; skipped the ROI refinement pass",
        )
    spec2 = roi_crop_spec(amodal1, context, (x.width, x.height), model_side)
    if backend.resolution is None:
        spec2 = roi_crop_spec(amodal1, context, (x.width, x.height), spec2.side)
    crop2_x = resample(x, spec2, "extract")
    crop2_m = resample_mask(instance, spec2, "extract")
    init2 = resample(pass1, spec2, "extract")
    res2 = backend.complete_full(
        FullRequest(
            image=crop2_x,
            instance_mask=crop2_m,
            text=text,
            seed=seed + 1,
            init=init2,
            strength=strength2,
            window=spec2,
        )
    )
    final = resample(res2.rgba, spec2, "paste", base=pass1)
    return GlobalToLocalResult(rgba=final, pass1=pass1, spec1=spec1, spec2=spec2)
