"""Completion backends: the pluggable models behind the deocclusion loop.

A backend receives explicit images and masks (no latent exposure), so
non-neural implementations are first-class citizens:

  * OracleBackend     exact answers from synthetic ground truth
  * HeuristicBackend  morphological completion, no learning
  * IdentityBackend   passthrough refiner (returns its initialization)
  * ToyDiffusionBackend  DDIM sampling over a trained toy denoiser

The partial-call contract: the returned alpha must cover the input
instance mask (deocclusion never removes pixels). The engine enforces it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .diffusion import (
    BlockCodec,
    ToyDenoiser,
    ddim_sample,
    decode,
    make_full_bundle,
    make_partial_bundle,
)
from .masks import (
    BinaryMask,
    RgbaImage,
    apply_mask,
    resample,
    resample_mask,
    set_op,
    whole_image_spec,
)


class BackendError(RuntimeError):
    """A backend failed to produce a completion."""


@dataclass(frozen=True)
class PartialRequest:
    image: RgbaImage  # current occludee RGBA (g_i)
    instance_mask: BinaryMask  # m_i
    deoccluded_mask: BinaryMask
    occluder_mask: BinaryMask
    background: RgbaImage
    seed: int = 0


@dataclass(frozen=True)
class FullRequest:
    image: RgbaImage  # full scene (possibly a resampled crop of it)
    instance_mask: BinaryMask  # modal mask
    text: str | None = None
    seed: int = 0
    init: RgbaImage | None = None  # initialization for refinement passes
    strength: float = 1.0
    # where this crop sits in the source canvas; neural backends are
    # translation invariant and ignore it, the ground-truth oracle needs it
    window: object | None = None


@dataclass(frozen=True)
class CompletionResult:
    rgba: RgbaImage
    mask: BinaryMask


class CompletionBackend:
    """Contract shared by all backends; subclasses fill in the calls."""

    identity: str = "abstract"
    capabilities: frozenset = frozenset()
    resolution: int | None = None  # native model resolution, None = any
    # backends that are not safe for concurrent calls declare single-flight
    # and callers serialize them (see serialize_if_single_flight)
    single_flight: bool = False

    def complete_partial(self, req: PartialRequest) -> CompletionResult:
        raise NotImplementedError(f"{self.identity} does not support partial completion")

    def complete_full(self, req: FullRequest) -> CompletionResult:
        raise NotImplementedError(f"{self.identity} does not support full completion")


class _SerializedBackend(CompletionBackend):
    def __init__(self, inner: CompletionBackend):
        import threading

        self._inner = inner
        self._lock = threading.Lock()
        self.identity = inner.identity
        self.capabilities = inner.capabilities
        self.resolution = inner.resolution

    def complete_partial(self, req: PartialRequest) -> CompletionResult:
        with self._lock:
            return self._inner.complete_partial(req)

    def complete_full(self, req: FullRequest) -> CompletionResult:
        with self._lock:
            return self._inner.complete_full(req)


def serialize_if_single_flight(backend: CompletionBackend) -> CompletionBackend:
    """Wrap single-flight backends behind a lock so concurrent per-instance
    inference stays safe regardless of the backend's own thread story."""
    if backend.single_flight:
        return _SerializedBackend(backend)
    return backend


def _masked_result(rgb_source: RgbaImage, mask: BinaryMask) -> CompletionResult:
    return CompletionResult(apply_mask(rgb_source, mask), mask)


# ---------------------------------------------------------------------------


class OracleBackend(CompletionBackend):
    """Ground-truth backend over synthetic scene layers.

    Matches the requested instance by maximal modal overlap (requiring the
    current mask to stay inside one amodal extent), then reveals the true
    amodal content under the processed occluder. Final states are exact;
    intermediate states may run ahead of strict physical reveal order, which
    no consumer observes.
    """

    identity = "oracle"
    capabilities = frozenset({"partial", "full"})

    def __init__(self, instances):
        """``instances``: iterable of (modal, amodal_mask, amodal_rgba)."""
        self._instances = list(instances)
        if not self._instances:
            raise ValueError("oracle needs at least one instance")

    @classmethod
    def from_scene(cls, scene) -> "OracleBackend":
        entries = []
        for k, layer in enumerate(scene.layers):
            entries.append((scene.modal_mask(k), layer.amodal, layer.rgba))
        return cls(entries)

    @classmethod
    def from_records(cls, loaded_records) -> "OracleBackend":
        return cls(
            [(rec.modal, rec.amodal_mask, rec.amodal_rgba) for rec in loaded_records]
        )

    def _match(self, current: BinaryMask):
        best = None
        best_overlap = 0
        for modal, amodal, rgba in self._instances:
            if modal.data.shape != current.data.shape:
                continue
            if not amodal.contains(current):
                continue
            overlap = set_op(modal, current, "intersect").area
            if overlap > best_overlap:
                best = (modal, amodal, rgba)
                best_overlap = overlap
        if best is None:
            raise BackendError("oracle found no ground-truth instance containing the query mask")
        return best

    def complete_partial(self, req: PartialRequest) -> CompletionResult:
        _, amodal, rgba = self._match(req.instance_mask)
        grown = set_op(
            req.instance_mask, set_op(amodal, req.occluder_mask, "intersect"), "union"
        )
        return _masked_result(rgba, grown)

    def complete_full(self, req: FullRequest) -> CompletionResult:
        if req.window is not None:
            h, w = self._instances[0][0].data.shape
            inst_full = resample_mask(
                req.instance_mask, req.window, "paste", base=BinaryMask.empty(w, h)
            )
            _, amodal, rgba = self._match(inst_full)
            crop = resample(apply_mask(rgba, amodal), req.window, "extract")
            return CompletionResult(crop, crop.alpha_mask())
        _, amodal, rgba = self._match(req.instance_mask)
        return _masked_result(rgba, amodal)


# ---------------------------------------------------------------------------


class HeuristicBackend(CompletionBackend):
    """Morphology-only completion; useful as a non-neural baseline.

    Partial: geodesic dilation of the current mask into the occluder region
    (flood until convergence), colors from the nearest visible pixel.
    Full: binary closing plus hole filling around the modal mask.
    """

    identity = "heuristic"
    capabilities = frozenset({"partial", "full"})

    def __init__(self, closing_radius: int = 6):
        self.closing_radius = closing_radius

    @staticmethod
    def _nearest_fill(source: RgbaImage, known: BinaryMask, target: BinaryMask) -> RgbaImage:
        """RGB for ``target`` pixels copied from the nearest ``known`` pixel."""
        out = np.zeros_like(source.data)
        if known.is_empty:
            sel = target.data
            out[sel, 3] = 255
            return RgbaImage(out)
        _, (iy, ix) = ndimage.distance_transform_edt(~known.data, return_indices=True)
        sel = target.data
        out[sel, :3] = source.data[iy[sel], ix[sel], :3]
        out[sel, 3] = 255
        return RgbaImage(out)

    def complete_partial(self, req: PartialRequest) -> CompletionResult:
        allowed = set_op(req.instance_mask, req.occluder_mask, "union")
        grown = ndimage.binary_dilation(
            req.instance_mask.data, iterations=0, mask=allowed.data
        )
        grown_mask = BinaryMask(grown)
        filled = self._nearest_fill(req.image, req.instance_mask, grown_mask)
        out = filled.data.copy()
        sel = req.instance_mask.data
        out[sel] = req.image.data[sel]
        out[sel, 3] = 255
        return CompletionResult(RgbaImage(out), grown_mask)

    def complete_full(self, req: FullRequest) -> CompletionResult:
        r = self.closing_radius
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        disk = (yy * yy + xx * xx) <= r * r
        closed = ndimage.binary_closing(req.instance_mask.data, structure=disk)
        closed = ndimage.binary_fill_holes(closed)
        full = BinaryMask(closed | req.instance_mask.data)
        visible = apply_mask(req.image, req.instance_mask)
        filled = self._nearest_fill(visible, req.instance_mask, full)
        out = filled.data.copy()
        sel = req.instance_mask.data
        out[sel] = visible.data[sel]
        return CompletionResult(RgbaImage(out), full)


# ---------------------------------------------------------------------------


class IdentityBackend(CompletionBackend):
    """Full-completion passthrough: returns its init (or the masked input).

    Stands in for a refiner in tests and satisfies the zero-strength limit
    exactly.
    """

    identity = "identity"
    capabilities = frozenset({"full"})

    def complete_full(self, req: FullRequest) -> CompletionResult:
        if req.init is not None:
            return CompletionResult(req.init, req.init.alpha_mask())
        masked = apply_mask(req.image, req.instance_mask)
        return CompletionResult(masked, req.instance_mask)


# ---------------------------------------------------------------------------


class ToyDiffusionBackend(CompletionBackend):
    """DDIM sampling over a trained toy denoiser.

    Inputs at a different resolution are moved through a whole-image square
    crop to the model grid and pasted back afterwards. Visible instance
    pixels are copied from the input so the original content survives
    sampling artifacts.
    """

    capabilities = frozenset({"partial", "full"})

    def __init__(self, denoiser: ToyDenoiser, steps: int = 20, eta: float = 0.0):
        self.denoiser = denoiser
        self.codec = BlockCodec(denoiser.config.latent_factor)
        self.steps = steps
        self.eta = eta
        self.resolution = denoiser.config.resolution
        self.identity = f"toy-diffusion[{denoiser.config.resolution}]"

    def _spec_for(self, img: RgbaImage):
        if img.width == self.resolution and img.height == self.resolution:
            return None
        return whole_image_spec(img.width, img.height, self.resolution)

    def _sample(self, bundle, seed: int, strength: float, init_latent):
        rng = np.random.Generator(np.random.PCG64(seed))
        z = ddim_sample(
            self.denoiser,
            bundle,
            self.denoiser.sched,
            steps=self.steps,
            eta=self.eta,
            strength=strength,
            init=init_latent,
            rng=rng,
        )
        return decode(z, self.codec)

    @staticmethod
    def _compose(decoded_rgba, decoded_mask, visible: RgbaImage, instance: BinaryMask):
        mask = set_op(decoded_mask, instance, "union")
        out = np.zeros_like(decoded_rgba.data)
        sel = mask.data
        out[sel, :3] = decoded_rgba.data[sel, :3]
        out[sel, 3] = 255
        vis = instance.data
        out[vis, :3] = visible.data[vis, :3]
        return CompletionResult(RgbaImage(out), mask)

    def complete_partial(self, req: PartialRequest) -> CompletionResult:
        spec = self._spec_for(req.image)
        if spec is None:
            image, inst, deoc, occ, bg = (
                req.image,
                req.instance_mask,
                req.deoccluded_mask,
                req.occluder_mask,
                req.background,
            )
        else:
            image = resample(req.image, spec, "extract")
            inst = resample_mask(req.instance_mask, spec, "extract")
            deoc = resample_mask(req.deoccluded_mask, spec, "extract")
            occ = resample_mask(req.occluder_mask, spec, "extract")
            bg = resample(req.background, spec, "extract")
        bundle = make_partial_bundle(
            image, inst, deoc, occ, bg, self.codec, self.denoiser.config.text_width
        )
        rgba, mask = self._sample(bundle, req.seed, 1.0, None)
        result = self._compose(rgba, mask, image, inst)
        if spec is None:
            return result
        base = RgbaImage.blank(req.image.width, req.image.height)
        pasted = resample(result.rgba, spec, "paste", base=base)
        mask_full = set_op(pasted.alpha_mask(), req.instance_mask, "union")
        return CompletionResult(apply_mask(pasted, mask_full), mask_full)

    def complete_full(self, req: FullRequest) -> CompletionResult:
        spec = self._spec_for(req.image)
        if spec is None:
            image, inst = req.image, req.instance_mask
            init = req.init
        else:
            image = resample(req.image, spec, "extract")
            inst = resample_mask(req.instance_mask, spec, "extract")
            init = resample(req.init, spec, "extract") if req.init is not None else None
        bundle = make_full_bundle(
            image, inst, req.text, self.codec, self.denoiser.config.text_width
        )
        init_latent = self.codec.encode(init) if init is not None else None
        rgba, mask = self._sample(bundle, req.seed, req.strength, init_latent)
        visible = apply_mask(image, inst)
        result = self._compose(rgba, mask, visible, inst)
        if spec is None:
            return result
        base = RgbaImage.blank(req.image.width, req.image.height)
        pasted = resample(result.rgba, spec, "paste", base=base)
        mask_full = set_op(pasted.alpha_mask(), req.instance_mask, "union")
        return CompletionResult(apply_mask(pasted, mask_full), mask_full)
