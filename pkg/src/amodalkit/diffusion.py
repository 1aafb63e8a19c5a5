"""Noise schedules, DDIM sampling, completion losses, and a toy denoiser.

The denoiser is a small conv stack over channel-concatenated conditions at
toy resolution, written in plain numpy with hand-derived gradients so every
training step is verifiable against finite differences. Condition channels
that do not exist in a vanilla inpainting model (background image, the
deoccluded/occluder/instance mask triple, the full-image latent) enter
through a zero-initialized slice of the first layer, so a fresh model is
bit-for-bit blind to them and can only grow into using them.

Latent convention: float64 arrays of shape (4*f*f, H/f, W/f) in [-1, 1],
produced by lossless space-to-depth reshaping of the RGBA pixels (factor
``f``). Channel (c, dy, dx) of the latent is pixel channel ``c`` at block
offset (dy, dx).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .masks import BinaryMask, RgbaImage, apply_mask, downsample

# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fraction per timestep: z_t = sqrt(a_t) x0 + sqrt(1-a_t) eps."""

    kind: str
    alpha: np.ndarray  # (T+1,), strictly decreasing, alpha[0] ~ 1, alpha[T] ~ 0

    def __post_init__(self):
        arr = np.asarray(self.alpha, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("schedule needs at least two alpha values")
        if not np.all(np.diff(arr) < 0):
            raise ValueError("alpha must be strictly decreasing")
        if arr[0] < 1.0 - 1e-4:
            raise ValueError(f"alpha_0 must be >= 1-1e-4, got {arr[0]}")
        if arr[-1] > 1e-3:
            raise ValueError(f"alpha_T must be <= 1e-3, got {arr[-1]}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "alpha", arr)

    @property
    def T(self) -> int:
        return self.alpha.size - 1


def linear_schedule(T: int) -> NoiseSchedule:
    return NoiseSchedule("linear", np.linspace(1.0, 1e-4, T + 1))


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    u = np.arange(T + 1) / T
    raw = np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2
    # affine rescale to exact endpoints, preserving monotonicity
    a0, aT = 1.0, 1e-4
    alpha = (raw - raw[-1]) / (raw[0] - raw[-1]) * (a0 - aT) + aT
    return NoiseSchedule("cosine", alpha)


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if kind == "linear":
        return linear_schedule(T)
    if kind == "cosine":
        return cosine_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noising step: sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside schedule range [0, {sched.T}]")
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"x0 shape {np.shape(x0)} != eps shape {np.shape(eps)}")
    a = sched.alpha[t]
    return np.sqrt(a) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - a) * np.asarray(
        eps, dtype=np.float64
    )


# ---------------------------------------------------------------------------
# latent codec


class BlockCodec:
    """Lossless space-to-depth codec; the default latent representation.

    encode . decode_rgb is the identity on uint8 images, which keeps the
    algorithms under test free of representation error. A learned codec can
    replace this behind the same three methods.
    """

    def __init__(self, factor: int = 4):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor

    def latent_channels(self) -> int:
        return 4 * self.factor * self.factor

    def encode(self, img: RgbaImage) -> np.ndarray:
        f = self.factor
        h, w = img.height, img.width
        if h % f or w % f:
            raise ValueError(f"image {w}x{h} not divisible by codec factor {f}")
        x = img.data.astype(np.float64) / 127.5 - 1.0
        x = x.reshape(h // f, f, w // f, f, 4)
        return np.ascontiguousarray(x.transpose(4, 1, 3, 0, 2).reshape(4 * f * f, h // f, w // f))

    def _to_pixels(self, lat: np.ndarray) -> np.ndarray:
        f = self.factor
        c, hh, ww = lat.shape
        if c != 4 * f * f:
            raise ValueError(f"latent has {c} channels, codec expects {4 * f * f}")
        x = lat.reshape(4, f, f, hh, ww).transpose(3, 1, 4, 2, 0)
        return x.reshape(hh * f, ww * f, 4)

    def decode_rgb(self, lat: np.ndarray) -> RgbaImage:
        px = (self._to_pixels(lat) + 1.0) * 127.5
        return RgbaImage(np.clip(np.rint(px), 0, 255).astype(np.uint8))

    def decode_mask(self, lat: np.ndarray) -> BinaryMask:
        """Threshold the decoded alpha plane at 0.5 (in [0, 1] units)."""
        alpha01 = (self._to_pixels(lat)[..., 3] + 1.0) / 2.0
        return BinaryMask(alpha01 >= 0.5)


def decode(latent: np.ndarray, codec: BlockCodec) -> tuple[RgbaImage, BinaryMask]:
    """Decode a latent with the separate RGB and mask decoder paths."""
    return codec.decode_rgb(latent), codec.decode_mask(latent)


# ---------------------------------------------------------------------------
# conditioning


def hash_embed(text: str | None, width: int) -> np.ndarray:
    """Deterministic stand-in embedder; empty text is the all-zeros vector."""
    if not text:
        return np.zeros(width, dtype=np.float64)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(-1.0, 1.0, size=width)


@dataclass(frozen=True)
class ConditioningBundle:
    """Condition channels for one completion call.

    partial mode: text must be EMPTY (all zeros), ``extra_images`` is the
    background latent and ``extra_masks`` the (deoccluded, occluder,
    instance) stack. full mode: text may be a real embedding,
    ``extra_images`` is the full-image latent, ``extra_masks`` is absent.
    """

    mode: str
    masked_visible: np.ndarray  # latent (4f^2, h, w)
    inpaint_mask: np.ndarray  # (h, w) float in {0, 1} at latent resolution
    text: np.ndarray  # (text_width,)
    extra_images: np.ndarray  # latent (4f^2, h, w)
    extra_masks: np.ndarray | None  # (3, H, W) float in {0, 1}, pixel space

    def __post_init__(self):
        if self.mode not in ("partial", "full"):
            raise ValueError(f"unknown bundle mode {self.mode!r}")


def validate_bundle(bundle: ConditioningBundle, mode: str):
    """Reject bundle/mode mismatches before any compute happens."""
    if bundle.mode != mode:
        raise ValueError(f"bundle built for mode {bundle.mode!r}, call requested {mode!r}")
    if mode == "partial":
        if bundle.extra_masks is None:
            raise ValueError("partial mode requires the deoccluded/occluder/instance mask stack")
        if bundle.extra_masks.shape[0] != 3:
            raise ValueError(f"mask stack must have 3 channels, got {bundle.extra_masks.shape}")
        if np.any(bundle.text != 0):
            raise ValueError("partial mode uses the empty text embedding")
    else:
        if bundle.extra_masks is not None:
            raise ValueError("full mode carries no extra mask stack")


def make_partial_bundle(
    current: RgbaImage,
    instance: BinaryMask,
    deoccluded: BinaryMask,
    occluder: BinaryMask,
    background: RgbaImage,
    codec: BlockCodec,
    text_width: int = 8,
) -> ConditioningBundle:
    f = codec.factor
    return ConditioningBundle(
        mode="partial",
        masked_visible=codec.encode(current),
        inpaint_mask=downsample(occluder, f).data.astype(np.float64),
        text=np.zeros(text_width, dtype=np.float64),
        extra_images=codec.encode(background),
        extra_masks=np.stack(
            [
                deoccluded.data.astype(np.float64),
                occluder.data.astype(np.float64),
                instance.data.astype(np.float64),
            ]
        ),
    )


def make_full_bundle(
    image: RgbaImage,
    instance: BinaryMask,
    text: str | np.ndarray | None,
    codec: BlockCodec,
    text_width: int = 8,
) -> ConditioningBundle:
    f = codec.factor
    if isinstance(text, np.ndarray):
        vec = text.astype(np.float64)
        if vec.shape != (text_width,):
            raise ValueError(f"text embedding must have width {text_width}, got {vec.shape}")
    else:
        vec = hash_embed(text, text_width)
    return ConditioningBundle(
        mode="full",
        masked_visible=codec.encode(apply_mask(image, instance)),
        inpaint_mask=downsample(instance.complement(), f).data.astype(np.float64),
        text=vec,
        extra_images=codec.encode(image),
        extra_masks=None,
    )


# ---------------------------------------------------------------------------
# toy denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    latent_factor: int = 4
    hidden: int = 24
    depth: int = 3  # conv layer count, >= 2
    kernel: int = 3
    text_width: int = 8

    def __post_init__(self):
        if self.resolution % self.latent_factor:
            raise ValueError("latent factor must divide the resolution")
        if self.depth < 2:
            raise ValueError("need at least an input and an output conv")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd for same padding")

    @property
    def latent_channels(self) -> int:
        return 4 * self.latent_factor**2

    @property
    def latent_side(self) -> int:
        return self.resolution // self.latent_factor

    @property
    def base_channels(self) -> int:
        # z_t | t feats (t/T, sqrt(a), sqrt(1-a)) | masked visible | inpaint | text
        # | context: pooled pyramids of visible alpha and inpaint (2 scales
        #   each) plus two coordinate planes
        return self.latent_channels + 3 + self.latent_channels + 1 + self.text_width + 6

    @property
    def extra_channels(self) -> int:
        # extra image latent | mask triple at latent resolution | pooled
        # luminance pyramid of the extra image (2 scales)
        return self.latent_channels + 3 + 2

    @property
    def in_channels(self) -> int:
        return self.base_channels + self.extra_channels


def _maxpool_mask(mask_hw: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return mask_hw.astype(np.float64)
    h, w = mask_hw.shape
    return mask_hw.reshape(h // f, f, w // f, f).max(axis=(1, 3)).astype(np.float64)


def _pool_up(plane: np.ndarray, s: int) -> np.ndarray:
    """Average-pool by s then nearest-upsample back: cheap long-range context."""
    h, w = plane.shape
    if h % s or w % s:
        return plane
    coarse = plane.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
    return np.repeat(np.repeat(coarse, s, axis=0), s, axis=1)


def featurize_conditions(bundle: ConditioningBundle, config: DenoiserConfig) -> np.ndarray:
    """Static condition channels (everything except z_t and the t features).

    Channel layout, frozen:
      [0 : L)            masked visible latent
      [L : L+1)          inpainting mask at latent resolution
      [. : .+text)       text embedding broadcast to constant planes
      [. : .+6)          context: pooled pyramids (scales 2 and 4) of the
                         visible-alpha plane and the inpaint mask, plus two
                         normalized coordinate planes
      [. : .+L)          extra image latent                  (zero-init block)
      [. : .+3)          deoccluded/occluder/instance masks  (zero-init block)
      [. : .+2)          pooled luminance pyramid of the extra image
                                                             (zero-init block)
    with L = 4 * factor^2 latent channels. The conv stack is small, so the
    pooled pyramids inject the long-range context the kernels cannot reach.
    """
    hs = config.latent_side
    f = config.latent_factor
    L = config.latent_channels
    parts = [bundle.masked_visible, bundle.inpaint_mask[None].astype(np.float64)]
    text_planes = np.broadcast_to(
        bundle.text.astype(np.float64)[:, None, None], (config.text_width, hs, hs)
    )
    parts.append(text_planes)
    # alpha block of the visible latent, averaged to one plane
    vis_alpha = bundle.masked_visible[3 * L // 4 :].mean(axis=0)
    inpaint = bundle.inpaint_mask.astype(np.float64)
    coords = np.mgrid[0:hs, 0:hs].astype(np.float64) / max(hs - 1, 1) - 0.5
    parts.append(
        np.stack(
            [
                _pool_up(vis_alpha, 2),
                _pool_up(vis_alpha, 4),
                _pool_up(inpaint, 2),
                _pool_up(inpaint, 4),
                coords[1],
                coords[0],
            ]
        )
    )
    parts.append(bundle.extra_images)
    if bundle.extra_masks is not None:
        triple = np.stack([_maxpool_mask(m, f) for m in bundle.extra_masks])
    else:
        triple = np.zeros((3, hs, hs), dtype=np.float64)
    parts.append(triple)
    lum = bundle.extra_images[: 3 * L // 4].mean(axis=0)
    parts.append(np.stack([_pool_up(lum, 2), _pool_up(lum, 4)]))
    cond = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=0)
    expected = config.in_channels - config.latent_channels - 3
    if cond.shape != (expected, hs, hs):
        raise ValueError(f"conditions shaped {cond.shape}, expected {(expected, hs, hs)}")
    return cond


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k * k, h, w), dtype=x.dtype)
    i = 0
    for dy in range(k):
        for dx in range(k):
            cols[:, :, i] = xp[:, :, dy : dy + h, dx : dx + w]
            i += 1
    return cols.reshape(n, c * k * k, h * w)


def _col2im(dcols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    n, c, h, w = shape
    pad = k // 2
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k * k, h, w)
    i = 0
    for dy in range(k):
        for dx in range(k):
            dxp[:, :, dy : dy + h, dx : dx + w] += dcols[:, :, i]
            i += 1
    return dxp[:, :, pad : pad + h, pad : pad + w]


class ToyDenoiser:
    """Conv stack predicting the clean latent, exposed as a noise predictor.

    The network G maps the channel-concatenated input to a clean-latent
    estimate; the reported output is eps_hat = (z_t - sqrt(a_t) G) /
    sqrt(1 - a_t), a fixed parameter-free reparametrization that keeps the
    noise-prediction training objective while letting a tiny network work
    in clean-image space.
    """

    EPS_FLOOR = 1e-6
    MAGIC = b"AMKDNZ1\n"

    def __init__(self, config: DenoiserConfig, sched: NoiseSchedule, rng=None, params=None):
        self.config = config
        self.sched = sched
        self._shapes: list[tuple[tuple[int, int], int]] = []
        cin = config.in_channels
        k = config.kernel
        for layer in range(config.depth):
            cout = config.latent_channels if layer == config.depth - 1 else config.hidden
            self._shapes.append(((cout, cin * k * k), cout))
            cin = cout
        total = sum(w[0] * w[1] + b for (w, b) in self._shapes)
        if total > 100_000:
            raise ValueError(f"parameter count {total} exceeds the 1e5 budget")
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.size != total:
                raise ValueError(f"expected {total} parameters, got {params.size}")
            self.params = params.copy()
        else:
            rng = rng or np.random.default_rng(0)
            self.params = self._init_params(rng, total)

    # -- parameter bookkeeping

    def _init_params(self, rng, total: int) -> np.ndarray:
        params = np.empty(total, dtype=np.float64)
        off = 0
        for layer, ((cout, cin_kk), blen) in enumerate(self._shapes):
            scale = np.sqrt(1.0 / cin_kk)
            w = rng.normal(0.0, scale, size=(cout, cin_kk))
            if layer == 0:
                w.reshape(cout, self.config.in_channels, -1)[:, self.config.base_channels :, :] = 0.0
            params[off : off + w.size] = w.ravel()
            off += w.size
            params[off : off + blen] = 0.0
            off += blen
        return params

    @property
    def n_params(self) -> int:
        return self.params.size

    def _views(self, vec: np.ndarray):
        out = []
        off = 0
        for (wshape, blen) in self._shapes:
            w = vec[off : off + wshape[0] * wshape[1]].reshape(wshape)
            off += w.size
            b = vec[off : off + blen]
            off += blen
            out.append((w, b))
        return out

    def zero_block_mask(self) -> np.ndarray:
        """Boolean mask over flat params marking the zero-initialized slice."""
        mask = np.zeros(self.n_params, dtype=bool)
        (cout, cin_kk), _ = self._shapes[0]
        marker = np.zeros((cout, self.config.in_channels, self.config.kernel**2), dtype=bool)
        marker[:, self.config.base_channels :, :] = True
        mask[: cout * cin_kk] = marker.reshape(cout, cin_kk).ravel()
        return mask

    # -- forward / backward

    def _assemble(self, z: np.ndarray, t: np.ndarray, cond: np.ndarray) -> np.ndarray:
        n = z.shape[0]
        hs = self.config.latent_side
        a = self.sched.alpha[t]
        tf = np.empty((n, 3, hs, hs), dtype=np.float64)
        tf[:, 0] = (t / self.sched.T)[:, None, None]
        tf[:, 1] = np.sqrt(a)[:, None, None]
        tf[:, 2] = np.sqrt(1.0 - a)[:, None, None]
        return np.concatenate([z, tf, cond], axis=1)

    def forward_batch(self, z: np.ndarray, t: np.ndarray, cond: np.ndarray, want_cache: bool = False):
        """Batched noise prediction.

        z: (N, L, h, w) noisy latents; t: (N,) ints; cond: (N, C_cond, h, w).
        Returns eps_hat (N, L, h, w) and, if requested, the backward cache.
        """
        k = self.config.kernel
        x = self._assemble(z, t, cond)
        cache_cols = []
        cache_act = []
        h = x
        layers = self._views(self.params)
        n, _, hs, ws = x.shape
        for li, (w, b) in enumerate(layers):
            cols = _im2col(h, k)
            out = np.matmul(w, cols) + b[:, None]
            out = out.reshape(n, w.shape[0], hs, ws)
            if li < len(layers) - 1:
                out = np.tanh(out)
            if want_cache:
                cache_cols.append(cols)
                cache_act.append(out)
            h = out
        g = h  # clean-latent prediction
        a = self.sched.alpha[t][:, None, None, None]
        sa = np.sqrt(a)
        sb = np.maximum(np.sqrt(1.0 - a), self.EPS_FLOOR)
        eps_hat = (z - sa * g) / sb
        if not want_cache:
            return eps_hat
        cache = {"cols": cache_cols, "acts": cache_act, "sa": sa, "sb": sb, "in_shape": x.shape}
        return eps_hat, cache

    def backward_batch(self, cache, dl_deps: np.ndarray) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. the flat parameter vector."""
        k = self.config.kernel
        layers = self._views(self.params)
        n, _, hs, ws = cache["in_shape"]
        dg = -(cache["sa"] / cache["sb"]) * dl_deps
        grad = np.zeros_like(self.params)
        gviews = self._views(grad)
        dout = dg.reshape(n, dg.shape[1], hs * ws)
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            gw, gb = gviews[li]
            if li < len(layers) - 1:
                act = cache["acts"][li].reshape(n, -1, hs * ws)
                dout = dout * (1.0 - act * act)
            cols = cache["cols"][li]
            gw += np.matmul(dout, cols.transpose(0, 2, 1)).sum(axis=0)
            gb += dout.sum(axis=(0, 2))
            if li > 0:
                dcols = np.matmul(w.T, dout)
                prev_c = layers[li - 1][0].shape[0]
                dx = _col2im(dcols, (n, prev_c, hs, ws), k)
                dout = dx.reshape(n, prev_c, hs * ws)
        return grad

    def __call__(self, z_t: np.ndarray, t: int, bundle: ConditioningBundle) -> np.ndarray:
        cond = featurize_conditions(bundle, self.config)
        out = self.forward_batch(z_t[None], np.asarray([t]), cond[None])
        return out[0]

    # -- checkpoint format: magic, u32 header length, JSON header, f64 params (LE)

    def save(self, path: str | Path):
        header = json.dumps(
            {
                "format": 1,
                "config": asdict(self.config),
                "schedule": {"kind": self.sched.kind, "T": self.sched.T},
                "n_params": self.n_params,
            }
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ToyDenoiser":
        raw = Path(path).read_bytes()
        if raw[: len(cls.MAGIC)] != cls.MAGIC:
            raise ValueError(f"{path} is not a denoiser checkpoint")
        off = len(cls.MAGIC)
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
        off += hlen
        config = DenoiserConfig(**header["config"])
        sched = make_schedule(header["schedule"]["kind"], header["schedule"]["T"])
        params = np.frombuffer(raw[off:], dtype="<f8")
        if params.size != header["n_params"]:
            raise ValueError(f"checkpoint truncated: {params.size} of {header['n_params']} params")
        return cls(config, sched, params=params)


# ---------------------------------------------------------------------------
# losses and gradients


def loss(
    mode: str,
    denoiser,
    bundle: ConditioningBundle,
    x0: np.ndarray,
    t: int,
    eps: np.ndarray,
    sched: NoiseSchedule,
) -> float:
    """Noise-prediction objective: mean squared error between the drawn
    noise and the denoiser's prediction under the bundle's conditions."""
    validate_bundle(bundle, mode)
    z_t = forward_diffuse(x0, t, eps, sched)
    eps_hat = denoiser(z_t, t, bundle)
    r = eps_hat - eps
    return float(np.mean(r * r))


def grad(
    mode: str,
    denoiser: ToyDenoiser,
    bundle: ConditioningBundle,
    x0: np.ndarray,
    t: int,
    eps: np.ndarray,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Exact analytic gradient of :func:`loss` w.r.t. the denoiser params."""
    validate_bundle(bundle, mode)
    z_t = forward_diffuse(x0, t, eps, sched)
    cond = featurize_conditions(bundle, denoiser.config)
    eps_hat, cache = denoiser.forward_batch(
        z_t[None], np.asarray([t]), cond[None], want_cache=True
    )
    r = eps_hat - eps[None]
    dl_deps = 2.0 * r / r.size
    return denoiser.backward_batch(cache, dl_deps)


# ---------------------------------------------------------------------------
# DDIM sampling


def _ddim_grid(t_start: int, steps: int) -> np.ndarray:
    grid = np.round(np.linspace(t_start, 0, steps + 1)).astype(int)
    # collapse duplicates when steps > t_start
    keep = np.concatenate([[True], np.diff(grid) != 0])
    return grid[keep]


def ddim_sample(
    denoiser,
    bundle: ConditioningBundle,
    sched: NoiseSchedule,
    steps: int,
    eta: float,
    strength: float = 1.0,
    init: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Deterministic-capable DDIM sampler.

    ``strength`` maps to the starting timestep round(strength * T); below
    1.0 it refines ``init`` (forward-diffused to the start step) instead of
    sampling from pure noise. eta=0 draws no noise after initialization.
    """
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}], got {steps}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    if strength < 1.0 and init is None:
        raise ValueError("strength < 1 refines an init latent; none was given")
    rng = rng or np.random.default_rng(0)
    t_start = int(round(strength * sched.T))
    if t_start == 0:
        return np.array(init, dtype=np.float64, copy=True)
    if init is not None:
        z = forward_diffuse(init, t_start, rng.standard_normal(np.shape(init)), sched)
    else:
        shape = bundle.masked_visible.shape
        z = rng.standard_normal(shape)
    grid = _ddim_grid(t_start, steps)
    for j in range(len(grid) - 1):
        t, tp = int(grid[j]), int(grid[j + 1])
        eps_hat = denoiser(z, t, bundle)
        a_t = sched.alpha[t]
        a_p = sched.alpha[tp]
        x0_pred = (z - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
        sigma = eta * np.sqrt((1.0 - a_p) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_p)
        dir_coef = np.sqrt(max(1.0 - a_p - sigma**2, 0.0))
        z = np.sqrt(a_p) * x0_pred + dir_coef * eps_hat
        if sigma > 0:
            z = z + sigma * rng.standard_normal(z.shape)
    return z


def ddim_sample_batch(
    denoiser: ToyDenoiser,
    conds: np.ndarray,
    sched: NoiseSchedule,
    steps: int,
    eta: float,
    strength: float = 1.0,
    inits: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Vectorized DDIM over N stacked condition tensors (one shared grid).

    Used for best-of-k variation sweeps where per-call sampling is too slow.
    Matches :func:`ddim_sample` semantics with a shared rng stream.
    """
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}], got {steps}")
    rng = rng or np.random.default_rng(0)
    n = conds.shape[0]
    hs = denoiser.config.latent_side
    ch = denoiser.config.latent_channels
    t_start = int(round(strength * sched.T))
    if t_start == 0:
        return np.array(inits, dtype=np.float64, copy=True)
    if inits is not None:
        noise = rng.standard_normal((n, ch, hs, hs))
        a = sched.alpha[t_start]
        z = np.sqrt(a) * inits + np.sqrt(1 - a) * noise
    else:
        z = rng.standard_normal((n, ch, hs, hs))
    grid = _ddim_grid(t_start, steps)
    for j in range(len(grid) - 1):
        t, tp = int(grid[j]), int(grid[j + 1])
        eps_hat = denoiser.forward_batch(z, np.full(n, t), conds)
        a_t = sched.alpha[t]
        a_p = sched.alpha[tp]
        x0_pred = (z - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
        sigma = eta * np.sqrt((1.0 - a_p) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_p)
        dir_coef = np.sqrt(max(1.0 - a_p - sigma**2, 0.0))
        z = np.sqrt(a_p) * x0_pred + dir_coef * eps_hat
        if sigma > 0:
            z = z + sigma * rng.standard_normal(z.shape)
    return z


# ---------------------------------------------------------------------------
# toy training


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 1200
    batch: int = 32
    lr: float = 2e-3
    seed: int = 0
    timesteps: int = 1000
    schedule: str = "cosine"
    resolution: int = 32
    latent_factor: int = 4
    hidden: int = 24
    depth: int = 3
    text_width: int = 8
    # lowest sampled timestep; the near-clean steps carry an enormous
    # noise-prediction weight under the clean-latent parametrization and
    # destabilize early optimization
    t_min: int = 10
    # fraction of draws forced into the top (near-pure-noise) band. The
    # per-draw gradient there is tiny (the objective weight is the SNR), so
    # uniform t sampling never teaches the condition-only regime that
    # sampling trajectories start from; oversampling the band restores it.
    high_t_frac: float = 0.5
    high_t_band: float = 0.85
    log_csv: str | None = None

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            resolution=self.resolution,
            latent_factor=self.latent_factor,
            hidden=self.hidden,
            depth=self.depth,
            text_width=self.text_width,
        )


@dataclass(frozen=True)
class TrainExample:
    """Precomputed (clean latent, condition channels) pair."""

    x0: np.ndarray  # (L, h, w) float32
    cond: np.ndarray  # (C_cond, h, w) float32


def build_full_example(
    image: RgbaImage,
    modal: BinaryMask,
    amodal_rgba: RgbaImage,
    caption: str | None,
    codec: BlockCodec,
    config: DenoiserConfig,
) -> TrainExample:
    bundle = make_full_bundle(image, modal, caption, codec, config.text_width)
    return TrainExample(
        x0=codec.encode(amodal_rgba).astype(np.float32),
        cond=featurize_conditions(bundle, config).astype(np.float32),
    )


def build_partial_example(sample, codec: BlockCodec, config: DenoiserConfig) -> TrainExample:
    """``sample`` is an engine TrainingSample; target latent is g_n."""
    bundle = make_partial_bundle(
        sample.input,
        sample.instance,
        sample.deoccluded,
        sample.occluder,
        sample.background,
        codec,
        config.text_width,
    )
    return TrainExample(
        x0=codec.encode(sample.target).astype(np.float32),
        cond=featurize_conditions(bundle, config).astype(np.float32),
    )


def dataset_loss(
    denoiser: ToyDenoiser,
    examples: list[TrainExample],
    sched: NoiseSchedule,
    seed: int = 123,
    batch: int = 64,
) -> float:
    """Loss over a dataset with a fixed noise/timestep draw (for honest
    before/after comparisons)."""
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for lo in range(0, len(examples), batch):
        chunk = examples[lo : lo + batch]
        x0 = np.stack([e.x0 for e in chunk]).astype(np.float64)
        cond = np.stack([e.cond for e in chunk]).astype(np.float64)
        t = rng.integers(1, sched.T + 1, size=len(chunk))
        eps = rng.standard_normal(x0.shape)
        a = sched.alpha[t][:, None, None, None]
        z = np.sqrt(a) * x0 + np.sqrt(1 - a) * eps
        eps_hat = denoiser.forward_batch(z, t, cond)
        total += float(np.sum((eps_hat - eps) ** 2))
        count += eps.size
    return total / count


def train_toy(
    examples: list[TrainExample],
    mode: str,
    config: TrainConfig,
) -> tuple[ToyDenoiser, list[tuple[int, float]]]:
    """Adam-driven noise-prediction training at toy scale.

    Deterministic for a fixed config: one rng drives batch selection, t
    draws and noise; accumulation order is fixed.
    """
    if not examples:
        raise ValueError("training needs a non-empty dataset")
    if config.resolution > 64:
        raise ValueError("toy training is capped at 64x64 resolution")
    if mode not in ("partial", "full"):
        raise ValueError(f"unknown training mode {mode!r}")
    sched = make_schedule(config.schedule, config.timesteps)
    rng = np.random.default_rng(config.seed)
    denoiser = ToyDenoiser(config.denoiser_config(), sched, rng=rng)
    m = np.zeros_like(denoiser.params)
    v = np.zeros_like(denoiser.params)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    history: list[tuple[int, float]] = []
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(examples), size=config.batch)
        x0 = np.stack([examples[i].x0 for i in idx]).astype(np.float64)
        cond = np.stack([examples[i].cond for i in idx]).astype(np.float64)
        t = rng.integers(max(config.t_min, 1), sched.T + 1, size=config.batch)
        if config.high_t_frac > 0:
            hi = rng.random(config.batch) < config.high_t_frac
            t[hi] = rng.integers(int(config.high_t_band * sched.T), sched.T + 1, size=int(hi.sum()))
        eps = rng.standard_normal(x0.shape)
        a = sched.alpha[t][:, None, None, None]
        z = np.sqrt(a) * x0 + np.sqrt(1 - a) * eps
        eps_hat, cache = denoiser.forward_batch(z, t, cond, want_cache=True)
        r = eps_hat - eps
        step_loss = float(np.mean(r * r))
        if not np.isfinite(step_loss):
            raise TrainingDiverged(step)
        g = denoiser.backward_batch(cache, 2.0 * r / r.size)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        denoiser.params -= config.lr * mhat / (np.sqrt(vhat) + adam_eps)
        history.append((step, step_loss))
    if config.log_csv:
        with open(config.log_csv, "w") as fh:
            fh.write("step,loss\n")
            for s, l in history:
                fh.write(f"{s},{l}\n")
    return denoiser, history
