"""Evaluation protocol: best-of-k mIoU, occlusion-percentage bins, and a
Gaussian Frechet distance over a deterministic hand-crafted extractor.

The Frechet metric is labeled FID-proxy everywhere: the extractor is a
fixed color/gradient/shape featurizer, not an Inception network, so the
numbers are not comparable with Inception-based FID. A neural embedder can
replace it behind the same one-image-in, one-vector-out contract.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import BinaryMask, RgbaImage, iou

OCCLUSION_BINS = ((0.0, 0.1), (0.1, 0.5), (0.5, 0.9), (0.9, 1.0))
BIN_LABELS = ("0-10%", "10-50%", "50-90%", "90-100%")
FEATURE_VERSION = 1
FEATURE_WIDTH = 38  # 24 color + 8 orientation + 6 shape


@dataclass(frozen=True)
class EvalRecord:
    id: str
    predicted_variations: tuple[BinaryMask, ...]
    gt_amodal: BinaryMask
    occlusion_pct: float
    per_variation_iou: tuple[float, ...] = field(default=())

    def __post_init__(self):
        ious = tuple(iou(p, self.gt_amodal) for p in self.predicted_variations)
        object.__setattr__(self, "per_variation_iou", ious)

    def best_of(self, k: int) -> float:
        if k < 1 or k > len(self.per_variation_iou):
            raise ValueError(
                f"record {self.id} has {len(self.per_variation_iou)} variations, asked for k={k}"
            )
        return max(self.per_variation_iou[:k])


def miou(records: list[EvalRecord], k: int) -> float:
    """Mean over records of the best IoU among the first k variations."""
    if not records:
        raise ValueError("mIoU over zero records is undefined")
    return float(np.mean([r.best_of(k) for r in records]))


def bin_by_occlusion(records: list[EvalRecord], k: int) -> dict[str, dict]:
    """Per-bin mIoU over the standard occlusion ranges.

    Bins are half-open on the right except the last: [0, .1), [.1, .5),
    [.5, .9), [.9, 1.0]. Empty bins are absent from the result, not zero.
    """
    groups: dict[str, list[EvalRecord]] = {label: [] for label in BIN_LABELS}
    for rec in records:
        pct = rec.occlusion_pct
        for (lo, hi), label in zip(OCCLUSION_BINS, BIN_LABELS):
            last = label == BIN_LABELS[-1]
            if lo <= pct < hi or (last and lo <= pct <= hi):
                groups[label].append(rec)
                break
    out = {}
    for label in BIN_LABELS:
        if groups[label]:
            out[label] = {"miou": miou(groups[label], k), "count": len(groups[label])}
    return out


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass(frozen=True)
class FrechetInputs:
    features_a: np.ndarray  # (n_a, d)
    features_b: np.ndarray  # (n_b, d)

    def __post_init__(self):
        a = np.asarray(self.features_a, dtype=np.float64)
        b = np.asarray(self.features_b, dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("feature sets must be 2-D (n, d)")
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
        if a.shape[0] < 2 or b.shape[0] < 2:
            raise ValueError("need at least two feature vectors per set")
        object.__setattr__(self, "features_a", a)
        object.__setattr__(self, "features_b", b)


def _moments(feats: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    n, d = feats.shape
    if n < d + 1:
        # rank-deficient sample covariance; shrink toward a scaled identity
        cov = cov + ridge * np.eye(d)
    return mu, cov


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if np.any(vals < -1e-8):
        raise ValueError(f"matrix has negative eigenvalue {vals.min():.3e}; not a covariance product")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet(inputs: FrechetInputs, ridge: float = 1e-6) -> float:
    """Gaussian Frechet distance |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The cross term uses sqrt(S1) S2 sqrt(S1), whose eigendecomposition is
    the numerically stable symmetrized route to Tr((S1 S2)^{1/2}).
    """
    mu1, s1 = _moments(inputs.features_a, ridge)
    mu2, s2 = _moments(inputs.features_b, ridge)
    diff = mu1 - mu2
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    d2 = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


# ---------------------------------------------------------------------------
# deterministic feature extractor (FID-proxy embedding)


def extract_features(image: RgbaImage) -> np.ndarray:
    """Fixed 38-dim embedding: masked color histograms (8 bins x RGB),
    gradient-orientation histogram (8 bins over the full circle), and shape
    moments (area ratio, eccentricity, four Hu-style invariants).

    Versioned via FEATURE_VERSION; identical images embed identically.
    """
    alpha = image.data[..., 3] >= 128
    if not alpha.any():
        raise ValueError("feature extraction needs a nonempty alpha support")
    area = int(alpha.sum())

    feats = np.zeros(FEATURE_WIDTH, dtype=np.float64)
    pos = 0
    for c in range(3):
        vals = image.data[..., c][alpha]
        hist, _ = np.histogram(vals, bins=8, range=(0, 256))
        feats[pos : pos + 8] = hist / area
        pos += 8

    gray = image.data[..., :3].astype(np.float64).mean(axis=2)
    gy, gx = np.gradient(gray)
    inside = alpha & (np.hypot(gx, gy) > 1e-9)
    if inside.any():
        ang = np.arctan2(gy[inside], gx[inside])
        mag = np.hypot(gx[inside], gy[inside])
        idx = np.floor((ang + np.pi) / (np.pi / 4.0)).astype(int) % 8
        ohist = np.bincount(idx, weights=mag, minlength=8)
        total = ohist.sum()
        if total > 0:
            feats[pos : pos + 8] = ohist / total
    pos += 8

    h, w = alpha.shape
    ys, xs = np.nonzero(alpha)
    cx, cy = xs.mean(), ys.mean()
    dx = xs - cx
    dy = ys - cy
    mu20 = np.mean(dx * dx)
    mu02 = np.mean(dy * dy)
    mu11 = np.mean(dx * dy)
    # eigenvalues of the second-moment matrix give the axis lengths
    common = np.sqrt(max((mu20 - mu02) ** 2 / 4.0 + mu11**2, 0.0))
    lam1 = (mu20 + mu02) / 2.0 + common
    lam2 = (mu20 + mu02) / 2.0 - common
    ecc = np.sqrt(1.0 - lam2 / lam1) if lam1 > 1e-12 else 0.0

    # normalized central moments: eta_pq = mu_pq / area^((p+q)/2 + 1)
    eta20 = mu20 / area
    eta02 = mu02 / area
    eta11 = mu11 / area
    eta30 = np.mean(dx**3) / area**1.5
    eta03 = np.mean(dy**3) / area**1.5
    eta21 = np.mean(dx * dx * dy) / area**1.5
    eta12 = np.mean(dx * dy * dy) / area**1.5
    hu1 = eta20 + eta02
    hu2 = (eta20 - eta02) ** 2 + 4.0 * eta11**2
    hu3 = (eta30 - 3 * eta12) ** 2 + (3 * eta21 - eta03) ** 2
    hu4 = (eta30 + eta12) ** 2 + (eta21 + eta03) ** 2
    feats[pos : pos + 6] = [area / (h * w), ecc, hu1, hu2, hu3, hu4]
    return feats


def feature_matrix(images) -> np.ndarray:
    return np.stack([extract_features(img) for img in images])


# ---------------------------------------------------------------------------
# reports


def build_report(
    records: list[EvalRecord],
    ks: tuple[int, ...] = (1, 2, 4, 8),
    fid_proxy: float | None = None,
) -> dict:
    k_max = max(ks)
    curve = {k: miou(records, k) for k in ks}
    report = {
        "records": len(records),
        "miou": curve[k_max],
        "best_of_k": {str(k): v for k, v in curve.items()},
        "bins": bin_by_occlusion(records, k_max),
    }
    if fid_proxy is not None:
        report["fid_proxy"] = fid_proxy
    return report


def write_report(report: dict, outdir: str | Path) -> tuple[Path, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    json_path = outdir / "report.json"
    csv_path = outdir / "report.csv"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["records", report["records"]])
        for k, v in report["best_of_k"].items():
            writer.writerow([f"miou_best_of_{k}", v])
        for label, entry in report["bins"].items():
            writer.writerow([f"miou_bin_{label}", entry["miou"]])
            writer.writerow([f"count_bin_{label}", entry["count"]])
        if "fid_proxy" in report:
            writer.writerow(["fid_proxy", report["fid_proxy"]])
    return json_path, csv_path
