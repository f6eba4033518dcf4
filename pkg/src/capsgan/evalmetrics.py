"""Quantitative evaluation on top of a trained capsule classifier: score
statistics (inception-style and its within-class variant), Frechet distance
over capsule activations with per-class protocols, a from-scratch symmetric
eigensolver for the matrix square root, 2-d PCA projection of capsule
vectors, and sample-grid image emission.

The classifier's per-class capsule lengths double as class probabilities
(normalized by their sum) and its capsule activation vectors as the feature
space for distribution distances.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, paused

PROB_FLOOR = 1e-12
SYM_TOL = 1e-8


# ---------------------------------------------------------------------------
# probability-vector scores
# ---------------------------------------------------------------------------


def _validated_probs(probs):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError(f"need (N, K>=2) probability rows, got {p.shape}")
    if (p < 0).any():
        raise ValueError("negative probabilities")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("rows must sum to 1 within 1e-6")
    return np.maximum(p, PROB_FLOOR)


def inception_score(probs):
    """exp(mean_i KL(p(y|x_i) || mean_j p(y|x_j))), logs floored at 1e-12."""
    q = _validated_probs(probs)
    m = q.mean(axis=0)
    kl = (q * (np.log(q) - np.log(m))).sum(axis=1)
    return float(np.exp(kl.mean()))


def modified_inception_score(probs, max_exact=2000, seed=0):
    """exp of the mean KL over all ordered row pairs, i = j included (its
    KL is 0, which only scales the mean by (N-1)/N uniformly).  Exact up to
    max_exact rows; beyond that a fixed-seed subsample of that size."""
    q = _validated_probs(probs)
    if len(q) > max_exact:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3B]))
        q = q[rng.choice(len(q), size=max_exact, replace=False)]
    logq = np.log(q)
    self_term = (q * logq).sum(axis=1)
    cross = q @ logq.T
    mean_kl = self_term.mean() - cross.mean()
    return float(np.exp(mean_kl))


# ---------------------------------------------------------------------------
# gaussian summaries and the Frechet distance
# ---------------------------------------------------------------------------


@dataclass
class GaussianSummary:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mu.shape[0]
        if self.mu.ndim != 1 or self.cov.shape != (d, d):
            raise ValueError(f"mu {self.mu.shape} vs cov {self.cov.shape}")
        if np.abs(self.cov - self.cov.T).max() > SYM_TOL:
            raise ValueError("covariance not symmetric within 1e-8")


def fit_gaussian(features):
    """Mean and unbiased covariance of feature rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"need at least 2 feature rows, got {x.shape}")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (len(x) - 1)
    return GaussianSummary(mu, 0.5 * (cov + cov.T))


def jacobi_eigh(a, tol=1e-12, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations;
    returns (ascending eigenvalues, eigenvector columns)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"matrix must be square, got {a.shape}")
    v = np.eye(n)
    scale = max(1.0, float(np.abs(np.diag(a)).max()))
    for _ in range(max_sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * scale * 1e-4:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 if theta == 0.0 else np.sign(theta) / (
                    abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                # a <- J^T a J with the (p, q) rotation, then accumulate J
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    order = np.argsort(np.diag(a))
    return np.diag(a)[order].copy(), v[:, order].copy()


def matrix_sqrt_psd(a, sym_tol=SYM_TOL):
    """S with S @ S ~= a for symmetric positive semidefinite a; eigenvalues
    in [-1e-8, 0) count as rounding noise and clamp to 0."""
    a = np.asarray(a, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise ValueError("matrix not symmetric within tolerance")
    w, v = jacobi_eigh(0.5 * (a + a.T))
    if w.min() < -1e-8 * scale:
        raise ValueError(f"eigenvalue {w.min():.3e} too negative for a PSD matrix")
    s = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
    return 0.5 * (s + s.T)


def frechet_distance(r, f):
    """|mu_r - mu_f|^2 + tr(C_r + C_f - 2 (C_r C_f)^(1/2)), the cross term
    evaluated through the symmetrized product C_r^(1/2) C_f C_r^(1/2)
    (same trace, keeps the eigenproblem symmetric); clamped at 0."""
    if r.mu.shape != f.mu.shape:
        raise ValueError(f"dim mismatch {r.mu.shape} vs {f.mu.shape}")
    if np.array_equal(r.mu, f.mu) and np.array_equal(r.cov, f.cov):
        # tr(2C - 2(C^(1/2) C C^(1/2))^(1/2)) = 0 exactly; skip the
        # eigensolves so self-distance carries no rounding noise
        return 0.0
    sr = matrix_sqrt_psd(r.cov)
    inner = sr @ f.cov @ sr
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    diff = r.mu - f.mu
    val = float(diff @ diff + np.trace(r.cov) + np.trace(f.cov)
                - 2.0 * np.trace(cross))
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# capsule features
# ---------------------------------------------------------------------------


@dataclass
class FeatureProtocol:
    """How per-class activation vectors are pulled out of the classifier:
    single-label data takes the longest capsule per image grouped by label,
    multi-label data takes every capsule whose length clears the
    threshold, stacked class-wise."""

    mode: str = "max-length"
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("max-length", "active-threshold"):
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")


def capsule_outputs(classifier, images, batch_size=64):
    """(capsule vectors (N, K, D), lengths (N, K)) from the classifier in
    eval mode, batched.  Routing materializes (batch, primary, K, D)
    predictions, so the batch size bounds peak memory, not speed."""
    caps, lengths = [], []
    with paused():
        for start in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[start : start + batch_size]))
            c = classifier.class_capsules(x)
            caps.append(np.array(c.data, copy=True))
            n = np.sqrt((c.data.astype(np.float64) ** 2).sum(axis=-1))
            lengths.append(n)
    return np.concatenate(caps), np.concatenate(lengths)


def class_probabilities(classifier, images, batch_size=64):
    """Capsule lengths normalized by their row sum: probability rows for
    the score metrics."""
    _, lengths = capsule_outputs(classifier, images, batch_size)
    return lengths / np.maximum(lengths.sum(axis=1, keepdims=True), PROB_FLOOR)


def max_length_features(classifier, images, batch_size=64):
    """The activation vector of each image's longest capsule."""
    caps, lengths = capsule_outputs(classifier, images, batch_size)
    return caps[np.arange(len(caps)), lengths.argmax(axis=1)]


def classwise_fid(classifier, real_images, real_labels, fake_images,
                  fake_labels=None, protocol=None, batch_size=64):
    """Frechet distance per class between real and generated capsule
    features.  Classes without enough samples on either side (fewer than
    feature_dim + 1) map to None instead of failing the whole report."""
    multi = np.asarray(real_labels).ndim == 2
    if protocol is None:
        protocol = FeatureProtocol("active-threshold" if multi else "max-length")
    classes = (np.asarray(real_labels).shape[1] if multi
               else int(np.asarray(real_labels).max()) + 1)

    if protocol.mode == "max-length":
        if fake_labels is None:
            raise ValueError("max-length protocol needs intended fake labels")
        feats_r = max_length_features(classifier, real_images, batch_size)
        feats_f = max_length_features(classifier, fake_images, batch_size)
        groups_r = [feats_r[np.asarray(real_labels) == c] for c in range(classes)]
        groups_f = [feats_f[np.asarray(fake_labels) == c] for c in range(classes)]
    else:
        caps_r, len_r = capsule_outputs(classifier, real_images, batch_size)
        caps_f, len_f = capsule_outputs(classifier, fake_images, batch_size)
        groups_r = [caps_r[len_r[:, c] > protocol.threshold, c] for c in range(classes)]
        groups_f = [caps_f[len_f[:, c] > protocol.threshold, c] for c in range(classes)]

    feature_dim = groups_r[0].shape[-1] if groups_r else 0
    need = feature_dim + 1
    out = {}
    for c in range(classes):
        if len(groups_r[c]) < need or len(groups_f[c]) < need:
            out[c] = None
            continue
        out[c] = frechet_distance(fit_gaussian(groups_r[c]),
                                  fit_gaussian(groups_f[c]))
    return out


def write_fid_csv(path, fids):
    """`class,fid` rows; classes with too few samples get an empty value."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,fid\n")
        for c in sorted(fids):
            v = fids[c]
            fh.write(f"{c},\n" if v is None else f"{c},{v:.8f}\n")
    return path


# ---------------------------------------------------------------------------
# PCA projection
# ---------------------------------------------------------------------------


def pca_fit(features):
    """(mean, two principal axes as rows) of the fitting set, components
    sign-fixed so each axis's largest-magnitude loading is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"need at least 3 rows and 2 columns, got {x.shape}")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (len(x) - 1)
    w, v = jacobi_eigh(0.5 * (cov + cov.T))
    if w[-1] <= 1e-12:
        raise ValueError("zero variance: nothing to project")
    comps = v[:, [-1, -2]].T
    for i in range(2):
        if comps[i, np.abs(comps[i]).argmax()] < 0:
            comps[i] = -comps[i]
    return mu, comps


def pca_project(features, fit_on):
    """Coordinates of `features` in the top-2 principal axes of `fit_on`."""
    mu, comps = pca_fit(fit_on)
    return (np.asarray(features, dtype=np.float64) - mu) @ comps.T


def write_projection_csv(path, named_sets):
    """`set,x,y` rows, one block per named coordinate set."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("set,x,y\n")
        for name, xy in named_sets.items():
            for x, y in np.asarray(xy):
                fh.write(f"{name},{x:.8f},{y:.8f}\n")
    return path


# ---------------------------------------------------------------------------
# sample grids
# ---------------------------------------------------------------------------


def _png_chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path, pixels_u8):
    """Minimal PNG encoder: 8-bit grayscale (H, W) or RGB (H, W, 3)."""
    arr = np.ascontiguousarray(pixels_u8, dtype=np.uint8)
    h, w = arr.shape[:2]
    color = 2 if arr.ndim == 3 else 0
    raw = b"".join(b"\x00" + arr[y].tobytes() for y in range(h))
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)))
        fh.write(_png_chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(_png_chunk(b"IEND", b""))
    return path


def write_pnm(path, pixels_u8):
    """PGM (grayscale) / PPM (RGB) fallback writer."""
    arr = np.ascontiguousarray(pixels_u8, dtype=np.uint8)
    h, w = arr.shape[:2]
    magic = b"P6" if arr.ndim == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
    return path


def tile_images(images, rows, cols):
    """De-normalize [-1, 1] NCHW images to uint8 and tile the first
    rows*cols of them row-major."""
    x = np.asarray(images)
    if x.ndim != 4:
        raise ValueError(f"images must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if rows * cols > n:
        raise ValueError(f"grid {rows}x{cols} needs {rows * cols} images, have {n}")
    u8 = np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(rows * cols):
        r, col = divmod(i, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = u8[i].transpose(1, 2, 0)
    return grid[:, :, 0] if c == 1 else grid


def emit_grid(images, path, rows, cols):
    """Write a sample grid as PNG, falling back to PGM/PPM if the PNG write
    fails; `path` is extensionless and the written file path is returned."""
    grid = tile_images(images, rows, cols)
    try:
        return write_png(path + ".png", grid)
    except OSError:
        return write_pnm(path + (".ppm" if grid.ndim == 3 else ".pgm"), grid)
