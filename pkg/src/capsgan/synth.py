"""Deterministic procedural glyph corpus in MNIST's IDX container format.

Ten stroke-drawn glyph classes at 28x28 with per-sample jitter (shift,
rotation, scale, stroke width, intensity, pixel noise).  Every glyph also
carries a short orientation tick near the top-left corner so that no class
is symmetric under 90-degree rotations; (class, angle) pairs stay
distinguishable after rotation augmentation.

This is a stand-in corpus for environments without the real digit files:
same container format, same resolution, same label alphabet.  Generation
is fully determined by (seed, index).
"""

from __future__ import annotations

import os

import numpy as np

from .data import write_idx

SIZE = 28

# strokes in unit coordinates, (x0, y0, x1, y1), y pointing down
_RING = [
    (0.78, 0.35, 0.65, 0.18), (0.65, 0.18, 0.40, 0.15), (0.40, 0.15, 0.22, 0.32),
    (0.22, 0.32, 0.20, 0.60), (0.20, 0.60, 0.38, 0.82), (0.38, 0.82, 0.62, 0.83),
    (0.62, 0.83, 0.78, 0.65),
]

_GLYPHS = [
    _RING,                                                        # open ring
    [(0.52, 0.14, 0.52, 0.86), (0.52, 0.14, 0.38, 0.28)],         # bar with serif
    [(0.22, 0.22, 0.78, 0.20), (0.78, 0.20, 0.24, 0.80),
     (0.24, 0.80, 0.80, 0.82)],                                   # zig
    [(0.30, 0.16, 0.30, 0.84), (0.30, 0.16, 0.76, 0.16),
     (0.30, 0.50, 0.68, 0.50), (0.30, 0.84, 0.76, 0.84)],         # comb
    [(0.28, 0.14, 0.28, 0.86), (0.72, 0.14, 0.72, 0.86),
     (0.28, 0.52, 0.72, 0.48)],                                   # rails
    [(0.76, 0.18, 0.26, 0.20), (0.26, 0.20, 0.26, 0.50),
     (0.26, 0.50, 0.74, 0.52), (0.74, 0.52, 0.74, 0.82),
     (0.74, 0.82, 0.24, 0.84)],                                   # switchback
    [(0.34, 0.14, 0.34, 0.84), (0.34, 0.84, 0.80, 0.84)],         # corner
    [(0.20, 0.18, 0.80, 0.18), (0.62, 0.18, 0.38, 0.84)],         # flag
    [(0.24, 0.18, 0.76, 0.84), (0.76, 0.18, 0.24, 0.84)],         # cross
    [(0.26, 0.16, 0.26, 0.72), (0.26, 0.72, 0.50, 0.86),
     (0.50, 0.86, 0.74, 0.72), (0.74, 0.72, 0.74, 0.16)],         # cup
]

_TICK = (0.10, 0.10, 0.26, 0.08)


def _render(class_id, rng):
    """One 28x28 uint8 glyph with sample-specific jitter."""
    angle = rng.uniform(-0.18, 0.18)
    scale = rng.uniform(0.85, 1.12)
    dx, dy = rng.uniform(-1.8, 1.8, size=2)
    radius = rng.uniform(0.85, 1.45)
    peak = rng.uniform(150.0, 255.0)

    cos_a, sin_a = np.cos(angle), np.sin(angle)
    points = []
    for x0, y0, x1, y1 in list(_GLYPHS[class_id]) + [_TICK]:
        steps = max(2, int(np.hypot(x1 - x0, y1 - y0) * 40))
        t = np.linspace(0.0, 1.0, steps)
        px = x0 + (x1 - x0) * t
        py = y0 + (y1 - y0) * t
        points.append(np.stack([px, py], axis=1))
    pts = (np.concatenate(points) - 0.5) * (SIZE - 6) * scale
    rot = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    pts = pts @ rot.T + (SIZE - 1) / 2.0 + np.array([dx, dy])

    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    d2 = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    canvas = peak * np.exp(-d2 / (2.0 * radius * radius))
    canvas += rng.normal(0.0, 6.0, size=canvas.shape)
    return np.clip(canvas, 0, 255).reshape(SIZE, SIZE).astype(np.uint8)


def make_corpus(n, seed, classes=10, offset=0):
    """n images with labels cycling through the classes; sample i is fully
    determined by (seed, offset + i)."""
    if classes > len(_GLYPHS):
        raise ValueError(f"at most {len(_GLYPHS)} glyph classes available")
    images = np.zeros((n, SIZE, SIZE), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        label = (offset + i) % classes
        rng = np.random.default_rng(np.random.SeedSequence([seed, offset + i]))
        images[i] = _render(label, rng)
        labels[i] = label
    return images, labels


def write_corpus(data_dir, n_train=12000, n_test=2000, seed=1234,
                 dataset="mnist"):
    """Materialize a train/test corpus pair under <data_dir>/<dataset>/ in
    the standard IDX file names, so the normal loaders pick it up."""
    root = os.path.join(data_dir, dataset)
    os.makedirs(root, exist_ok=True)
    train_images, train_labels = make_corpus(n_train, seed)
    test_images, test_labels = make_corpus(n_test, seed, offset=n_train)
    write_idx(
        os.path.join(root, "train-images-idx3-ubyte"),
        os.path.join(root, "train-labels-idx1-ubyte"),
        train_images, train_labels,
    )
    write_idx(
        os.path.join(root, "t10k-images-idx3-ubyte"),
        os.path.join(root, "t10k-labels-idx1-ubyte"),
        test_images, test_labels,
    )
    return root


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(
        description="Generate the procedural glyph corpus as IDX files."
    )
    parser.add_argument("data_dir", help="directory to create <dataset>/ under")
    parser.add_argument("--n-train", type=int, default=12000)
    parser.add_argument("--n-test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=1234)
    parser.add_argument("--dataset", default="mnist", choices=["mnist", "fashion"])
    args = parser.parse_args(argv)
    root = write_corpus(args.data_dir, args.n_train, args.n_test, args.seed,
                        args.dataset)
    print(f"wrote corpus under {root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
