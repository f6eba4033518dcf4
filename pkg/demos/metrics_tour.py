"""The evaluation toolbox on controlled inputs: inception-style scores on
hand-built posteriors, Frechet distance on known Gaussians, and a capsule
PCA projection of real glyph features.

Run: python3 demos/metrics_tour.py
"""

import tempfile

import numpy as np

from capsgan import evalmetrics as ev, synth, training
from capsgan.config import TrainConfig
from capsgan.data import load_named_dataset


def main():
    # scores behave analytically on degenerate posteriors
    uniform = np.full((100, 10), 0.1)
    onehots = np.tile(np.eye(10), (10, 1))
    print("IS(uniform rows)  =", ev.inception_score(uniform), "(1 = no separation)")
    print("IS(all 10 onehots)=", ev.inception_score(onehots), "(class count = max)")
    print("mIS(identical)    =", ev.modified_inception_score(np.tile(uniform[:1], (50, 1))))

    # Frechet distance: identical summaries give 0, known shifts add up
    g1 = ev.GaussianSummary(np.zeros(4), np.eye(4))
    g2 = ev.GaussianSummary(np.full(4, 0.5), np.eye(4) * 4.0)
    print("FID(g, g)  =", ev.frechet_distance(g1, g1))
    # diagonal case: sum(mu_diff^2) + sum((sqrt(c1) - sqrt(c2))^2)
    print("FID(g1, g2) =", ev.frechet_distance(g1, g2),
          "expected", 4 * 0.25 + 4 * (2 - 1) ** 2)

    # a quickly trained classifier provides capsule features for real data
    data_dir = tempfile.mkdtemp(prefix="glyphs_")
    synth.write_corpus(data_dir, n_train=2000, n_test=400, seed=3)
    cfg = TrainConfig(dataset="mnist", data_dir=data_dir,
                      out_dir=tempfile.mkdtemp(), front_channels=16,
                      primary_channels=16, epochs=3, seed=3,
                      lr=1e-3, beta1=0.9, beta2=0.999).validate()
    clf, summary = training.train_classifier(cfg)
    print("classifier accuracy:", summary["final_accuracy"])

    test = load_named_dataset("mnist", data_dir, "test")
    feats = ev.max_length_features(clf, test.images[:300])
    xy = ev.pca_project(feats, feats)
    for c in range(3):
        pts = xy[test.labels[:300] == c]
        print(f"class {c}: {len(pts)} pts, centroid ({pts[:, 0].mean():+.2f}, "
              f"{pts[:, 1].mean():+.2f})")


if __name__ == "__main__":
    main()
