"""Train a small capsule-critic GAN for one epoch on generated glyphs and
leave a sample grid behind.  Everything is seeded; runs in ~2 minutes.

Run: python3 demos/wgan_smoke.py [out_dir]
"""

import sys
import tempfile

from capsgan import synth, training
from capsgan.config import TrainConfig
from capsgan.evalmetrics import emit_grid


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="wgan_smoke_")
    data_dir = tempfile.mkdtemp(prefix="glyphs_")
    synth.write_corpus(data_dir, n_train=2000, n_test=200, seed=7)

    cfg = TrainConfig(
        dataset="mnist", data_dir=data_dir, out_dir=out,
        front_channels=16, primary_channels=16, generator_base=16,
        latent_dim=32, batch_size=50, n_critic=2, epochs=1, seed=7,
    ).validate()

    gen, critic, summary = training.train_gan(
        cfg, preview=False, log=lambda m: print(m))
    print(f"{summary['steps']} generator steps; metrics at {summary['metrics_csv']}")

    images, _ = training.generate(cfg, gen, 36, tag=1)
    path = emit_grid(images, f"{out}/samples", rows=6, cols=6)
    print("sample grid:", path)


if __name__ == "__main__":
    main()
