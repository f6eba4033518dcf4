"""Squash and dynamic routing on instances small enough to read.

Run: python3 demos/routing_walkthrough.py
"""

import numpy as np

from capsgan.capsules import dynamic_routing, margin_loss, squash
from capsgan.tensor import Tensor


def main():
    rng = np.random.default_rng(0)

    # squash keeps direction, bounds length below 1
    for scale in (0.1, 1.0, 10.0):
        v = np.array([[3.0, 4.0]]) * scale
        out = squash(Tensor(v)).data
        print(f"|s|={5 * scale:6.1f} -> |squash(s)|={np.linalg.norm(out):.4f}")

    # two input capsules vote for two output capsules; agreement
    # concentrates the couplings over three rounds
    u = Tensor(rng.normal(size=(1, 2, 4)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 2, 4, 4)).astype(np.float32))
    out, couplings = dynamic_routing(u, w, iterations=3, return_couplings=True)
    for rnd, c in enumerate(couplings):
        print(f"round {rnd} couplings (input 0): {np.asarray(c)[0, 0]}")
    lengths = np.linalg.norm(out.data, axis=-1)
    print("output capsule lengths:", lengths[0])

    # margin loss rewards the labeled capsule being long and others short
    lengths = Tensor(np.array([[0.95, 0.05], [0.4, 0.6]], dtype=np.float32))
    labels = np.array([[1.0, 0.0], [1.0, 0.0]], dtype=np.float32)
    print("margin loss (one clean, one confused):",
          float(margin_loss(lengths, labels).data))


if __name__ == "__main__":
    main()
