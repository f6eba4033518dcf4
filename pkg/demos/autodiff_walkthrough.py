"""A tour of the tape: forward recording, reverse gradients, and a
second-order gradient of the kind the gradient penalty needs.

Run: python3 demos/autodiff_walkthrough.py
"""

import numpy as np

import capsgan.tensor as T
from capsgan.tensor import Tape, Tensor, finite_difference_check, grad, precision


def main():
    # --- first order ------------------------------------------------------
    # y = sum((x * w) ** 2): dy/dx = 2 x w^2, dy/dw = 2 w x^2
    x0 = np.array([1.0, -2.0, 3.0])
    w0 = np.array([0.5, 0.25, -1.0])
    with Tape() as tape:
        x, w = Tensor(x0), Tensor(w0)
        p = T.mul(x, w)
        y = T.reduce_sum(T.mul(p, p))
        gx, gw = grad(y, [x, w], tape=tape)
    print("y           ", float(y.data))
    print("dy/dx       ", np.asarray(gx.data), "expected", 2 * x0 * w0 ** 2)
    print("dy/dw       ", np.asarray(gw.data), "expected", 2 * w0 * x0 ** 2)

    # --- second order -----------------------------------------------------
    # f = sum(x^3). g = df/dx = 3x^2 recorded back onto the tape with
    # create_graph, so h = sum(g) differentiates again: dh/dx = 6x.
    with Tape() as tape:
        x = Tensor(x0)
        f = T.reduce_sum(T.mul(T.mul(x, x), x))
        (g,) = grad(f, [x], create_graph=True, tape=tape)
        h = T.reduce_sum(g)
        (hh,) = grad(h, [x], tape=tape)
    print("d/dx sum(3x^2) =", np.asarray(hh.data), "expected", 6 * x0)

    # --- trust but verify -------------------------------------------------
    with precision("float64"):
        err = finite_difference_check(
            lambda v: T.reduce_sum(T.mul(T.tanh(v), T.tanh(v))), Tensor(x0)
        )
    print(f"finite-difference max rel error: {err:.2e}")


if __name__ == "__main__":
    main()
