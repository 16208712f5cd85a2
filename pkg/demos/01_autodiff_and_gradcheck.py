"""Walk through the reverse-mode tensor core and its finite-difference audit.

Builds a tiny composite function, backpropagates it, and compares every
analytic gradient against central differences.
"""

import numpy as np

from latentweave.autograd import Tensor, finite_diff_check

rng = np.random.default_rng(0)

w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="w")
b = Tensor(rng.normal(size=3), requires_grad=True, name="b")
x = Tensor(rng.normal(size=(5, 4)))


def loss_fn():
    h = (x @ w).add_bias(b).tanh()
    return (h * h).mean()


loss = loss_fn()
loss.backward()
print("loss:", loss.item())
print("dL/dw norm:", np.linalg.norm(w.grad))

max_err, worst = finite_diff_check(loss_fn, {"w": w, "b": b},
                                   samples_per_param=6)
print(f"max relative error {max_err:.2e} (worst parameter: {worst})")
