"""Reverse-mode gradients on a tiny conv net, checked against central differences."""
import numpy as np

from marl_diag.numerics import Tensor, conv2d, grad_check, max_pool2d, sigmoid

rng = np.random.default_rng(0)

x = Tensor(rng.normal(size=(2, 1, 8, 8)))
w = Tensor(rng.normal(size=(4, 1, 3, 3)) * 0.3, requires_grad=True)

# conv -> relu -> pool -> mean
h = max_pool2d(conv2d(x, w, pad=1).relu(), 2)
loss = h.mean()
loss.backward()
print("loss", float(loss.data))
print("dL/dw shape", w.grad.shape, "norm", np.linalg.norm(w.grad))

# the same function, as a function of w, through the checker
rep = grad_check(lambda k: max_pool2d(conv2d(x, k, pad=1).relu(), 2).mean(), w.data)
print("conv net:", "pass" if rep.passed else "FAIL", f"max rel err {rep.max_rel_error:.2e}")

rep = grad_check(lambda z: sigmoid(z).sum(), rng.normal(size=(5, 3)))
print("sum(sigmoid):", "pass" if rep.passed else "FAIL", f"max rel err {rep.max_rel_error:.2e}")

# a function with an infinite slope at 0 is reported, with the offending coordinate
z = np.abs(rng.normal(size=(3, 2))) + 0.5
z[1, 0] = 0.0
with np.errstate(divide="ignore", invalid="ignore"):
    rep = grad_check(lambda t: (t ** 0.5).sum(), z)
print("sqrt at 0:", "pass" if rep.passed else "FAIL", "nan at", rep.nan_index)
