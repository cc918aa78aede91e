"""
Reverse-mode autodiff and finite-difference checks
==================================================

Build a small expression, backpropagate through it and compare against
central differences. The last section runs the whole gradcheck battery.
"""

import numpy as np

from tagnnpp import autograd as ag
from tagnnpp.autograd import Tensor
from tagnnpp.gradcheck import numeric_grad, relative_error, run_all

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(5, 4)))

# a softmax-weighted tanh layer, summed to a scalar
h = ag.tanh(x @ w)
loss = ag.tensor_sum(ag.softmax(h, axis=-1) * h)
ag.backward(loss)
print("loss", float(loss.data))
print("dL/dw\n", w.grad)


probe = w.data.copy()


def f():  # numeric_grad nudges ``probe`` in place
    with ag.no_grad():
        h = ag.tanh(x @ Tensor(probe))
        return float(ag.tensor_sum(ag.softmax(h, axis=-1) * h).data)


approx = numeric_grad(f, probe)
print("relative error vs finite differences:", relative_error(w.grad, approx))

results = run_all()
print(f"{sum(r.ok for r in results)}/{len(results)} gradient checks pass")
