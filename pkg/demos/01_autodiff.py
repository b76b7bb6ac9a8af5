"""
Reverse-mode gradients on a tiny graph
======================================

Build a small expression, run backward, and compare with finite differences.
"""

import numpy as np

from accnn import tensor as T
from accnn.tensor import Tensor, backward, grad_check

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
W = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)

# y = sum(tanh(W x) * sigmoid(W x))
z = T.affine(x, W)
loss = T.sum(T.tanh(z) * T.sigmoid(z))
backward(loss)
print("loss      ", float(loss.data))
print("dL/dx     ", np.round(x.grad, 6))

# central differences on every input, max relative error
x.zero_grad()
W.zero_grad()
err = grad_check(lambda x, W: T.sum(T.tanh(T.affine(x, W)) * T.sigmoid(T.affine(x, W))), x, W)
print("max rel err vs finite differences: %.2e" % err)
