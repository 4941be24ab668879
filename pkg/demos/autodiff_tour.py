"""
A tour of the tape
==================

Build a tiny graph, run it backwards, and check the result against
finite differences.
"""

import numpy as np

from depthvid import tensor as T
from depthvid.tensor import Tape, Tensor, grad_check, randn

# %%
# Leaves that should receive gradients are marked explicitly.
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
w = Tensor(np.array([0.5, -1.0, 2.0]))

with Tape() as tape:
    loss = T.sum_of_squares(T.mul(x, w))
T.backward(loss, tape)
print("d loss / dx =", x.grad)  # 2 * w**2 * x
print("w has no grad:", w.grad is None)

# %%
# A convolution followed by a softmax, checked at 32-bit.
kernel = randn((2, 1, 3, 3), seed=1)
readout = randn((2, 16), seed=2)


def net(img):
    h = T.conv2d(T.reshape(img, (1, 4, 4)), kernel)
    return T.tsum(T.mul(T.softmax(T.reshape(h, (2, 16))), readout))


err = grad_check(net, randn((16,), seed=3))
print(f"max relative error vs central differences: {err:.2e}")

# %%
# Same seed, same bytes.
assert randn((4,), 7).data.tobytes() == randn((4,), 7).data.tobytes()
