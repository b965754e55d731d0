"""A walk through the tensor core: tapes, gradients, and verification.

Everything the classifier does — convolutions, recurrences, attention —
bottoms out in the handful of operations shown here. The last section
demonstrates the finite-difference check that the whole test suite leans
on: if an operation's backward rule were wrong, this is what would
catch it.
"""

import numpy as np

from crossmodal import tensor as T
from crossmodal.gradcheck import finite_difference_grad, max_relative_error
from crossmodal.tensor import GradTape, Tensor

# --- recording and replaying -------------------------------------------------
# A tape records every differentiable op that runs inside its context.
# backward() replays the records in reverse and accumulates gradients.

w = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
x = Tensor(np.array([[2.0], [1.0]]))

with GradTape() as tape:
    y = T.matmul(w, x)               # [2x1]
    loss = T.sum(T.mul(y, y))        # scalar: ||Wx||^2

tape.backward(loss)
print("loss:", loss.item())
print("dloss/dW:\n", w.grad)

# The analytic answer is 2 (Wx) x^T — check it by hand:
wx = w.data @ x.data
print("closed form:\n", 2 * wx @ x.data.T)

# --- gradients accumulate until zeroed ---------------------------------------

tape.backward(loss)                  # second replay doubles the gradient
print("\nafter a second backward (additive):\n", w.grad)
w.zero_grad()

# --- softmax stability --------------------------------------------------------
# Inputs in the thousands would overflow a naive exp; the max-subtraction
# form shrugs them off.

scores = Tensor(np.array([1000.0, 0.0, -1000.0]))
print("\nsoftmax([1000, 0, -1000]) =", T.softmax(scores).data)

# Masked entries are excluded from the distribution and get exactly zero —
# this is how attention ignores padded key frames.
masked = T.softmax(Tensor(np.array([1.0, 2.0, 3.0])), mask=np.array([True, False, True]))
print("masked softmax:", masked.data)

# --- the finite-difference oracle ---------------------------------------------
# Perturb one element at a time, measure the loss change, compare with the
# tape's gradient. This is the independent referee for every backward rule.

rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)


def loss_fn():
    return T.sum(T.tanh(T.matmul(a, b)))


with GradTape() as tape:
    out = loss_fn()
tape.backward(out)

numeric = finite_difference_grad(lambda: float(loss_fn().data), a, eps=1e-6)
err = max_relative_error(a.grad, numeric)
print(f"\nmatmul+tanh gradient vs finite differences: max rel err {err:.2e}")
assert err < 1e-6
