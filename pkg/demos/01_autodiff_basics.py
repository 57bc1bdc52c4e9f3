#!/usr/bin/env python3
"""Tour of the tensor core: forward ops, reverse-mode gradients, and a
finite-difference cross-check.

Run: python3 demos/01_autodiff_basics.py
"""

import numpy as np

from neighborcast import tensor as T

rng = T.make_rng(0)

# --- forward ops -----------------------------------------------------------
a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
prod = T.matmul(a, b)
print("matmul shape:", prod.shape)

probs = T.softmax(T.Tensor([[0.0, -1.0, 3.0]]), axis=-1)
print("softmax row:", np.round(probs.data, 4), "sums to", probs.data.sum())

x = T.Tensor(rng.normal(2.0, 5.0, size=(2, 8)))
normed = T.layer_norm(x, T.Tensor(np.ones(8)), T.Tensor(np.zeros(8)))
print("layer_norm row means:", np.round(normed.data.mean(axis=-1), 12))

# --- reverse mode ----------------------------------------------------------
# loss = sum(relu(a @ b)); gradients flow to both operands
loss = T.reduce_sum(T.relu(T.matmul(a, b)))
T.backward(loss)
print("\nloss:", loss.item())
print("grad wrt a:\n", np.round(a.grad, 3))

# --- cross-check one coordinate against a central difference ---------------
h = 1e-5
i, j = 1, 2
orig = a.data[i, j]


def f():
    return float(np.sum(np.maximum(a.data @ b.data, 0.0)))


a.data[i, j] = orig + h
up = f()
a.data[i, j] = orig - h
down = f()
a.data[i, j] = orig
numeric = (up - down) / (2 * h)
print(f"\nanalytic grad a[{i},{j}] = {a.grad[i, j]:.8f}")
print(f"numeric  grad a[{i},{j}] = {numeric:.8f}")
assert abs(a.grad[i, j] - numeric) < 1e-6
print("finite differences agree.")
