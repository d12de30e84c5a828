"""
Reverse-mode autodiff on a tape
===============================

Build a small expression, differentiate it, and compare the result with
central differences.  Run with ``python3 demos/autodiff_basics.py``.
"""

import numpy as np

from distilltron import tensor as tn

# a tape records every operation applied to the tensors it watches
tape = tn.Tape()
rng = np.random.default_rng(0)
w = tape.watch(rng.normal(size=(3, 2)), name="w")
x = tn.Tensor(rng.normal(size=(4, 3)))

# loss = mean(tanh(x @ w) ** 2)
loss = tn.mean(tn.square(tn.tanh(tn.matmul(x, w))))
tape.backward(loss)
print("loss", loss.item())
print("dloss/dw\n", w.grad)

# the same gradient by hand: d mean(t^2) = 2 t (1 - t^2) / n, pulled back through x @ w
t = np.tanh(x.data @ w.data)
print("analytic\n", x.data.T @ (2 * t * (1 - t ** 2) / t.size))


# grad_check runs the comparison for any function of a dict of tensors
def f(p):
    return tn.mean(tn.square(tn.tanh(tn.matmul(x, p["w"]))))


result = tn.grad_check(f, {"w": w.data}, eps=1e-6)
print("max relative error", result.max_error)

# an LSTM cell, the recurrent building block of the model
gates = tape.watch(rng.normal(size=(2, 8)))
c = tape.watch(rng.normal(size=(2, 2)))
h, c_next = tn.lstm_cell(gates, c)
print("lstm h", h.data.round(3))
