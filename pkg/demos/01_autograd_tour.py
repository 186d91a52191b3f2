# # A tour of the autograd core
#
# Every computation in flexkd runs on a small reverse-mode engine over
# float64 numpy arrays. This notebook builds a two-layer network by hand,
# differentiates it and checks the result against finite differences.

# +
import numpy as np

from flexkd import autograd as ag
from flexkd.autograd import Tensor, grad_wrt

rng = np.random.default_rng(0)
# -

# A tensor only records history when it asks for gradients.

# +
w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(6, 4)))
targets = np.array([0, 1, 2, 0, 1, 2])

hidden = ag.tanh(x @ w1).watch()  # watch() lets us ask for d loss / d hidden later
loss = ag.softmax_cross_entropy(hidden @ w2, targets)
loss.backward()
print("loss", loss.item())
print("dL/dw2 shape", w2.grad.shape)
# -

# Gradients with respect to an intermediate node are what the importance
# scores are made of.

# +
g_hidden = grad_wrt(ag.softmax_cross_entropy(hidden @ w2, targets), hidden)
print(np.round(np.abs(g_hidden.data), 4))
# -

# Finite differences agree with the analytic gradient.

# +
def f(v):
    return ag.softmax_cross_entropy(ag.tanh(x @ Tensor(v)) @ w2, targets).item()

h = 1e-5
numeric = np.zeros_like(w1.data)
for idx in np.ndindex(*w1.shape):
    up, down = w1.data.copy(), w1.data.copy()
    up[idx] += h
    down[idx] -= h
    numeric[idx] = (f(up) - f(down)) / (2 * h)
print("max abs difference", np.abs(numeric - w1.grad).max())
# -

# Non-finite values are refused instead of propagating silently.

# +
try:
    ag.log(Tensor([0.0]))
except Exception as exc:
    print(type(exc).__name__, exc)
