"""
===========================
Gradients through the core
===========================

Build a tiny graph by hand, backpropagate, and compare against a central
difference.
"""
import numpy as np

from osuda import tensor as T

rng = np.random.default_rng(0)

x = T.Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
w = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)

y = T.relu(T.conv2d(x, w, padding=1))
loss = T.tmean(y * y)
loss.backward()
print("loss", loss.item())
print("dloss/dw shape", w.grad.shape)

# the graph is spent after one backward pass
try:
    loss.backward()
except RuntimeError as exc:
    print("second backward:", exc)

# finite-difference check on one weight
def value():
    out = T.relu(T.conv2d(x, w, padding=1))
    return T.tmean(out * out).item()


h = 1e-5
idx = (1, 0, 2, 1)
w0 = w.data[idx]
w.data[idx] = w0 + h
up = value()
w.data[idx] = w0 - h
down = value()
w.data[idx] = w0
print("analytic", w.grad[idx], "numeric", (up - down) / (2 * h))

# inside no_grad nothing is recorded
with T.no_grad():
    z = T.conv2d(x, w)
print("requires_grad under no_grad:", z.requires_grad)
