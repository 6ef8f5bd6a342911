"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""

# %%
import numpy as np

from crossdistill import tensor as T
from crossdistill.tensor import Tape, Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 8)), requires_grad=True, dtype=np.float64)
gain = Tensor(np.ones(8), requires_grad=True, dtype=np.float64)
bias = Tensor(np.zeros(8), requires_grad=True, dtype=np.float64)
target = Tensor(rng.normal(size=(4, 8)))

# %% Operations only record when a tape is active.
def loss():
    h = T.gelu(T.layernorm(x, gain, bias))
    return T.mse(T.l2_normalize(h), target)

with Tape() as tape:
    value = loss()
    T.backward(value)
print(f"loss {float(value.data):.6f}, {len(tape)} recorded nodes")

# %% Central differences for one entry of x.
eps = 1e-5
x.data[1, 3] += eps
up = float(loss().data)
x.data[1, 3] -= 2 * eps
down = float(loss().data)
x.data[1, 3] += eps
print("analytic", x.grad[1, 3], "numeric", (up - down) / (2 * eps))
