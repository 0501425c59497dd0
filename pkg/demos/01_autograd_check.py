"""Walk through the tape autograd: build a small graph, backprop, and compare
with central differences."""
# %%
import numpy as np

from hivt5.tensor import cross_entropy, make_rng, matmul, parameter, rms_norm, softmax

rng = make_rng(0)
w = parameter(rng.normal(size=(6, 4)), "w")
g = parameter(np.ones(4), "g")
x = rng.normal(size=(3, 6))

# %% forward: linear -> rms norm -> relu -> cross entropy
def loss_fn():
    h = rms_norm(matmul(x, w), g).relu()
    return cross_entropy(h, [0, 2, 3])

loss = loss_fn()
loss.backward()
print("loss", loss.item())

# %% finite differences, one coordinate at a time
eps = 1e-5
numeric = np.zeros_like(w.data)
for idx in np.ndindex(w.shape):
    old = w.data[idx]
    w.data[idx] = old + eps
    hi = loss_fn().item()
    w.data[idx] = old - eps
    lo = loss_fn().item()
    w.data[idx] = old
    numeric[idx] = (hi - lo) / (2 * eps)

print("max abs difference:", np.abs(numeric - w.grad).max())

# %% softmax rows sum to one
p = softmax(matmul(x, w))
print(p.numpy().sum(axis=-1))
