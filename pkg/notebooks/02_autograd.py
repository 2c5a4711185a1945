# %% [markdown]
# # A small reverse-mode autograd
#
# Every model in the package runs on a tape of numpy operations.
# Here we check a gradient by finite differences and fit a line with Adam.

# %%
import numpy as np

from molfusion import autograd as ag

rng = np.random.default_rng(0)

# %%
w = ag.Parameter(rng.normal(size=(3, 2)), "w")
x = ag.Tensor(rng.normal(size=(5, 3)))
loss = ag.mean(ag.square(ag.tanh(ag.matmul(x, w))))
ag.backward(loss)

h = 1e-6
bump = np.zeros_like(w.data)
bump[1, 0] = h
f = lambda m: np.mean(np.tanh(x.data @ m) ** 2)  # noqa: E731
print(w.grad[1, 0], (f(w.data + bump) - f(w.data - bump)) / (2 * h))

# %% [markdown]
# Linear regression with the optimiser used for pretraining.

# %%
xs = rng.normal(size=(100, 2))
ys = xs @ np.array([[2.0], [-1.0]]) + 0.5
params = {"w": ag.Parameter(np.zeros((2, 1)), "w"), "b": ag.Parameter(np.zeros(1), "b")}
opt = ag.Adam(params, lr=0.05)
for step in range(500):
    opt.zero_grad()
    pred = ag.add(ag.matmul(ag.Tensor(xs), params["w"]), params["b"])
    ag.backward(ag.mse(pred, ag.Tensor(ys)))
    opt.step()
print(params["w"].data.ravel(), params["b"].data)
