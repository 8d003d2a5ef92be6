"""Reverse-mode gradients on a tape, checked against finite differences.

Run: python3 demos/01_autodiff_tape.py
"""
import numpy as np

from dsscnet import tensor as T

rng = np.random.default_rng(0)

# Small conv, batchnorm, maxpool and relu pipeline on a 2-image batch.
x = rng.standard_normal((2, 1, 6, 6))
kernel = rng.standard_normal((3, 1, 3, 3))
gamma, beta = np.ones(3), np.zeros(3)
head = rng.standard_normal((1, 3))


def loss_of(p):
    h = T.conv2d(p["x"], p["k"], None, "same")
    h = T.batchnorm2d(h, p["gamma"], p["beta"], T.BatchNormState.fresh(3), training=True)
    h = T.relu(T.maxpool2d(h))
    # a random linear read-out keeps errors from cancelling under a plain sum
    return T.sum_all(T.dense(T.global_avg_pool(h), head, None))


arrays = {"x": x, "k": kernel, "gamma": gamma, "beta": beta}
tape = T.GradTape()
taped = {name: tape.param(name, value) for name, value in arrays.items()}
loss = loss_of(taped)
grads = tape.backward(loss)
print("loss", float(T._data(loss)))
for name, g in grads.items():
    print(f"  d loss / d {name:5s} shape {g.shape}, |g| = {np.linalg.norm(g):.4f}")

# central differences on a handful of coordinates
errors = T.gradcheck(lambda p: float(T._data(loss_of(p))), {k: v.copy() for k, v in arrays.items()},
                     grads, n_coords=8, h=1e-6, rng=np.random.default_rng(1))
print("worst relative error per input:")
for name, err in errors.items():
    print(f"  {name:5s} {err:.2e}")
