"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""
import numpy as np

from occvla import tensor as T
from occvla.gradcheck import check_gradients, end_to_end_check, run_op_suite
from occvla.tensor import Tensor

########### A tiny graph
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
w = Tensor(np.array([[5.0], [6.0]]), requires_grad=True)
y = x @ w                           # [[17], [39]]
loss = T.tsum(y * y)                # 17**2 + 39**2 = 1810
T.backward(loss)
print("loss", loss.item())
print("dL/dw", w.grad.ravel())      # 2 * x.T @ y = [268, 380]

########### Softmax stays finite for large logits
print(T.softmax(Tensor(np.array([1000.0, 0.0])), axis=-1).data)
print(T.softmax(Tensor(np.array([1.0, 2.0, 3.0])), axis=-1).data.round(5))

########### Cross entropy: uniform logits over 8 classes give ln 8
logits = Tensor(np.zeros((4, 8)))
print("uniform CE", T.cross_entropy(logits, np.array([0, 3, 5, 7])).item(), "ln 8 =", np.log(8))

########### Central differences on any function of named parameters
rng = np.random.default_rng(0)
params = {"a": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
          "b": Tensor(rng.normal(size=(4,)), requires_grad=True)}


def fn():
    return T.tsum(T.gelu(params["a"] @ T.reshape(params["b"], (4, 1))))


for res in check_gradients(fn, params, h=1e-5):
    print(res.name, f"rel error {res.rel_error:.2e}")

########### Every primitive, then the whole 2-layer model
errors = run_op_suite(n_shapes=3)
worst = max(errors, key=lambda k: max(errors[k]))
print(len(errors), "ops checked; worst is", worst, f"{max(errors[worst]):.2e}")
e2e = end_to_end_check(seed=0)
print("end to end:", len(e2e), "tensors, worst", f"{max(r.rel_error for r in e2e):.2e}")
