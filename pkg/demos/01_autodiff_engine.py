"""Tour of the autodiff engine: tensors, the tape, backward, and checking a
gradient rule against central finite differences.

Run: python demos/01_autodiff_engine.py
"""

import numpy as np

from ramen import tensor as T
from ramen.gradcheck import check_gradients
from ramen.tensor import Tensor

# Tensors wrap dense numpy arrays. Only leaves you mark requires_grad(and the
# intermediates computed from them) participate in backpropagation.
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
w = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True, dtype=np.float64)

# Ops record themselves on the active tape while they execute eagerly.
with T.Tape() as tape:
    y = T.mul(x, w)            # elementwise product
    z = T.swish(y)             # x * sigmoid(x)
    loss = T.sum_all(z)
    print(f"recorded {len(tape)} ops; loss = {loss.data:.6f}")
    T.backward(loss)

print("dloss/dx =", x.grad)
print("dloss/dw =", w.grad)

# The same mechanics drive matrices. matmul's rule is dA = g @ B^T, dB = A^T @ g.
a = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
b = Tensor(np.random.default_rng(1).standard_normal((4, 2)), requires_grad=True, dtype=np.float64)

with T.Tape():
    prod = T.matmul(a, b)
    T.backward(T.sum_all(prod))
print("\nmatmul gradient shapes:", a.grad.shape, b.grad.shape)

# Every gradient rule in the package is verified against central finite
# differences at float64. The check below reports the max relative error.
a.zero_grad(), b.zero_grad()
report = check_gradients(lambda: T.sum_all(T.swish(T.matmul(a, b))), [("a", a), ("b", b)])
for name, err in report.items():
    print(f"finite-difference check {name}: max rel err {err:.2e}")

# A sum of two losses backpropagates like the sum of separate passes.
x.zero_grad()
with T.Tape():
    combined = T.add(T.sum_all(T.mul(x, x)), T.sum_all(x))
    T.backward(combined)
print("\nd(sum(x^2) + sum(x))/dx =", x.grad, "(expected 2x + 1)")
