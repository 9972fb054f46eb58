"""
Reverse-mode gradients on small tensors
=======================================

"""

# every value in the library is a Tensor of float64 data
import numpy as np
from milab import autodiff as ad
from milab.autodiff import Tensor

a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
b = Tensor([[1.0], [1.0]], requires_grad=True)
print(ad.matmul(a, b).data.ravel())  # row sums: [3, 7]

# a softmax over three scores, then a cross-entropy loss against class 1
x = Tensor([0.5, -1.0, 2.0], requires_grad=True)
loss = ad.cross_entropy(x, 1)
loss.backward()
print("loss", loss.item())
print("grad", x.grad, "(softmax minus one-hot)")

# gradients accumulate: a second backward pass doubles them
loss.backward()
print("after two passes", x.grad)

# central differences agree with the tape
rep = ad.grad_check(lambda t: ad.total(ad.tanh(ad.matmul(t, Tensor(np.eye(2))))), Tensor(np.ones((3, 2))))
print(f"grad check: max relative error {rep.max_rel_error:.1e}, passed={rep.passed}")
