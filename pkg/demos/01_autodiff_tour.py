# A short tour of the tape-based autodiff in fsclab.tensor.
#
# Run: python3 demos/01_autodiff_tour.py

import numpy as np

from fsclab.tensor import Tape, Tensor, backward, grad_check

# Tensors wrap numpy arrays. Only leaves with requires_grad collect gradients.
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)

# Operations are recorded on the active tape; backward walks it in reverse.
with Tape() as tape:
    loss = (x * x).sum()
    backward(loss)
print("d/dx sum(x^2) =", x.grad)  # 2x
print("recorded ops  :", [n.kind for n in tape.nodes])

# Gradients accumulate until cleared, the same way they do in torch.
x.zero_grad()

# A softmax followed by a log, evaluated at the symmetric point.
z = Tensor(np.zeros(2), requires_grad=True)
with Tape():
    backward(z.softmax().log()[0])
print("grad of log softmax[0] at 0:", z.grad)  # [0.5, -0.5]

# l2_normalize maps a zero row to e1 instead of dividing by zero.
print(Tensor(np.zeros((1, 4))).l2_normalize(-1).data)

# grad_check compares reverse mode against central differences (float64).
rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)))
b = Tensor(rng.normal(size=(4, 2)))
res = grad_check(lambda ts: (ts[0] @ ts[1]).gelu().softmax(-1).log().sum(), [a, b])
print(f"max relative error: {res.max_rel_error:.2e}")

# max/min route the gradient to the first extremum; grad_check reports
# coordinates where a finite-difference step would flip the choice.
tied = Tensor(np.array([1.0, 1.0 + 1e-7, 0.0]))
print("tied coordinates skipped:", grad_check(lambda t: t.max(), tied).skipped)
