"""
Autodiff and gradient checks
============================

Build a small expression, backpropagate, and compare against central
differences.
"""

import numpy as np

from hpcfnet import ops
from hpcfnet.gradcheck import gradcheck
from hpcfnet.tensor import Tensor

rng = np.random.default_rng(0)

# a dilated 3x3 conv followed by a leaky ReLU, reduced to a scalar
spec = ops.ConvSpec(4, 2, 3, padding=2, dilation=2)
x = Tensor(rng.normal(size=(1, 4, 6, 6)), requires_grad=True)
w = Tensor(rng.normal(size=spec.weight_shape) * 0.3, requires_grad=True)
loss = ops.leaky_relu(ops.conv2d(x, w, None, spec), 0.01).sum()
loss.backward()
print("loss", float(loss.data), "| dL/dw shape", w.grad.shape)

###############################################################################
# The same function under a finite-difference check, one line per op.

report = gradcheck(lambda: ops.leaky_relu(ops.conv2d(x, w, None, spec), 0.01).sum(),
                   {"x": x, "w": w}, tol=1e-4, op="conv2d+leaky")
print(report.summary())

###############################################################################
# Grouped convolutions keep channel groups apart: perturbing input group 0
# leaves output group 1 untouched.

gspec = ops.ConvSpec(4, 2, 3, padding=1, groups=2)
gw = Tensor(rng.normal(size=gspec.weight_shape))
base = ops.conv2d(x, gw, None, gspec).data
xp = x.data.copy()
xp[0, :2] += 1.0
moved = ops.conv2d(Tensor(xp), gw, None, gspec).data - base
print("group 0 changed:", bool(np.any(moved[0, 0])), "| group 1 changed:", bool(np.any(moved[0, 1])))
