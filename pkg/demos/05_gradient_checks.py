"""Gradient verification: reverse mode vs central finite differences.

The tape's backward pass is checked against (f(p+eps) - f(p-eps))/(2 eps)
for every building block. Sites downstream of the spiking gate are
reported separately, because there the mismatch is the designed
surrogate behavior, not a bug.
"""

import numpy as np

from spikefield import diffcore as dc
from spikefield import gradcheck

# the low-level API on a toy function
params = dc.FlatParams()
params.add("x", np.array([0.5, -1.2, 2.0]))


def f(p):
    tape = dc.Tape(p)
    x = tape.param("x")
    return dc.sum(dc.exp(x * 0.5) * x * x)


report = dc.grad_check(f, params, eps=1e-5)
print("toy function d/dx:", np.round(report.ad, 6))
print("finite differences:", np.round(report.fd, 6))
print(f"max relative error: {report.max_rel_err:.2e}\n")

# the full release gate, suite by suite
for result in gradcheck.run_suites(seed=0):
    print(result.line())
