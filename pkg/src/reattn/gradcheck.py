"""Central-difference verification of tape adjoints.

The checker is the independent oracle for every gradient rule in the
package: it never goes through the tape to compute the numerical side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from reattn.errors import CheckInvalidError, ParameterError
from reattn.tape import ComputationTape
from reattn.tensor import Tensor


@dataclass
class GradCheckReport:
    """Max relative error per checked input, and the overall verdict."""

    per_input: list[float]
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "ok" if self.ok else "FAIL"
        return (f"grad_check {status}: max rel error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.1e}, per input "
                f"{['%.3e' % e for e in self.per_input]})")


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.abs(a) + np.abs(b) + 1e-8
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(function, inputs, step: float = 1e-5, tolerance: float = 1e-4,
               projection_seed: int = 0) -> GradCheckReport:
    """Compares tape adjoints of `function` against central differences.

    `function` takes the given tensors and returns a Tensor; non-scalar
    outputs are reduced with a fixed random projection so a single scalar is
    differentiated. Inputs must be double precision, and the function must
    be deterministic (frozen dropout masks); nondeterminism is a detected
    error, not a wrong answer.
    """
    inputs = list(inputs)
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    for t in inputs:
        if t.dtype != np.float64:
            raise ParameterError("grad_check requires double-precision inputs")

    probe = function(*inputs)
    again = function(*inputs)
    if probe.shape != again.shape or not np.array_equal(probe.data, again.data):
        raise CheckInvalidError("function is not deterministic under repeated evaluation")

    rng = np.random.default_rng(projection_seed)
    weights = rng.standard_normal(probe.shape)

    def scalar_loss() -> float:
        return float(np.sum(function(*inputs).data * weights))

    # Analytic side: one taped pass.
    for t in inputs:
        t.grad = None
    with ComputationTape() as tape:
        out = function(*inputs)
        from reattn import ops

        loss = ops.sum_(ops.mul(out, Tensor._wrap(weights.astype(out.dtype), False)))
    tape.backward(loss)

    per_input = []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = scalar_loss()
            flat[i] = orig - step
            f_minus = scalar_loss()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * step)
        per_input.append(_rel_error(analytic, numeric))

    if not per_input:
        raise ParameterError("no input requires gradients; nothing to check")
    return GradCheckReport(per_input, max(per_input), tolerance)
