"""Full-precision integrate-and-fire gate on the density output.

The gate passes densities that reach the learnable threshold unchanged
(boundary included) and zeroes the rest. The Heaviside step is not
differentiable, so backward uses hand-chosen surrogates: the threshold
receives a triangular-window pull that is nonzero only inside the band
|sigma - theta| < k and is always <= 0 (raising the threshold can never
raise the output); the input path keeps only the step indicator by
default. The two-term input surrogate exists solely for the ablation
harness and is recorded under a distinct op kind so a tape inspection can
prove the default trainer never uses it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Array, Var
from .errors import InputError


@dataclass(frozen=True)
class FifNeuron:
    """Learnable scalar threshold plus surrogate window width k and scale r."""

    theta_th: float = 0.0
    k: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if not (self.k > 0.0 and self.r > 0.0):
            raise InputError("surrogate hyperparameters k and r must be > 0")


def fif_forward(sigma: Array, neuron: FifNeuron) -> Array:
    """Truncated density: sigma where sigma >= theta_th, else 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return np.where(sigma >= neuron.theta_th, sigma, 0.0)


def fif_grad_threshold(sigma: Array, neuron: FifNeuron) -> Array:
    """d(truncated)/d(threshold): -r * max(0, (k - |sigma-theta|)/k^2) * sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    window = np.maximum(0.0, (neuron.k - np.abs(sigma - neuron.theta_th))
                        / neuron.k ** 2)
    return -neuron.r * window * sigma


def fif_grad_input(sigma: Array, neuron: FifNeuron) -> Array:
    """Default d(truncated)/d(sigma): the step indicator only (the window
    term is deliberately dropped; it trades geometry for color accuracy)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma >= neuron.theta_th).astype(np.float64)


def fif_grad_input_full(sigma: Array, neuron: FifNeuron) -> Array:
    """Diagnostic two-term input surrogate (window term + step indicator).
    Used only by the ablation harness, never by the default trainer."""
    sigma = np.asarray(sigma, dtype=np.float64)
    window = np.maximum(0.0, (neuron.k - np.abs(sigma - neuron.theta_th))
                        / neuron.k ** 2)
    step = (sigma >= neuron.theta_th).astype(np.float64)
    return neuron.r * window * sigma + step


def attach(sigma: Var, theta: Var, k: float = 1.0, r: float = 1.0, *,
           full_input_grad: bool = False,
           threshold_surrogate: bool = True) -> Var:
    """Record the gate on the tape.

    ``threshold_surrogate=False`` cuts the rendering-gradient path into the
    threshold (it then learns from the threshold loss alone); kept as an
    ablation knob. Op kind is "fif_full" when the two-term input surrogate
    is requested, "fif" otherwise.
    """
    neuron = FifNeuron(float(theta.value), k, r)
    sig_v = sigma.value
    out = fif_forward(sig_v, neuron)
    grad_in_fn = fif_grad_input_full if full_input_grad else fif_grad_input
    op = "fif_full" if full_input_grad else "fif"

    def vjp(g):
        g_sigma = g * grad_in_fn(sig_v, neuron)
        if threshold_surrogate:
            g_theta = np.asarray((g * fif_grad_threshold(sig_v, neuron)).sum())
        else:
            g_theta = None
        return (g_sigma, g_theta)

    return sigma.tape.record(op, out, (sigma, theta), vjp)
