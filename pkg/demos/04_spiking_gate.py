"""The gate itself: forward truncation and its surrogate gradients.

The gate zeroes densities below the threshold and passes the rest
through unchanged (the boundary passes). Its true derivative w.r.t. the
threshold is zero almost everywhere, so training uses a triangular
window surrogate that is only active within k of the threshold and never
positive; the input path keeps just the step indicator.
"""

import numpy as np

from spikefield.spiking import (FifNeuron, fif_forward, fif_grad_input,
                                fif_grad_input_full, fif_grad_threshold)

neuron = FifNeuron(theta_th=1.0, k=1.0, r=1.0)
sigma = np.array([0.0, 0.5, 0.99, 1.0, 1.5, 2.5])

print(f"threshold {neuron.theta_th}, window k={neuron.k}, scale r={neuron.r}")
print(f"{'sigma':>8} {'gated':>8} {'d/dtheta':>10} {'d/dsigma':>10} "
      f"{'d/dsigma(2-term)':>17}")
for s in sigma:
    print(f"{s:8.2f} {fif_forward(s, neuron):8.2f} "
          f"{fif_grad_threshold(s, neuron):10.3f} "
          f"{fif_grad_input(s, neuron):10.0f} "
          f"{fif_grad_input_full(s, neuron):17.3f}")

print("\nnotes:")
print(" - gated output equals input from the threshold upward (1.0 passes)")
print(" - threshold gradient is nonpositive and vanishes outside |sigma-theta|<k")
print(" - default input gradient is the bare step; the 2-term variant exists")
print("   only for the ablation harness (it trades geometry for color fit)")

# the threshold loss is what pushes the threshold up in the first place
lam = 0.05
for theta in (0.0, 0.5, 1.0, 2.0):
    print(f"threshold loss at theta={theta:.1f}: {lam * np.exp(-theta):.5f}")
