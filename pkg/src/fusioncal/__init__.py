"""fusioncal: multi-sensor self-calibration on linear-Gaussian tracking networks.

Subpackages by responsibility:
  gaussians    Gaussian algebra and Kalman primitives
  scenario     network geometry, trajectories, permuted measurements
  tracking     per-sensor filtering with assignment-based association
  likelihood   separable pairwise pseudo-likelihoods over candidate offsets
  nbp          nonparametric loopy belief propagation over the offset MRF
  diagnostics  closed-form information measures and approximation bounds
  experiment   batch Monte Carlo harness, metrics, CSV emission
  service      FastAPI wrapper around the library
  cli          thin client command line
"""

__version__ = "0.1.0"
