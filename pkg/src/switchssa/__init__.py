"""Markov-switching integrated step-selection analysis.

Simulation of state-switching movement over raster landscapes, case-control
data construction, joint maximum-likelihood estimation of hidden-state,
movement and habitat-selection parameters, Viterbi state decoding, and a
simulation-study harness.
"""

__version__ = "0.1.0"
