"""Synthetic PMU event generation via event-participation decomposition.

Pipeline: standardize event tensors, split them into event signatures and
orthonormal participation factors, learn a generator for the factors,
simulate the inter-event factors statistically, recombine into labeled
PQVF event tensors and score the result for realism and privacy.
"""

__version__ = "0.1.0"

CHANNELS = ("P", "Q", "V", "F")
