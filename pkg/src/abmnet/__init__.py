"""abmnet: one-shot classification through explicit pixel alignment.

A query image is matched to each labeled reference image by aligning
sampled query pixels to reference pixels in a stacked multi-layer feature
space; the per-image alignment score drives a softmin label posterior and,
with a learned threshold, an open-set decision.
"""

__version__ = "0.1.0"
