"""ragward: a corpus-poisoning attack/defense laboratory for dense retrieval.

Ships a miniature differentiable bi-encoder, greedy token-substitution
attacks, a gradient/masked-probability filtering defense with
perplexity and norm baselines, and a retrieval-phase evaluation
harness.  Heavy kernels run through a compiled extension when built,
with a numpy fallback selected at import (see ragward.kernels.BACKEND).
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
