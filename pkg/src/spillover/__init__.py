"""Causal estimation of cross-county policy spillovers on mobility networks.

The pipeline: build a single assignment score per county-week from centered
health metrics (`assignment`), filter to a local window around the tier
threshold, fit a zero-inflated Poisson visit model with loss-corrected
negative sampling (`zipmodel`, `estimator`), evaluate counterfactual
restriction scenarios (`counterfactual`), and optimize balanced macro-county
partitions by minimum k-cut (`partition`). `synth` generates worlds with
planted ground truth; `cli` wires it all together.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401,E402
    assignment,
    counterfactual,
    dataio,
    domain,
    estimator,
    partition,
    rng,
    synth,
    zipmodel,
)
