"""Pretrained encoder-decoder transformer for vehicle-group trajectories.

Modules: ``ingest`` (tracks to frame samples), ``syngen`` (synthetic traffic),
``noise`` (span masking and frame swaps), ``net`` (the model), ``train``,
``infer`` (prediction and rollout), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
