"""Fine-grained contrastive learning on a synthetic shapes world.

Modules:

- ``tensor``: reverse-mode autodiff over numpy arrays
- ``encoders``: patch and token transformer towers
- ``objective``: contrastive, hard-negative and local-similarity losses
- ``hardneg``: rule-based hard-negative captions
- ``synth``: scenes, captions and evaluation suites
- ``trainer`` and ``checkpoint``: AdamW loop, binary checkpoints, interpolation
- ``evaluation``: selection, group, zero-shot and retrieval metrics
- ``cli``: command-line entry point
"""

__version__ = "0.1.0"
