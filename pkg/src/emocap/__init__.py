"""Joint global-local contrastive training on structured emotion captions.

Desk-scale and fully inspectable: a numpy graph engine with checked
gradients, paired image/caption encoders, the contrastive objectives, mined
cross-modal positives with a warmup schedule, a deterministic trainer, an
evaluation harness, and a synthetic corpus generator that makes every claim
testable end to end.
"""

__version__ = "0.1.0"
