"""
siamsearch - differentiable architecture search for siamese SSL heads

Searches the projector and predictor MLPs of a stop-gradient siamese network
with a softmax-relaxed supernet and first-order bi-level optimisation, on a
small numpy autograd engine.
"""

__version__ = "0.1.0"
