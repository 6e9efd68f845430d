"""Prompt-free online segmentation with a few-shot mapping learner.

A desk-scale pipeline: frozen toy encoders and decoder, similarity-seeded
memory attention, a steepest-descent few-shot learner, adaptive feature
fusion, and confidence-gated online updates.
"""

__version__ = "0.1.0"
