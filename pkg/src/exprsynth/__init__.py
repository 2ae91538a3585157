"""Toy-scale facial expression data synthesis.

A conditional denoising diffusion model over procedurally rendered face
sprites, with facial-action-unit (AU) adapter control, classifier-driven
semantic guidance on text embeddings, a diffusion-feature label calibrator,
and an ensemble vote/rectify loop, plus the evaluation harness that checks
the directional claims (guidance improves expression fidelity, synthetic
data helps downstream classifiers, performance scales with volume).
"""

__version__ = "0.1.0"
