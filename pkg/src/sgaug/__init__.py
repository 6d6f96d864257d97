"""Scene-graph-conditioned synthetic image generation for SGG data augmentation.

The package covers the full desk-scale loop: a procedural shapes world with
exactly-known scene graphs, caption and token-to-relation map construction,
graph-masked attention conditioning for a pixel-space diffusion generator,
hybrid annotation extraction from generated images, and a small two-stage
scene-graph-generation model evaluated with Recall@K under TDE debiasing.
"""

__version__ = "0.1.0"
