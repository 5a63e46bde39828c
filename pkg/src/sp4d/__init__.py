"""Joint RGB / kinematic-part toolkit: color-encoded part maps, dual-branch
denoising with feature fusion, harmonic skinning and label-free evaluation."""

__version__ = "0.1.0"
