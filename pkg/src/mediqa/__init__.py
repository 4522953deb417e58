"""Prompt-driven no-reference medical image quality assessment, desk scale.

Self-contained pipeline: a small float64 autodiff tensor library, salient
slice selection for 3D volumes, a transformer backbone with channel and
windowed spatial attention plus additive prompt injection, dual-branch
score aggregation, two-stage training (physical parameters, then expert
scores), synthetic data generation, and an SRCC/PLCC/RMSE metric harness.
"""

__version__ = "0.1.0"
