"""Desk-scale mixed-precision post-training quantization toolkit.

Pipeline: build a deterministic toy diffusion-style network, measure
per-layer quantization sensitivity with group-specific metrics (SSIM for
content-related layers, SQNR for quality-related ones), then allocate
2/4/8-bit widths under a budget with an exact integer-programming solver.
"""

from . import allocator, metrics, quantizer, sensitivity, tensor_core, toy_model  # noqa: F401

__version__ = "0.1.0"
