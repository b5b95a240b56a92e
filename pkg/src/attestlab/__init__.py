"""Desk-scale lab for SRAM-based device self-attestation.

Pipeline: synthetic SRAM trace generation -> denoising autoencoder ->
int8 quantization -> adaptive threshold calibration -> attestation state
machine -> four-message mutual attestation handshake with scripted
adversaries.
"""

__version__ = "0.1.0"
